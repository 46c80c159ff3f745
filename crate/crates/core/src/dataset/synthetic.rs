//! Seeded moving-shapes videos with full per-frame instance annotations.
//!
//! Each sequence draws a smooth static background texture and a few coloured
//! discs, squares or triangles that move with constant velocity and bounce off
//! the borders. Two optional scenarios reproduce common tracking failures:
//! `crossing` makes the first two instances pass over each other mid-sequence,
//! `exit_return` sends the first instance out of the frame and back.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pnm::RgbImage;
use super::{Split, VideoSequence};
use crate::error::{Error, Result};
use crate::isolation::InstanceMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Square frame side in pixels.
    pub size: usize,
    pub sequences: usize,
    /// How many of `sequences` go to the validation split (taken last).
    pub val_sequences: usize,
    pub frames: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub shapes: Vec<ShapeKind>,
    /// Speed range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    pub exit_return: bool,
    pub crossing: bool,
    /// Bounds on the total foreground fraction of a fully visible frame.
    pub min_foreground: f64,
    pub max_foreground: f64,
    pub background_seed: u64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 64,
            sequences: 16,
            val_sequences: 4,
            frames: 16,
            min_instances: 1,
            max_instances: 3,
            shapes: ShapeKind::ALL.to_vec(),
            min_speed: 0.5,
            max_speed: 2.0,
            exit_return: false,
            crossing: false,
            min_foreground: 0.02,
            max_foreground: 0.20,
            background_seed: 7,
            seed: 1,
        }
    }
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl SyntheticConfig {
    pub fn to_kv(&self) -> String {
        let shapes: Vec<&str> = self.shapes.iter().map(|s| s.as_str()).collect();
        format!(
            "size={}\nsequences={}\nval_sequences={}\nframes={}\nmin_instances={}\nmax_instances={}\nshapes={}\nmin_speed={}\nmax_speed={}\nexit_return={}\ncrossing={}\nmin_foreground={}\nmax_foreground={}\nbackground_seed={}\ndata_seed={}\n",
            self.size,
            self.sequences,
            self.val_sequences,
            self.frames,
            self.min_instances,
            self.max_instances,
            shapes.join(","),
            self.min_speed,
            self.max_speed,
            self.exit_return,
            self.crossing,
            self.min_foreground,
            self.max_foreground,
            self.background_seed,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return bad(format!("image size {} must be a positive multiple of 16", self.size));
        }
        if self.sequences == 0 || self.frames == 0 {
            return bad("sequences and frames must be positive".into());
        }
        if self.val_sequences >= self.sequences && self.sequences > 1 {
            return bad(format!(
                "{} validation sequences leave no training data out of {}",
                self.val_sequences, self.sequences
            ));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances || self.max_instances > 4 {
            return bad(format!(
                "instances per sequence must satisfy 1 <= {} <= {} <= 4",
                self.min_instances, self.max_instances
            ));
        }
        if self.crossing && self.max_instances < 2 {
            return bad("crossing sequences need at least two instances".into());
        }
        if self.shapes.is_empty() {
            return bad("at least one shape kind is required".into());
        }
        if !(self.min_speed > 0.0 && self.min_speed <= self.max_speed) {
            return bad(format!("speed range {}..{} is invalid", self.min_speed, self.max_speed));
        }
        if !(0.0 < self.min_foreground && self.min_foreground < self.max_foreground && self.max_foreground < 1.0) {
            return bad(format!(
                "foreground bounds {}..{} are invalid",
                self.min_foreground, self.max_foreground
            ));
        }
        Ok(())
    }
}

/// A shape with its trajectory.
#[derive(Debug, Clone)]
struct Actor {
    kind: ShapeKind,
    /// Radius of the equal-area disc.
    radius: f64,
    color: [f64; 3],
    positions: Vec<(f64, f64)>,
}

impl Actor {
    /// Half-extent of the axis-aligned bounding box.
    fn extent(&self) -> f64 {
        match self.kind {
            ShapeKind::Disc => self.radius,
            ShapeKind::Square => self.half_side(),
            ShapeKind::Triangle => self.triangle_side() / 2.0,
        }
    }

    fn half_side(&self) -> f64 {
        self.radius * std::f64::consts::PI.sqrt() / 2.0
    }

    fn triangle_side(&self) -> f64 {
        (4.0 * std::f64::consts::PI * self.radius * self.radius / 3f64.sqrt()).sqrt()
    }

    fn covers(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy) = self.positions[t];
        let (dx, dy) = (px - cx, py - cy);
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= self.radius * self.radius,
            ShapeKind::Square => {
                let h = self.half_side();
                dx.abs() <= h && dy.abs() <= h
            }
            ShapeKind::Triangle => {
                // Upward equilateral triangle centred on its bounding box.
                let s = self.triangle_side();
                let height = s * 3f64.sqrt() / 2.0;
                let top = -height / 2.0;
                let rel = dy - top;
                rel >= 0.0 && rel <= height && dx.abs() <= rel / height * s / 2.0
            }
        }
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [230.0, 40.0, 40.0],
    [40.0, 200.0, 60.0],
    [50.0, 80.0, 235.0],
    [240.0, 220.0, 40.0],
    [220.0, 50.0, 220.0],
    [40.0, 220.0, 220.0],
];

fn bounce(positions: &mut Vec<(f64, f64)>, start: (f64, f64), vel: (f64, f64), extent: f64, size: f64, frames: usize) {
    let (mut x, mut y) = start;
    let (mut vx, mut vy) = vel;
    let (lo, hi) = (extent, size - extent);
    positions.clear();
    for _ in 0..frames {
        positions.push((x, y));
        x += vx;
        y += vy;
        if x < lo {
            x = 2.0 * lo - x;
            vx = -vx;
        }
        if x > hi {
            x = 2.0 * hi - x;
            vx = -vx;
        }
        if y < lo {
            y = 2.0 * lo - y;
            vy = -vy;
        }
        if y > hi {
            y = 2.0 * hi - y;
            vy = -vy;
        }
    }
}

fn boxes_overlap(a: &Actor, b: &Actor, t: usize, margin: f64) -> bool {
    let (ax, ay) = a.positions[t];
    let (bx, by) = b.positions[t];
    let reach = a.extent() + b.extent() + margin;
    (ax - bx).abs() <= reach && (ay - by).abs() <= reach
}

struct SequenceBuilder<'a> {
    cfg: &'a SyntheticConfig,
    index: usize,
    rng: ChaCha8Rng,
}

impl SequenceBuilder<'_> {
    fn size(&self) -> f64 {
        self.cfg.size as f64
    }

    fn speed(&mut self) -> f64 {
        self.rng.random_range(self.cfg.min_speed..=self.cfg.max_speed)
    }

    fn velocity(&mut self) -> (f64, f64) {
        let s = self.speed();
        let a = self.rng.random_range(0.0..std::f64::consts::TAU);
        (s * a.cos(), s * a.sin())
    }

    /// Per-instance radii whose total area lands inside the foreground bounds.
    fn radii(&mut self, n: usize) -> Vec<f64> {
        let area = self.size() * self.size();
        let (lo, hi) = (self.cfg.min_foreground, self.cfg.max_foreground);
        // Stay clear of the bounds so rasterisation error cannot cross them.
        let total = self.rng.random_range(lo + 0.3 * (hi - lo)..lo + 0.7 * (hi - lo));
        let shares: Vec<f64> = (0..n).map(|_| self.rng.random_range(0.7..1.3)).collect();
        let norm: f64 = shares.iter().sum();
        shares
            .iter()
            .map(|s| (total * s / norm * area / std::f64::consts::PI).sqrt())
            .collect()
    }

    fn actors(&mut self, n: usize) -> Vec<Actor> {
        let radii = self.radii(n);
        let mut palette = PALETTE.to_vec();
        palette.shuffle(&mut self.rng);
        radii
            .into_iter()
            .zip(palette)
            .map(|(radius, color)| Actor {
                kind: *self.cfg.shapes.choose(&mut self.rng).expect("validated non-empty"),
                radius,
                color,
                positions: Vec::new(),
            })
            .collect()
    }

    fn random_bouncing(&mut self, actor: &mut Actor) {
        let e = actor.extent();
        let size = self.size();
        let start = (self.rng.random_range(e..size - e), self.rng.random_range(e..size - e));
        let vel = self.velocity();
        bounce(&mut actor.positions, start, vel, e, size, self.cfg.frames);
    }

    /// First two actors meet at the middle frame, approaching from opposite sides.
    fn crossing_pair(&mut self, a: &mut Actor, b: &mut Actor) {
        let frames = self.cfg.frames;
        let meet = (frames / 2) as f64;
        let size = self.size();
        // Vertical offset keeps the rear instance partly visible at the meeting frame.
        let offset = 0.6 * a.extent().min(b.extent());
        let margin = a.extent().max(b.extent()) + offset + 1.0;
        // Keep both paths inside the frame for the whole sequence.
        let max_speed = ((size / 2.0 - margin) / meet.max(1.0)).max(0.1);
        let speed = self.speed().min(max_speed);
        let angle = self.rng.random_range(-0.4..0.4f64);
        let cx = size / 2.0 + self.rng.random_range(-2.0..2.0);
        let cy = size / 2.0 + self.rng.random_range(-2.0..2.0);
        let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
        a.positions = (0..frames)
            .map(|t| (cx + vx * (t as f64 - meet), cy + vy * (t as f64 - meet)))
            .collect();
        b.positions = (0..frames)
            .map(|t| (cx - vx * (t as f64 - meet), cy + offset + vy * (t as f64 - meet)))
            .collect();
    }

    /// Moves right, leaves the frame entirely for a few frames, comes back.
    fn exit_and_return(&mut self, a: &mut Actor) {
        let frames = self.cfg.frames;
        let size = self.size();
        let e = a.extent();
        let out_x = size + e + 1.0;
        let exit_frame = (frames / 3).max(1);
        let away = 2usize;
        let speed = ((out_x - (size - e - 2.0)) / exit_frame as f64)
            .max(self.cfg.min_speed)
            .max(1.0);
        let start_x = out_x - speed * exit_frame as f64;
        let y = self.rng.random_range(e..size - e);
        a.positions = (0..frames)
            .map(|t| {
                let x = if t <= exit_frame {
                    start_x + speed * t as f64
                } else if t <= exit_frame + away {
                    out_x
                } else {
                    out_x - speed * (t - exit_frame - away) as f64
                };
                (x, y)
            })
            .collect();
    }

    fn build(&mut self, id: String) -> VideoSequence {
        let cfg = self.cfg;
        let n = if cfg.crossing {
            self.rng.random_range(cfg.min_instances.max(2)..=cfg.max_instances)
        } else {
            self.rng.random_range(cfg.min_instances..=cfg.max_instances)
        };
        let mut actors = self.actors(n);
        let scripted = if cfg.crossing {
            let (a, rest) = actors.split_at_mut(1);
            self.crossing_pair(&mut a[0], &mut rest[0]);
            2
        } else if cfg.exit_return {
            self.exit_and_return(&mut actors[0]);
            1
        } else {
            0
        };
        for i in scripted..n {
            // Free actors avoid every earlier actor; only scripted pairs overlap.
            let mut placed = false;
            for _ in 0..200 {
                let mut candidate = actors[i].clone();
                self.random_bouncing(&mut candidate);
                let clash = actors[..i]
                    .iter()
                    .any(|other| (0..cfg.frames).any(|t| boxes_overlap(&candidate, other, t, 2.0)));
                if !clash {
                    actors[i] = candidate;
                    placed = true;
                    break;
                }
            }
            if !placed {
                actors.truncate(i);
                break;
            }
        }
        let background = self.background();
        let noise_seed = self.rng.random();
        render(cfg, &actors, id, background, noise_seed)
    }

    fn background(&self) -> Vec<[f64; 3]> {
        texture(
            self.cfg.size,
            self.cfg
                .background_seed
                .wrapping_mul(1_000_003)
                .wrapping_add(self.index as u64),
        )
    }
}

/// Smooth low-frequency colour field, mid-gray on average.
fn texture(size: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..4 * 3)
        .map(|_| {
            [
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(4.0..12.0),
            ]
        })
        .collect();
    let base: [f64; 3] = [
        rng.random_range(90.0..150.0),
        rng.random_range(90.0..150.0),
        rng.random_range(90.0..150.0),
    ];
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut px = base;
            for (c, v) in px.iter_mut().enumerate() {
                for w in &waves[c * 4..(c + 1) * 4] {
                    *v += w[3] * (w[0] * x as f64 + w[1] * y as f64 + w[2]).sin();
                }
            }
            out.push(px);
        }
    }
    out
}

fn render(
    cfg: &SyntheticConfig,
    actors: &[Actor],
    id: String,
    background: Vec<[f64; 3]>,
    noise_seed: u64,
) -> VideoSequence {
    let size = cfg.size;
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut rgb = Vec::with_capacity(size * size * 3);
        let mut labels = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // Later actors are drawn in front.
                let hit = actors.iter().enumerate().rev().find(|(_, a)| a.covers(t, px, py));
                let (color, label) = match hit {
                    Some((k, a)) => (a.color, (k + 1) as u8),
                    None => (background[y * size + x], 0),
                };
                for c in color {
                    let v = c + noise.random_range(-8.0..8.0);
                    rgb.push(v.round().clamp(0.0, 255.0) as u8);
                }
                labels.push(label);
            }
        }
        frames.push(RgbImage::new(size, size, rgb).expect("sized buffer"));
        masks.push(InstanceMask::new(size, size, labels).expect("sized buffer"));
    }
    VideoSequence {
        id,
        frames,
        first_mask: masks[0].clone(),
        ground_truth: Some(masks),
    }
}

/// Generates every sequence in memory, in index order.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Vec<(Split, VideoSequence)>> {
    cfg.validate()?;
    let n_train = cfg.sequences - cfg.val_sequences;
    Ok((0..cfg.sequences)
        .map(|i| {
            let mut seed = [0u8; 32];
            seed[..8].copy_from_slice(&cfg.seed.to_le_bytes());
            seed[8..16].copy_from_slice(&(i as u64).to_le_bytes());
            seed[16] = u8::from(cfg.crossing) | (u8::from(cfg.exit_return) << 1);
            let mut b = SequenceBuilder {
                cfg,
                index: i,
                rng: ChaCha8Rng::from_seed(seed),
            };
            let split = if i < n_train { Split::Train } else { Split::Val };
            (split, b.build(format!("seq{i:03}")))
        })
        .collect())
}
