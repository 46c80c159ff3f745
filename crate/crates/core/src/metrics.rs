//! Region similarity (J) and boundary accuracy (F), aggregated over
//! sequences and instances.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::isolation::{BinaryMask, InstanceMask};

/// Scores of one instance in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub j: f64,
    pub f: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Boundary precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Contour pixels of a binary mask.
pub type BoundaryMap = BinaryMask;

fn same_dims(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_similarity_j(m: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    same_dims("region_similarity_j", m, g)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in m.bits().iter().zip(g.bits()) {
        inter += usize::from(a & b);
        union += usize::from(a | b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour outside the mask or on the image edge.
pub fn extract_boundary(mask: &BinaryMask) -> BoundaryMap {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |y, x| {
        mask.get(y, x)
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1))
    })
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    // Skip leading infinite samples; they contribute no parabola.
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let parabola = |p: usize| f[p] + (p * p) as f64;
        let mut s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// of `sites`; infinite everywhere when `sites` is empty.
pub fn squared_distance_transform(sites: &BinaryMask) -> Vec<f64> {
    let (h, w) = sites.dims();
    let n = h.max(w);
    let mut grid: Vec<f64> = sites
        .bits()
        .iter()
        .map(|&b| if b != 0 { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn matched_fraction(from: &BoundaryMap, to_dist: &[f64], tol_sq: f64) -> f64 {
    let total = from.count();
    let hit = from
        .bits()
        .iter()
        .zip(to_dist)
        .filter(|(&b, &d)| b != 0 && d <= tol_sq)
        .count();
    hit as f64 / total as f64
}

/// Boundary precision/recall within `tolerance` pixels (Euclidean) and their
/// harmonic mean.
pub fn boundary_f(m: &BinaryMask, g: &BinaryMask, tolerance: f64) -> Result<BoundaryScore> {
    same_dims("boundary_f", m, g)?;
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::invalid(format!(
            "tolerance must be non-negative, got {tolerance}"
        )));
    }
    let mb = extract_boundary(m);
    let gb = extract_boundary(g);
    match (mb.is_empty(), gb.is_empty()) {
        (true, true) => {
            return Ok(BoundaryScore {
                precision: 1.0,
                recall: 1.0,
                f: 1.0,
            })
        }
        (true, false) | (false, true) => {
            return Ok(BoundaryScore {
                precision: 0.0,
                recall: 0.0,
                f: 0.0,
            })
        }
        _ => {}
    }
    let tol_sq = tolerance * tolerance;
    let precision = matched_fraction(&mb, &squared_distance_transform(&gb), tol_sq);
    let recall = matched_fraction(&gb, &squared_distance_transform(&mb), tol_sq);
    Ok(BoundaryScore {
        precision,
        recall,
        f: harmonic_f(precision, recall),
    })
}

pub fn harmonic_f(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `ceil(0.8%` of the image diagonal`)`.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil()
}

pub fn frame_score(m: &BinaryMask, g: &BinaryMask, tolerance: f64) -> Result<FrameScore> {
    let j = region_similarity_j(m, g)?;
    let b = boundary_f(m, g, tolerance)?;
    Ok(FrameScore {
        j,
        f: b.f,
        precision: b.precision,
        recall: b.recall,
    })
}

/// Predicted and ground-truth mask series of one sequence.
#[derive(Debug, Clone)]
pub struct SequenceMasks {
    pub id: String,
    pub predicted: Vec<InstanceMask>,
    pub ground_truth: Vec<InstanceMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceReport {
    pub sequence: String,
    pub instance: u8,
    /// Scores for frames `1..T` (the annotated frame 0 is excluded).
    pub frames: Vec<FrameScore>,
    pub j_mean: f64,
    pub f_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub instances: Vec<InstanceReport>,
    pub j_mean: f64,
    pub f_mean: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Scores every instance of the first ground-truth frame over frames `1..T`.
/// Global means are unweighted over sequence-instance pairs.
pub fn evaluate_dataset(sequences: &[SequenceMasks], tolerance: Option<f64>) -> Result<EvalReport> {
    let mut instances = Vec::new();
    for seq in sequences {
        if seq.predicted.len() != seq.ground_truth.len() {
            return Err(Error::invalid(format!(
                "sequence {}: {} predicted frames vs {} ground-truth frames",
                seq.id,
                seq.predicted.len(),
                seq.ground_truth.len()
            )));
        }
        if seq.ground_truth.len() < 2 {
            return Err(Error::invalid(format!(
                "sequence {}: nothing to score after the annotated first frame",
                seq.id
            )));
        }
        let (h, w) = seq.ground_truth[0].dims();
        let tol = tolerance.unwrap_or_else(|| default_tolerance(h, w));
        for k in seq.ground_truth[0].present_labels() {
            let frames = seq.predicted[1..]
                .iter()
                .zip(&seq.ground_truth[1..])
                .map(|(p, g)| frame_score(&p.instance(k), &g.instance(k), tol))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::invalid(format!("sequence {}: {e}", seq.id)))?;
            instances.push(InstanceReport {
                sequence: seq.id.clone(),
                instance: k,
                j_mean: mean(frames.iter().map(|s| s.j)),
                f_mean: mean(frames.iter().map(|s| s.f)),
                frames,
            });
        }
    }
    if instances.is_empty() {
        return Err(Error::invalid("no annotated instances to evaluate"));
    }
    Ok(EvalReport {
        j_mean: mean(instances.iter().map(|i| i.j_mean)),
        f_mean: mean(instances.iter().map(|i| i.f_mean)),
        instances,
    })
}

impl EvalReport {
    /// One `key=value` record per sequence-instance plus a `global` trailer.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.instances {
            writeln!(
                s,
                "sequence={} instance={} frames={} j_mean={:.6} f_mean={:.6}",
                r.sequence,
                r.instance,
                r.frames.len(),
                r.j_mean,
                r.f_mean
            )
            .unwrap();
        }
        writeln!(
            s,
            "global pairs={} j_mean={:.6} f_mean={:.6}",
            self.instances.len(),
            self.j_mean,
            self.f_mean
        )
        .unwrap();
        s
    }

    /// Per-frame scores; `frame` is the absolute frame index.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,instance,frame,j,f,precision,recall\n");
        for r in &self.instances {
            for (i, fs) in r.frames.iter().enumerate() {
                writeln!(
                    s,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                    r.sequence,
                    r.instance,
                    i + 1,
                    fs.j,
                    fs.f,
                    fs.precision,
                    fs.recall
                )
                .unwrap();
            }
        }
        s
    }
}
