//! Acceptance suite. Every test prints one `PASS` or `FAIL` line, then asserts.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unet_vos::dataset::{synthesize, Split, SyntheticConfig, VideoSequence};
use unet_vos::gradcheck;
use unet_vos::isolation::{isolate, merge, BinaryMask, InstanceMask};
use unet_vos::metrics::{
    boundary_f, default_tolerance, evaluate_dataset, region_similarity_j, EvalReport, SequenceMasks,
};
use unet_vos::network::{build, Model, ModelConfig};
use unet_vos::trainer::{finetune, predict_sequence, train_parent, Hyperparams, LossKind};

fn report(criterion: u32, name: &str, pass: bool, detail: &str) -> bool {
    let line = format!(
        "{} criterion {criterion:2} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    pass
}

fn toy_hyper(loss: LossKind) -> Hyperparams {
    Hyperparams {
        lr: 2e-3,
        batch: 4,
        max_iters: 2000,
        loss,
        shuffle: true,
        finetune_iters: 100,
        finetune_lr: Some(5e-4),
        eval_every: 500,
        ..Default::default()
    }
}

fn toy_filters() -> ModelConfig {
    ModelConfig::unet(&[8, 16, 32])
}

struct Splits {
    train: Vec<VideoSequence>,
    val: Vec<VideoSequence>,
}

fn splits(cfg: &SyntheticConfig) -> Splits {
    let data = synthesize(cfg).unwrap();
    let pick = |want: Split| {
        data.iter()
            .filter(|(s, _)| *s == want)
            .map(|(_, q)| q.clone())
            .collect()
    };
    Splits {
        train: pick(Split::Train),
        val: pick(Split::Val),
    }
}

fn default_data() -> &'static Splits {
    static DATA: OnceLock<Splits> = OnceLock::new();
    DATA.get_or_init(|| splits(&SyntheticConfig::default()))
}

struct Parent {
    model: Model,
    elapsed: Duration,
}

fn unet_parent() -> &'static Parent {
    static PARENT: OnceLock<Parent> = OnceLock::new();
    PARENT.get_or_init(|| {
        let d = default_data();
        let t0 = Instant::now();
        let out = train_parent(
            build(&toy_filters()).unwrap(),
            &d.train,
            &d.val,
            &toy_hyper(LossKind::WeightedCe),
        )
        .unwrap();
        assert!(out.divergence.is_none());
        Parent {
            model: out.model,
            elapsed: t0.elapsed(),
        }
    })
}

fn labels(seq: &VideoSequence) -> Vec<u8> {
    seq.first_mask.present_labels()
}

fn shared_predictions(model: &Model, val: &[VideoSequence]) -> Vec<SequenceMasks> {
    val.iter()
        .map(|s| SequenceMasks {
            id: s.id.clone(),
            predicted: predict_sequence(&vec![model.clone(); labels(s).len()], s).unwrap(),
            ground_truth: s.ground_truth.clone().unwrap(),
        })
        .collect()
}

fn evaluate(masks: &[SequenceMasks]) -> EvalReport {
    evaluate_dataset(masks, None).unwrap()
}

fn sequence_j(report: &EvalReport) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for i in &report.instances {
        let e = acc.entry(i.sequence.clone()).or_default();
        e.0 += i.j_mean;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[test]
fn criterion_01_gradient_suite() {
    let t0 = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..100 {
        for (name, check) in gradcheck::suite(seed).unwrap() {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(check.max_rel_error);
        }
    }
    let elapsed = t0.elapsed();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let cases = [
        "conv2d",
        "maxpool2d",
        "upsample_nearest",
        "transposed_conv2d",
        "crop_concat",
        "relu",
        "sigmoid",
        "weighted_ce",
        "dice",
        "unet",
    ];
    let covered = cases.iter().all(|c| worst.contains_key(c));
    let pass = max < 1e-4 && elapsed < Duration::from_secs(120) && covered;
    let detail = format!(
        "{} cases x 100 seeds, max rel error {max:.2e}, {:.1}s",
        worst.len(),
        elapsed.as_secs_f64()
    );
    assert!(report(1, "gradient suite", pass, &detail), "{worst:?}");
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    match rng.random_range(0..4) {
        0 => BinaryMask::empty(h, w),
        1 => {
            let p = rng.random_range(0.05..0.95);
            BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p))
        }
        _ => {
            let mut m = BinaryMask::empty(h, w);
            for _ in 0..rng.random_range(1..4) {
                let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        m.set(y, x, true);
                    }
                }
            }
            m
        }
    }
}

fn pixel_set(m: &BinaryMask) -> HashSet<(usize, usize)> {
    let mut s = HashSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                s.insert((y, x));
            }
        }
    }
    s
}

fn contour(m: &BinaryMask) -> Vec<(i64, i64)> {
    let set = pixel_set(m);
    let (h, w) = (m.height() as i64, m.width() as i64);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && set.contains(&(y as usize, x as usize));
    let mut out: Vec<(i64, i64)> = set
        .iter()
        .map(|&(y, x)| (y as i64, x as i64))
        .filter(|&(y, x)| {
            [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|(dy, dx)| !inside(y + dy, x + dx))
        })
        .collect();
    out.sort();
    out
}

fn matched(from: &[(i64, i64)], to: &[(i64, i64)], tol: f64) -> f64 {
    let hit = from
        .iter()
        .filter(|a| {
            to.iter().any(|b| {
                let (dy, dx) = ((a.0 - b.0) as f64, (a.1 - b.1) as f64);
                (dy * dy + dx * dx).sqrt() <= tol
            })
        })
        .count();
    hit as f64 / from.len() as f64
}

fn brute_f(m: &BinaryMask, g: &BinaryMask, tol: f64) -> f64 {
    let (mb, gb) = (contour(m), contour(g));
    match (mb.is_empty(), gb.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let (p, r) = (matched(&mb, &gb, tol), matched(&gb, &mb, tol));
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    }
}

#[test]
fn criterion_02_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tol = default_tolerance(16, 16);
    let (mut j_bad, mut f_err) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let m = random_mask(&mut rng, 16, 16);
        let g = random_mask(&mut rng, 16, 16);
        let (ms, gs) = (pixel_set(&m), pixel_set(&g));
        let union = ms.union(&gs).count();
        let oracle_j = if union == 0 {
            1.0
        } else {
            ms.intersection(&gs).count() as f64 / union as f64
        };
        if region_similarity_j(&m, &g).unwrap() != oracle_j {
            j_bad += 1;
        }
        for t in [tol, 2.5] {
            f_err = f_err.max((boundary_f(&m, &g, t).unwrap().f - brute_f(&m, &g, t)).abs());
        }
    }
    let empty = BinaryMask::empty(16, 16);
    let full = BinaryMask::from_fn(16, 16, |y, x| (4..9).contains(&y) && (3..12).contains(&x));
    let edges = region_similarity_j(&empty, &empty).unwrap() == 1.0
        && boundary_f(&empty, &empty, tol).unwrap().f == 1.0
        && region_similarity_j(&empty, &full).unwrap() == 0.0
        && boundary_f(&empty, &full, tol).unwrap().f == 0.0
        && region_similarity_j(&full, &empty).unwrap() == 0.0
        && boundary_f(&full, &empty, tol).unwrap().f == 0.0;
    let pass = j_bad == 0 && f_err <= 1e-12 && edges;
    let detail = format!("1000 pairs, J mismatches {j_bad}, max |F - brute| {f_err:.1e}, edge cases ok {edges}");
    assert!(report(2, "metric oracles", pass, &detail));
}

#[test]
fn criterion_03_isolation_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0usize;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let n = rng.random_range(1..=5u8);
        let mut labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..=n)).collect();
        let at = rng.random_range(0..h * w);
        labels[at] = rng.random_range(1..=n);
        let m = InstanceMask::new(h, w, labels).unwrap();
        let probs: Vec<_> = isolate(&m).unwrap().iter().map(|b| b.to_probabilities()).collect();
        if merge(&probs, 0.5).unwrap() != m {
            failures += 1;
        }
    }
    assert!(report(
        3,
        "isolation round trip",
        failures == 0,
        &format!("1000 masks, {failures} mismatches")
    ));
}

#[test]
fn criterion_04_toy_training() {
    let d = default_data();
    let parent = unet_parent();
    let r = evaluate(&shared_predictions(&parent.model, &d.val));
    let minutes = parent.elapsed.as_secs_f64() / 60.0;
    let pass = r.j_mean >= 0.70 && r.f_mean >= 0.50 && minutes <= 15.0;
    let detail = format!(
        "U-Net [8,16,32], 2000 iterations: J {:.4} F {:.4}, {minutes:.1} min",
        r.j_mean, r.f_mean
    );
    assert!(report(4, "toy training", pass, &detail));
}

#[test]
fn criterion_05_segnet_ordering() {
    let d = default_data();
    let unet = evaluate(&shared_predictions(&unet_parent().model, &d.val));
    let cfg = ModelConfig::segnet(&[8, 16, 32]);
    let segnet = train_parent(build(&cfg).unwrap(), &d.train, &d.val, &toy_hyper(LossKind::WeightedCe)).unwrap();
    let seg = evaluate(&shared_predictions(&segnet.model, &d.val));
    let pass = seg.f_mean < unet.f_mean && seg.j_mean <= unet.j_mean;
    let detail = format!(
        "SegNet J {:.4} F {:.4} vs U-Net J {:.4} F {:.4}",
        seg.j_mean, seg.f_mean, unet.j_mean, unet.f_mean
    );
    assert!(report(5, "SegNet ordering", pass, &detail));
}

fn sparse_config() -> SyntheticConfig {
    SyntheticConfig {
        min_instances: 1,
        max_instances: 1,
        min_foreground: 0.005,
        max_foreground: 0.02,
        ..Default::default()
    }
}

fn foreground_fraction(masks: &[SequenceMasks]) -> f64 {
    let (mut fg, mut total) = (0usize, 0usize);
    for s in masks {
        for m in &s.predicted[1..] {
            fg += m.foreground_count();
            total += m.labels().len();
        }
    }
    fg as f64 / total as f64
}

#[test]
fn criterion_06_unweighted_collapse() {
    let d = splits(&sparse_config());
    let gt_fg = d
        .train
        .iter()
        .chain(&d.val)
        .flat_map(|s| s.ground_truth.as_ref().unwrap())
        .map(|m| m.foreground_count() as f64 / m.labels().len() as f64)
        .fold(0.0, f64::max);
    let run = |loss| {
        let out = train_parent(build(&toy_filters()).unwrap(), &d.train, &d.val, &toy_hyper(loss)).unwrap();
        shared_predictions(&out.model, &d.val)
    };
    let ce = run(LossKind::Ce);
    let wce = run(LossKind::WeightedCe);
    let ce_fg = foreground_fraction(&ce);
    let (ce_j, wce_j) = (evaluate(&ce).j_mean, evaluate(&wce).j_mean);
    let pass = gt_fg <= 0.02 && ce_fg < 0.005 && wce_j > 0.5;
    let detail = format!(
        "max gt foreground {:.2}%, unweighted predicts {:.2}% foreground (J {ce_j:.4}), weighted J {wce_j:.4}",
        100.0 * gt_fg,
        100.0 * ce_fg
    );
    assert!(report(6, "unweighted CE collapse", pass, &detail));
}

#[test]
fn criterion_07_finetune_benefit() {
    let d = default_data();
    let parent = unet_parent();
    let hyper = toy_hyper(LossKind::WeightedCe);
    let base = evaluate(&shared_predictions(&parent.model, &d.val));
    let tuned_masks: Vec<SequenceMasks> = d
        .val
        .iter()
        .map(|s| {
            let models: Vec<Model> = labels(s)
                .iter()
                .map(|&k| {
                    finetune(&parent.model, &s.frames[0], &s.first_mask, k, 100, &hyper)
                        .unwrap()
                        .model
                })
                .collect();
            SequenceMasks {
                id: s.id.clone(),
                predicted: predict_sequence(&models, s).unwrap(),
                ground_truth: s.ground_truth.clone().unwrap(),
            }
        })
        .collect();
    let tuned = evaluate(&tuned_masks);
    let (before, after) = (sequence_j(&base), sequence_j(&tuned));
    let improved = before.iter().filter(|(k, j)| after[*k] > **j).count();
    let pass = tuned.j_mean >= base.j_mean && 2 * improved >= before.len();
    let detail = format!(
        "J {:.4} -> {:.4}, improved on {improved}/{} sequences",
        base.j_mean,
        tuned.j_mean,
        before.len()
    );
    assert!(report(7, "fine-tune benefit", pass, &detail));
}

/// Closed-form parameter tally of the U-Net: two 3x3 convolutions per level,
/// a doubled bottleneck, a 2x2 channel-halving convolution after each
/// upsampling, and a 1x1 head.
fn unet_tally(filters: &[usize], input: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let mut total = 0;
    let mut prev = input;
    for &f in filters {
        total += conv(prev, f, 3) + conv(f, f, 3);
        prev = f;
    }
    let b = 2 * prev;
    total += conv(prev, b, 3) + conv(b, b, 3);
    let mut below = b;
    for &f in filters.iter().rev() {
        total += conv(below, f, 2) + conv(2 * f, f, 3) + conv(f, f, 3);
        below = f;
    }
    total + conv(filters[0], 1, 1)
}

#[test]
fn criterion_08_parameter_counts() {
    let mut pass = true;
    let mut parts = Vec::new();
    for (filters, lo, hi) in [
        (&[64, 128, 256, 512][..], 28_000_000, 34_000_000),
        (&[16, 32, 64][..], 500_000, 900_000),
    ] {
        let count = build(&ModelConfig::unet(filters)).unwrap().param_count();
        let tally = unet_tally(filters, 4);
        let ok = count == tally && (lo..=hi).contains(&count);
        pass &= ok;
        parts.push(format!(
            "{filters:?} -> {count} (tally {tally}, range [{lo}, {hi}] {})",
            if ok { "ok" } else { "out" }
        ));
    }
    assert!(report(8, "parameter counts", pass, &parts.join("; ")));
}

fn frame_j(pred: &InstanceMask, gt: &InstanceMask, k: u8) -> f64 {
    region_similarity_j(&pred.instance(k), &gt.instance(k)).unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_09_failure_probes() {
    let model = &unet_parent().model;
    let probe = |cfg: SyntheticConfig| {
        let data = synthesize(&cfg).unwrap();
        data.into_iter()
            .map(|(_, s)| {
                let pred = predict_sequence(&vec![model.clone(); labels(&s).len()], &s).unwrap();
                (s, pred)
            })
            .collect::<Vec<_>>()
    };

    // Occlusion frames: the rear instance of the crossing pair is visibly
    // smaller than its unoccluded area.
    let crossing = probe(SyntheticConfig {
        crossing: true,
        min_instances: 2,
        max_instances: 2,
        sequences: 6,
        val_sequences: 1,
        seed: 9,
        ..Default::default()
    });
    let (mut pre, mut during) = (Vec::new(), Vec::new());
    for (s, pred) in &crossing {
        let gt = s.ground_truth.as_ref().unwrap();
        for k in [1u8, 2] {
            let area: Vec<usize> = gt.iter().map(|m| m.instance(k).count()).collect();
            let full = *area.iter().max().unwrap();
            let occluded: Vec<usize> = (1..gt.len())
                .filter(|&t| (area[t] as f64) < 0.9 * full as f64)
                .collect();
            let Some(&start) = occluded.first() else { continue };
            pre.extend((1..start).map(|t| frame_j(&pred[t], &gt[t], k)));
            during.extend(occluded.iter().map(|&t| frame_j(&pred[t], &gt[t], k)));
        }
    }
    let crossing_ok = !pre.is_empty() && !during.is_empty() && mean(&during) < mean(&pre);

    // Exit and return: frames before the instance has fully left, and frames
    // after it reappears.
    let exits = probe(SyntheticConfig {
        exit_return: true,
        sequences: 6,
        val_sequences: 1,
        seed: 9,
        ..Default::default()
    });
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for (s, pred) in &exits {
        let gt = s.ground_truth.as_ref().unwrap();
        let area: Vec<usize> = gt.iter().map(|m| m.instance(1).count()).collect();
        let Some(gone) = area.iter().position(|&a| a == 0) else {
            continue;
        };
        let Some(back) = (gone..area.len()).find(|&t| area[t] > 0) else {
            continue;
        };
        before.extend((1..gone).map(|t| frame_j(&pred[t], &gt[t], 1)));
        after.extend((back..area.len()).map(|t| frame_j(&pred[t], &gt[t], 1)));
    }
    let exit_ok = !before.is_empty() && !after.is_empty() && mean(&after) < mean(&before);

    let detail = format!(
        "crossing: pre-occlusion J {:.4} vs occluded J {:.4}; exit-return: pre-exit J {:.4} vs post-return J {:.4}",
        mean(&pre),
        mean(&during),
        mean(&before),
        mean(&after)
    );
    assert!(report(9, "failure-mode probes", crossing_ok && exit_ok, &detail));
}

fn cli(args: &[&str]) {
    let argv: Vec<String> = std::iter::once("unet-vos")
        .chain(args.iter().copied())
        .map(String::from)
        .collect();
    assert_eq!(unet_vos::cli::run(argv), 0, "{args:?}");
}

fn pipeline(root: &Path) {
    let p = |sub: &str| root.join(sub).to_str().unwrap().to_string();
    cli(&[
        "gen-data",
        "--seed",
        "5",
        "--out",
        &p("data"),
        "--sequences",
        "3",
        "--val",
        "1",
        "--frames",
        "4",
        "--size",
        "32",
    ]);
    cli(&[
        "train",
        "--data",
        &p("data"),
        "--out",
        &p("train"),
        "--filters",
        "2,4",
        "--iters",
        "6",
        "--batch",
        "2",
        "--eval-every",
        "3",
        "--seed",
        "3",
    ]);
    cli(&[
        "finetune",
        "--model",
        &p("train"),
        "--sequence",
        &p("data/val/seq002"),
        "--iters",
        "3",
        "--out",
        &p("finetune"),
    ]);
    cli(&[
        "predict",
        "--models",
        &p("finetune"),
        "--sequence",
        &p("data/val/seq002"),
        "--out",
        &p("pred"),
    ]);
    cli(&[
        "eval",
        "--pred",
        &p("pred"),
        "--gt",
        &p("data/val"),
        "--out",
        &p("eval"),
    ]);
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                // Run configs record their own paths.
                let text = String::from_utf8_lossy(&bytes).replace(root.to_str().unwrap(), "<root>");
                let bytes = if path.ends_with("config.txt") {
                    text.into_bytes()
                } else {
                    bytes
                };
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

#[test]
fn criterion_10_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<_> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();
    let kinds = [
        "model.ckpt",
        "train_log.csv",
        "instance_001.ckpt",
        "annotations",
        "report.txt",
        "frames.csv",
    ];
    let covered = kinds.iter().all(|k| fa.keys().any(|p| p.to_string_lossy().contains(k)));
    let pass = fa.keys().eq(fb.keys()) && differing.is_empty() && covered;
    let detail = format!("{} files compared, {} differ", fa.len(), differing.len());
    assert!(report(10, "determinism", pass, &detail), "{differing:?}");
}
