//! Finite-difference verification of the backward rules.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{dice_loss_raw, weighted_cross_entropy_raw};
use crate::network::{build, ModelConfig};
use crate::tensor::Tensor;

/// Step used by the suite.
pub const SUITE_EPS: f64 = 1e-5;

/// Tolerance every suite case must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Floor on the denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates compared against central differences.
    pub coordinates: usize,
    /// Coordinates whose perturbation crossed a ReLU or max-pool branch
    /// point; a central difference is not a derivative estimate there.
    pub kinks: usize,
}

/// Compares the tape's gradients of a scalar-valued closure against central
/// differences with step `eps`, over every coordinate of every input.
///
/// The closure receives the inputs registered as trainable leaves and must
/// return a scalar node. Coordinates whose `±eps` probes land on a different
/// piece of a piecewise-smooth function are counted in `kinks` and excluded
/// from the maximum.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::shape(
                "grad_check",
                format!("closure must return a scalar, got {:?}", g.value(out).shape()),
            ));
        }
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| g.grad(*v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();

    let pattern = g.branch_pattern();
    let probe_eval = |xs: &[Tensor]| -> Result<(f64, bool)> {
        let (g, _, out) = eval(xs)?;
        Ok((g.value(out).data()[0], g.branch_pattern() == pattern))
    };

    let mut worst: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut coordinates = 0;
    let mut kinks = 0;
    let mut probe = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let (up, same_up) = probe_eval(&probe)?;
            probe[t].data_mut()[i] = orig - eps;
            let (down, same_down) = probe_eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            if !(same_up && same_down) {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
            max_abs = max_abs.max((a - numeric).abs());
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        max_abs_error: max_abs,
        coordinates,
        kinks,
    })
}

/// Names of the cases run by [`suite`], in order.
pub const SUITE_CASES: [&str; 11] = [
    "conv2d",
    "conv2d_stride2",
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

/// Values with pairwise gaps of at least `1 / n`, so no max-pool window
/// holds a near tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (i as f64 + rng.random_range(0.0..0.5)) / n as f64 * 2.0 - 1.0)
        .collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("sized")
}

/// Uniform magnitudes in `[0.1, 1]` with random signs.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("sized")
}

fn binary(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t: Vec<f64> = (0..len).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
    t[0] = 1.0;
    t[len - 1] = 0.0;
    t
}

fn projected<F>(f: F, inputs: Vec<Tensor>, out_shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coeffs = Tensor::uniform(&out_shape, -1.0, 1.0, rng);
    grad_check(
        |g, v| {
            let y = f(g, v)?;
            g.project(y, &coeffs)
        },
        &inputs,
        SUITE_EPS,
    )
}

/// Runs one case of the suite for `seed`.
pub fn suite_case(name: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let r = &mut rng;
    match name {
        "conv2d" => {
            let x = Tensor::uniform(&[2, 2, 5, 5], -1.0, 1.0, r);
            let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, r);
            let b = Tensor::uniform(&[3], -1.0, 1.0, r);
            projected(
                |g, v| g.conv2d(v[0], v[1], v[2], 1, 1),
                vec![x, w, b],
                vec![2, 3, 5, 5],
                r,
            )
        }
        "conv2d_stride2" => {
            let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, r);
            let w = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, r);
            let b = Tensor::uniform(&[2], -1.0, 1.0, r);
            projected(
                |g, v| g.conv2d(v[0], v[1], v[2], 2, 1),
                vec![x, w, b],
                vec![1, 2, 3, 3],
                r,
            )
        }
        "maxpool2d" => {
            let x = distinct(&[2, 2, 4, 6], r);
            projected(|g, v| g.maxpool2d(v[0], 2, 2), vec![x], vec![2, 2, 2, 3], r)
        }
        "upsample_nearest" => {
            let x = Tensor::uniform(&[1, 2, 3, 2], -1.0, 1.0, r);
            projected(|g, v| g.upsample_nearest(v[0], 2), vec![x], vec![1, 2, 6, 4], r)
        }
        "transposed_conv2d" => {
            let x = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, r);
            let w = Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, r);
            let b = Tensor::uniform(&[3], -1.0, 1.0, r);
            projected(
                |g, v| g.transposed_conv2d(v[0], v[1], v[2], 2),
                vec![x, w, b],
                vec![1, 3, 6, 6],
                r,
            )
        }
        "crop_concat" => {
            let skip = Tensor::uniform(&[1, 2, 7, 6], -1.0, 1.0, r);
            let up = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, r);
            projected(|g, v| g.crop_concat(v[0], v[1]), vec![skip, up], vec![1, 5, 4, 4], r)
        }
        "relu" => {
            let x = away_from_zero(&[1, 2, 3, 3], r);
            projected(|g, v| Ok(g.relu(v[0])), vec![x], vec![1, 2, 3, 3], r)
        }
        "sigmoid" => {
            let x = Tensor::uniform(&[1, 2, 3, 3], -4.0, 4.0, r);
            projected(|g, v| Ok(g.sigmoid(v[0])), vec![x], vec![1, 2, 3, 3], r)
        }
        "weighted_ce" => {
            let x = Tensor::uniform(&[1, 1, 4, 4], -3.0, 3.0, r);
            let t = binary(16, r);
            let fg = t.iter().sum::<f64>();
            let w: Vec<f64> = t
                .iter()
                .map(|&v| if v > 0.5 { (16.0 - fg) / fg } else { 1.0 })
                .collect();
            grad_check(
                |g, v| {
                    let p = g.sigmoid(v[0]);
                    let lv = weighted_cross_entropy_raw(g.value(p).data(), &t, &w)?;
                    g.loss(p, lv.value, lv.grad)
                },
                &[x],
                SUITE_EPS,
            )
        }
        "dice" => {
            let x = Tensor::uniform(&[1, 1, 4, 4], -3.0, 3.0, r);
            let t = binary(16, r);
            grad_check(
                |g, v| {
                    let p = g.sigmoid(v[0]);
                    let lv = dice_loss_raw(g.value(p).data(), &t)?;
                    g.loss(p, lv.value, lv.grad)
                },
                &[x],
                SUITE_EPS,
            )
        }
        "unet" => {
            // Wider or deeper nets carry gradients near 1e-8 whose central
            // differences sit at the f64 rounding floor for eps = 1e-5.
            let config = ModelConfig {
                convs_per_level: 1,
                ..ModelConfig::unet(&[1])
            };
            let model = build(&config.with_seed(seed))?;
            let x = Tensor::uniform(&[1, 4, 8, 8], 0.0, 1.0, r);
            let t = binary(64, r);
            let mut inputs = vec![x];
            inputs.extend(model.params().iter().map(|p| p.tensor.clone()));
            grad_check(
                |g, v| {
                    let out = model.forward_graph_with(g, v[0], v[1..].to_vec())?;
                    let lv = weighted_cross_entropy_raw(g.value(out.probs).data(), &t, &vec![1.0; 64])?;
                    g.loss(out.probs, lv.value, lv.grad)
                },
                &inputs,
                SUITE_EPS,
            )
        }
        other => Err(Error::invalid(format!("unknown gradient-check case {other:?}"))),
    }
}

/// Every case of the suite for one seed.
pub fn suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    SUITE_CASES.iter().map(|&n| Ok((n, suite_case(n, seed)?))).collect()
}
