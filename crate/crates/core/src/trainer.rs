//! Parent-model training, first-frame fine-tuning and sequence prediction.
//!
//! Every sample is a single-instance problem: the network sees the RGB frame
//! plus a guidance plane holding that instance's mask from the previous
//! frame, and predicts the instance's mask in the current frame. Training
//! uses ground-truth guidance; prediction feeds each instance's own
//! thresholded output forward.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::dataset::{RgbImage, VideoSequence};
use crate::error::{Error, Result};
use crate::isolation::{merge, BinaryMask, InstanceMask, ProbabilityMap};
use crate::losses::{dice_loss_raw, weighted_cross_entropy_raw, WeightMap};
use crate::network::Model;
use crate::tensor::Tensor;

/// Threshold applied to probabilities both for guidance and for merging.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Cross-entropy with foreground weighted by the per-sample
    /// background/foreground ratio.
    WeightedCe,
    Dice,
    /// Plain cross-entropy.
    Ce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::WeightedCe => "wce",
            LossKind::Dice => "dice",
            LossKind::Ce => "ce",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wce" | "weighted-ce" => Ok(LossKind::WeightedCe),
            "dice" => Ok(LossKind::Dice),
            "ce" | "unweighted-ce" => Ok(LossKind::Ce),
            other => Err(Error::invalid(format!(
                "unknown loss {other:?} (expected wce, dice or ce)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::invalid(format!(
                "unknown optimizer {other:?} (expected adam or sgd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub batch: usize,
    pub max_iters: usize,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub finetune_iters: usize,
    /// Learning rate for fine-tuning; `None` reuses `lr`.
    pub finetune_lr: Option<f64>,
    /// Validation losses are logged every `eval_every` iterations; 0 disables.
    pub eval_every: usize,
    /// Cap on validation samples per evaluation point; 0 means all.
    pub eval_samples: usize,
    pub shuffle: bool,
    /// Experimental negative control: one sample per frame with the raw
    /// label map as guidance and `label / N` as target.
    pub multilabel: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch: 4,
            max_iters: 2000,
            loss: LossKind::WeightedCe,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 1,
            finetune_iters: 100,
            finetune_lr: Some(5e-4),
            eval_every: 100,
            eval_samples: 64,
            shuffle: false,
            multilabel: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if let Some(lr) = self.finetune_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!(
                    "fine-tune learning rate must be positive, got {lr}"
                )));
            }
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::invalid(
                "adam betas must lie in [0, 1) and epsilon must be positive",
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "lr={}\nbatch={}\nmax_iters={}\nloss={}\noptimizer={}\nbeta1={}\nbeta2={}\neps={}\nhyper_seed={}\nfinetune_iters={}\nfinetune_lr={}\neval_every={}\neval_samples={}\nshuffle={}\nmultilabel={}\n",
            self.lr,
            self.batch,
            self.max_iters,
            self.loss,
            self.optimizer.as_str(),
            self.beta1,
            self.beta2,
            self.eps,
            self.seed,
            self.finetune_iters,
            self.finetune_lr.map_or_else(|| "none".to_string(), |v| v.to_string()),
            self.eval_every,
            self.eval_samples,
            self.shuffle,
            self.multilabel
        )
    }

    /// Reads the keys written by [`Hyperparams::to_kv`]; absent keys keep
    /// their defaults and unknown keys are ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let mut h = Self::default();
        fn parse<T: FromStr>(kv: &BTreeMap<&str, &str>, key: &str, slot: &mut T) -> Result<()> {
            if let Some(v) = kv.get(key) {
                *slot = v
                    .parse()
                    .map_err(|_| Error::invalid(format!("config value {key}={v:?} is malformed")))?;
            }
            Ok(())
        }
        parse(&kv, "lr", &mut h.lr)?;
        parse(&kv, "batch", &mut h.batch)?;
        parse(&kv, "max_iters", &mut h.max_iters)?;
        if let Some(v) = kv.get("loss") {
            h.loss = v.parse()?;
        }
        if let Some(v) = kv.get("optimizer") {
            h.optimizer = v.parse()?;
        }
        parse(&kv, "beta1", &mut h.beta1)?;
        parse(&kv, "beta2", &mut h.beta2)?;
        parse(&kv, "eps", &mut h.eps)?;
        parse(&kv, "hyper_seed", &mut h.seed)?;
        parse(&kv, "finetune_iters", &mut h.finetune_iters)?;
        if let Some(v) = kv.get("finetune_lr").filter(|v| **v != "none") {
            h.finetune_lr = Some(
                v.parse()
                    .map_err(|_| Error::invalid(format!("config value finetune_lr={v:?} is malformed")))?,
            );
        }
        parse(&kv, "eval_every", &mut h.eval_every)?;
        parse(&kv, "eval_samples", &mut h.eval_samples)?;
        parse(&kv, "shuffle", &mut h.shuffle)?;
        parse(&kv, "multilabel", &mut h.multilabel)?;
        h.validate()?;
        Ok(h)
    }
}

/// Per-parameter optimizer memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Applies one update in place. Non-finite gradients abort before any
/// parameter is touched.
pub fn optimizer_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    hyper: &Hyperparams,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("parameter {i} has {} entries, gradient {}", p.len(), g.len()),
            ));
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence {
                iteration: state.step as usize,
                detail: format!("non-finite gradient in parameter {i}"),
            });
        }
    }
    state.step += 1;
    match hyper.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (pi, gi) in p.iter_mut().zip(g.iter()) {
                    *pi -= lr * gi;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.len() != params.len() {
                state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                state.v = state.m.clone();
            }
            let (b1, b2) = (hyper.beta1, hyper.beta2);
            let t = state.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= lr * mhat / (vhat.sqrt() + hyper.eps);
                }
            }
        }
    }
    Ok(())
}

/// One network input `[4, H, W]` with its binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    /// Target values in `[0, 1]`, one per pixel.
    pub target: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl Sample {
    pub fn target_mask(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.target[y * self.width + x] >= 0.5)
    }
}

/// Builds the `[4, H, W]` input: RGB scaled to `[0, 1]` and one guidance plane.
pub fn frame_input(frame: &RgbImage, guidance: &[f64]) -> Result<Tensor> {
    let (h, w) = (frame.height, frame.width);
    if guidance.len() != h * w {
        return Err(Error::shape(
            "frame_input",
            format!("guidance has {} values for a {h}x{w} frame", guidance.len()),
        ));
    }
    let mut data = vec![0.0; 4 * h * w];
    for (i, px) in frame.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    data[3 * h * w..].copy_from_slice(guidance);
    Tensor::new(&[4, h, w], data)
}

fn ground_truth(seq: &VideoSequence) -> Result<&[InstanceMask]> {
    seq.ground_truth
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("sequence {} has no ground-truth series", seq.id)))
}

/// One sample per frame `t >= 1` and per instance of the first frame, in
/// frame-major order.
pub fn make_training_samples(seq: &VideoSequence) -> Result<Vec<Sample>> {
    let gt = ground_truth(seq)?;
    let (height, width) = seq.dims();
    let labels = seq.first_mask.present_labels();
    let mut out = Vec::with_capacity(labels.len() * seq.len().saturating_sub(1));
    for t in 1..seq.len() {
        for &k in &labels {
            let guidance = gt[t - 1].instance(k).to_f64();
            out.push(Sample {
                input: frame_input(&seq.frames[t], &guidance)?,
                target: gt[t].instance(k).to_f64(),
                height,
                width,
            });
        }
    }
    Ok(out)
}

/// Negative-control samples: raw integer labels of frame `t - 1` as
/// guidance and `label / N` of frame `t` as a multi-level target.
pub fn make_multilabel_samples(seq: &VideoSequence) -> Result<Vec<Sample>> {
    let gt = ground_truth(seq)?;
    let (height, width) = seq.dims();
    let n = seq.first_mask.max_label().max(1) as f64;
    (1..seq.len())
        .map(|t| {
            let guidance: Vec<f64> = gt[t - 1].labels().iter().map(|&l| l as f64).collect();
            Ok(Sample {
                input: frame_input(&seq.frames[t], &guidance)?,
                target: gt[t].labels().iter().map(|&l| l as f64 / n).collect(),
                height,
                width,
            })
        })
        .collect()
}

fn samples_for(seqs: &[VideoSequence], hyper: &Hyperparams) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in seqs {
        if hyper.multilabel {
            out.extend(make_multilabel_samples(s)?);
        } else {
            out.extend(make_training_samples(s)?);
        }
    }
    Ok(out)
}

/// Loss of one sample's probabilities under `kind`.
pub fn sample_loss(kind: LossKind, probs: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let lv = match kind {
        LossKind::WeightedCe => {
            let fg = target.iter().filter(|&&t| t >= 0.5).count();
            let bg = target.len() - fg;
            let ratio = if fg > 0 && bg > 0 { bg as f64 / fg as f64 } else { 1.0 };
            let w: Vec<f64> = target.iter().map(|&t| if t >= 0.5 { ratio } else { 1.0 }).collect();
            weighted_cross_entropy_raw(probs, target, &w)?
        }
        LossKind::Ce => weighted_cross_entropy_raw(probs, target, WeightMap::uniform(target.len()).values())?,
        LossKind::Dice => dice_loss_raw(probs, target)?,
    };
    Ok((lv.value, lv.grad))
}

/// Mean loss over a batch and the gradient of that mean w.r.t. the stacked
/// `[B, 1, H, W]` probabilities.
fn batch_loss(kind: LossKind, probs: &[f64], batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
    let b = batch.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    let mut offset = 0;
    for s in batch {
        let n = s.target.len();
        let (v, g) = sample_loss(kind, &probs[offset..offset + n], &s.target)?;
        total += v;
        grad.extend(g.into_iter().map(|x| x / b));
        offset += n;
    }
    Ok((total / b, grad))
}

/// Runs one forward/backward pass and one optimizer update; returns the
/// batch loss measured before the update.
fn train_step(
    model: &mut Model,
    batch: &[&Sample],
    kind: LossKind,
    state: &mut OptimizerState,
    hyper: &Hyperparams,
    lr: f64,
    iteration: usize,
) -> Result<f64> {
    let inputs: Vec<Tensor> = batch.iter().map(|s| s.input.clone()).collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::stack(&inputs)?);
    let out = model.forward_graph(&mut g, x, true)?;
    let (value, grad) = batch_loss(kind, g.value(out.probs).data(), batch)?;
    if !value.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: format!("training loss is {value}"),
        });
    }
    let root = g.loss(out.probs, value, grad)?;
    g.backward(root)?;
    let grads: Vec<Vec<f64>> = out
        .params
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect();
    drop(g);
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut param_refs: Vec<&mut [f64]> = model.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
    optimizer_step(&mut param_refs, &grad_refs, state, hyper, lr).map_err(|e| match e {
        Error::Divergence { detail, .. } => Error::Divergence { iteration, detail },
        e => e,
    })?;
    Ok(value)
}

/// Training-loss and validation-loss history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub train: Vec<(usize, f64)>,
    /// `(iteration, cross-entropy, dice)` on validation samples.
    pub val: Vec<(usize, f64, f64)>,
}

impl TrainLog {
    pub fn train_csv(&self) -> String {
        let mut s = String::from("iteration,train_loss\n");
        for (i, l) in &self.train {
            s.push_str(&format!("{i},{l:.17e}\n"));
        }
        s
    }

    pub fn val_csv(&self) -> String {
        let mut s = String::from("iteration,val_ce,val_dice\n");
        for (i, ce, d) in &self.val {
            s.push_str(&format!("{i},{ce:.17e},{d:.17e}\n"));
        }
        s
    }
}

/// Outcome of a training run. On divergence the model holds the last
/// parameters that produced a finite loss and `divergence` carries the cause.
#[derive(Debug)]
pub struct Trained {
    pub model: Model,
    pub log: TrainLog,
    pub divergence: Option<Error>,
}

/// Mean plain cross-entropy and dice over `samples`.
pub fn validation_losses(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("no validation samples"));
    }
    let mut ce = 0.0;
    let mut dice = 0.0;
    for s in samples {
        let probs = model.forward(&s.input.clone().reshape(&[1, 4, s.height, s.width])?)?;
        ce += sample_loss(LossKind::Ce, probs.data(), &s.target)?.0;
        dice += sample_loss(LossKind::Dice, probs.data(), &s.target)?.0;
    }
    let n = samples.len() as f64;
    Ok((ce / n, dice / n))
}

/// Trains `model` on every sample of `train` for `hyper.max_iters`
/// mini-batches. Samples are visited in a fixed order (reshuffled per epoch
/// when `hyper.shuffle`); validation losses are logged at a fixed cadence.
pub fn train_parent(
    mut model: Model,
    train: &[VideoSequence],
    val: &[VideoSequence],
    hyper: &Hyperparams,
) -> Result<Trained> {
    hyper.validate()?;
    if model.config().input_channels != 4 {
        return Err(Error::invalid(format!(
            "guidance training needs 4 input channels, model has {}",
            model.config().input_channels
        )));
    }
    let samples = samples_for(train, hyper)?;
    if samples.is_empty() {
        return Err(Error::invalid("training set yields no samples"));
    }
    let mut val_samples = samples_for(val, hyper)?;
    if hyper.eval_samples > 0 && val_samples.len() > hyper.eval_samples {
        // Evenly spaced subset keeps every validation sequence represented.
        let stride = val_samples.len() as f64 / hyper.eval_samples as f64;
        val_samples = (0..hyper.eval_samples)
            .map(|i| val_samples[(i as f64 * stride) as usize].clone())
            .collect();
    }
    info!(
        "training on {} samples ({} validation), {} iterations of batch {}",
        samples.len(),
        val_samples.len(),
        hyper.max_iters,
        hyper.batch
    );
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = 0;
    let mut state = OptimizerState::default();
    let mut log = TrainLog::default();
    let loss = if hyper.multilabel { LossKind::Ce } else { hyper.loss };
    let evaluate = |model: &Model, it: usize, log: &mut TrainLog| -> Result<()> {
        if !val_samples.is_empty() {
            let (ce, dice) = validation_losses(model, &val_samples)?;
            debug!("iteration {it}: val ce {ce:.5} dice {dice:.5}");
            log.val.push((it, ce, dice));
        }
        Ok(())
    };
    for it in 0..hyper.max_iters {
        if hyper.eval_every > 0 && it % hyper.eval_every == 0 {
            evaluate(&model, it, &mut log)?;
        }
        let mut batch = Vec::with_capacity(hyper.batch);
        for _ in 0..hyper.batch {
            if cursor == 0 && hyper.shuffle {
                order.shuffle(&mut rng);
            }
            batch.push(&samples[order[cursor]]);
            cursor = (cursor + 1) % samples.len();
        }
        match train_step(&mut model, &batch, loss, &mut state, hyper, hyper.lr, it) {
            Ok(v) => {
                if it % 50 == 0 {
                    debug!("iteration {it}: train loss {v:.5}");
                }
                log.train.push((it, v));
            }
            Err(e @ Error::Divergence { .. }) => {
                warn!("{e}; keeping the last finite parameters");
                return Ok(Trained {
                    model,
                    log,
                    divergence: Some(e),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if hyper.eval_every > 0 && hyper.max_iters > 0 {
        evaluate(&model, hyper.max_iters, &mut log)?;
    }
    Ok(Trained {
        model,
        log,
        divergence: None,
    })
}

/// The single first-frame sample for instance `label`.
pub fn first_frame_sample(frame: &RgbImage, mask: &InstanceMask, label: u8) -> Result<Sample> {
    if (frame.height, frame.width) != mask.dims() {
        return Err(Error::shape(
            "first_frame_sample",
            format!("frame {}x{} vs mask {:?}", frame.height, frame.width, mask.dims()),
        ));
    }
    let m = mask.instance(label);
    if m.is_empty() {
        return Err(Error::invalid(format!(
            "instance {label} is absent from the first frame"
        )));
    }
    let target = m.to_f64();
    Ok(Sample {
        input: frame_input(frame, &target)?,
        target,
        height: frame.height,
        width: frame.width,
    })
}

/// Copies `parent` and fits it to the first-frame sample of instance
/// `label` for `iterations` full-batch steps.
pub fn finetune(
    parent: &Model,
    frame: &RgbImage,
    mask: &InstanceMask,
    label: u8,
    iterations: usize,
    hyper: &Hyperparams,
) -> Result<Trained> {
    hyper.validate()?;
    let sample = first_frame_sample(frame, mask, label)?;
    let mut model = parent.clone();
    let mut state = OptimizerState::default();
    let mut log = TrainLog::default();
    let lr = hyper.finetune_lr.unwrap_or(hyper.lr);
    for it in 0..iterations {
        match train_step(&mut model, &[&sample], hyper.loss, &mut state, hyper, lr, it) {
            Ok(v) => log.train.push((it, v)),
            Err(e @ Error::Divergence { .. }) => {
                warn!("{e}; keeping the last finite parameters");
                return Ok(Trained {
                    model,
                    log,
                    divergence: Some(e),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Trained {
        model,
        log,
        divergence: None,
    })
}

/// Anything that maps a `[1, 4, H, W]` input to `H * W` probabilities.
pub trait Segmenter {
    fn segment(&self, input: &Tensor) -> Result<Vec<f64>>;
}

impl Segmenter for Model {
    fn segment(&self, input: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.into_data())
    }
}

impl<S: Segmenter + ?Sized> Segmenter for &S {
    fn segment(&self, input: &Tensor) -> Result<Vec<f64>> {
        (**self).segment(input)
    }
}

/// Predicts every frame of `seq`. `models[i]` tracks the `i`-th label of
/// the first-frame mask in ascending order. Frame 0 is the given mask.
pub fn predict_sequence<S: Segmenter>(models: &[S], seq: &VideoSequence) -> Result<Vec<InstanceMask>> {
    let labels = seq.first_mask.present_labels();
    if models.len() != labels.len() {
        return Err(Error::invalid(format!(
            "sequence {} has {} instances but {} models were given",
            seq.id,
            labels.len(),
            models.len()
        )));
    }
    let (h, w) = seq.dims();
    let mut out = vec![seq.first_mask.clone()];
    if labels.is_empty() {
        out.resize(seq.len(), seq.first_mask.clone());
        return Ok(out);
    }
    let mut guidance: Vec<Vec<f64>> = labels.iter().map(|&k| seq.first_mask.instance(k).to_f64()).collect();
    for t in 1..seq.len() {
        let mut maps = Vec::with_capacity(labels.len());
        for (model, g) in models.iter().zip(guidance.iter_mut()) {
            let input = frame_input(&seq.frames[t], g)?.reshape(&[1, 4, h, w])?;
            let probs = model.segment(&input)?;
            if probs.len() != h * w {
                return Err(Error::shape(
                    "predict_sequence",
                    format!("segmenter returned {} values for a {h}x{w} frame", probs.len()),
                ));
            }
            *g = probs
                .iter()
                .map(|&p| if p >= MASK_THRESHOLD { 1.0 } else { 0.0 })
                .collect();
            maps.push(ProbabilityMap::new(h, w, probs)?);
        }
        let merged = merge(&maps, MASK_THRESHOLD)?;
        // merge numbers instances 1..=N; map back to the annotation's labels.
        let mut relabeled = merged;
        for l in relabeled.labels_mut() {
            if *l > 0 {
                *l = labels[*l as usize - 1];
            }
        }
        out.push(relabeled);
    }
    Ok(out)
}

/// Negative-control prediction with one multi-label model: the previous
/// label map is the guidance and labels are decoded as `round(p * N)`.
pub fn predict_sequence_multilabel<S: Segmenter>(model: &S, seq: &VideoSequence) -> Result<Vec<InstanceMask>> {
    let (h, w) = seq.dims();
    let n = seq.first_mask.max_label().max(1) as f64;
    let mut out = vec![seq.first_mask.clone()];
    for t in 1..seq.len() {
        let guidance: Vec<f64> = out[t - 1].labels().iter().map(|&l| l as f64).collect();
        let input = frame_input(&seq.frames[t], &guidance)?.reshape(&[1, 4, h, w])?;
        let probs = model.segment(&input)?;
        let labels = probs.iter().map(|p| (p * n).round().clamp(0.0, n) as u8).collect();
        out.push(InstanceMask::new(h, w, labels)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, SyntheticConfig};
    use crate::isolation::isolate;
    use crate::network::{build, ModelConfig};

    fn hyper(opt: OptimizerKind, lr: f64) -> Hyperparams {
        Hyperparams {
            optimizer: opt,
            lr,
            ..Default::default()
        }
    }

    #[test]
    fn sgd_step_definition() {
        let mut p = [1.0];
        let mut state = OptimizerState::default();
        optimizer_step(
            &mut [&mut p[..]],
            &[&[2.0]],
            &mut state,
            &hyper(OptimizerKind::Sgd, 0.1),
            0.1,
        )
        .unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for scale in [1e-3, 1.0, 1e3] {
            let mut p = vec![0.5; 3];
            let g = vec![scale; 3];
            let mut state = OptimizerState::default();
            let h = hyper(OptimizerKind::Adam, 0.01);
            optimizer_step(&mut [&mut p[..]], &[&g], &mut state, &h, h.lr).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expected = 0.01 * scale / (scale + 1e-8);
            for v in p {
                assert!((0.5 - v - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for opt in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut p = vec![0.25, -3.0];
            let mut state = OptimizerState::default();
            let h = hyper(opt, 0.1);
            for _ in 0..3 {
                optimizer_step(&mut [&mut p[..]], &[&[0.0, 0.0]], &mut state, &h, h.lr).unwrap();
            }
            assert_eq!(p, vec![0.25, -3.0]);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = vec![1.0, 2.0];
        let mut state = OptimizerState::default();
        let h = hyper(OptimizerKind::Sgd, 0.1);
        let err = optimizer_step(&mut [&mut p[..]], &[&[1.0, f64::NAN]], &mut state, &h, h.lr).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(p, vec![1.0, 2.0]);
    }

    fn tiny_seq(instances: usize, frames: usize) -> VideoSequence {
        let cfg = SyntheticConfig {
            size: 32,
            sequences: 1,
            val_sequences: 0,
            frames,
            min_instances: instances,
            max_instances: instances,
            ..Default::default()
        };
        synthesize(&cfg).unwrap().remove(0).1
    }

    #[test]
    fn sample_count_and_guidance() {
        let seq = tiny_seq(2, 16);
        let samples = make_training_samples(&seq).unwrap();
        assert_eq!(samples.len(), 30);
        let gt = seq.ground_truth.as_ref().unwrap();
        let s = &samples[2 * 4 + 1]; // t = 5, second instance
        let expected = isolate(&gt[4]).unwrap()[1].to_f64();
        assert_eq!(&s.input.data()[3 * 32 * 32..], &expected[..]);
        assert_eq!(s.target, gt[5].instance(2).to_f64());
    }

    #[test]
    fn missing_ground_truth_rejected() {
        let mut seq = tiny_seq(1, 3);
        seq.ground_truth = None;
        assert!(make_training_samples(&seq).is_err());
    }

    struct Oracle;

    impl Segmenter for Oracle {
        fn segment(&self, input: &Tensor) -> Result<Vec<f64>> {
            let [_, _, h, w] = input.dims4("oracle")?;
            Ok(input.data()[3 * h * w..].to_vec())
        }
    }

    #[test]
    fn single_frame_prediction_is_the_annotation() {
        let seq = tiny_seq(2, 1);
        let out = predict_sequence(&[Oracle, Oracle], &seq).unwrap();
        assert_eq!(out, vec![seq.first_mask.clone()]);
    }

    #[test]
    fn oracle_on_static_scene_is_perfect() {
        let mut seq = tiny_seq(2, 5);
        let f0 = seq.frames[0].clone();
        seq.frames.iter_mut().for_each(|f| *f = f0.clone());
        seq.ground_truth = Some(vec![seq.first_mask.clone(); 5]);
        let out = predict_sequence(&[Oracle, Oracle], &seq).unwrap();
        assert_eq!(&out, seq.ground_truth.as_ref().unwrap());
    }

    #[test]
    fn zero_iteration_finetune_is_identity() {
        let seq = tiny_seq(1, 2);
        let parent = build(&ModelConfig::unet(&[4, 8])).unwrap();
        let before = parent.param_bytes();
        let out = finetune(&parent, &seq.frames[0], &seq.first_mask, 1, 0, &Hyperparams::default()).unwrap();
        assert_eq!(out.model.param_bytes(), before);
        assert!(finetune(&parent, &seq.frames[0], &seq.first_mask, 3, 1, &Hyperparams::default()).is_err());
    }

    #[test]
    fn finetune_reduces_first_frame_loss_and_leaves_parent() {
        let seq = tiny_seq(1, 2);
        let parent = build(&ModelConfig::unet(&[4, 8])).unwrap();
        let before = parent.param_bytes();
        let out = finetune(&parent, &seq.frames[0], &seq.first_mask, 1, 20, &Hyperparams::default()).unwrap();
        assert!(out.log.train.last().unwrap().1 < out.log.train[0].1);
        assert_eq!(parent.param_bytes(), before);
    }

    #[test]
    fn hyperparams_kv_round_trip() {
        let h = Hyperparams {
            lr: 4e-5,
            batch: 8,
            loss: LossKind::Dice,
            finetune_lr: Some(1e-4),
            shuffle: true,
            ..Default::default()
        };
        assert_eq!(Hyperparams::from_kv(&h.to_kv()).unwrap(), h);
    }
}
