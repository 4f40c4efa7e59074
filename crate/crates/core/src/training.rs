//! Optimizers, cosine schedule, augmentation, metrics, and the epoch loop.
//!
//! The loop is seed-deterministic: shuffling and augmentation draw from one
//! sequential generator, and the per-cloud forward/backward passes fan out
//! over a thread pool but merge in input order, so identical seeds yield
//! bit-identical records on any worker count.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::model::{
    forward_logits, gradients, mount, param_init, ModelConfig, ModelError, ModelParams, Task,
};
use crate::points::PointCloud;
use crate::synth::{gen_scenes, gen_shapes, LabeledCloud, SynthError};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Per-parameter optimizer slots, aligned with the model's `for_each`
/// traversal order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> OptimizerState {
        let mut shapes = Vec::new();
        params.for_each(&mut |_, t| shapes.push(t.shape().to_vec()));
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        OptimizerState {
            kind,
            step: 0,
            second: if kind == OptimizerKind::AdamW {
                zeros.clone()
            } else {
                Vec::new()
            },
            first: zeros,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor],
        lr: f64,
        cfg: &OptimizerConfig,
    ) {
        match self.kind {
            OptimizerKind::SgdMomentum => sgd_step(params, grads, self, lr, cfg),
            OptimizerKind::AdamW => adamw_step(params, grads, self, lr, cfg),
        }
    }
}

/// Cosine annealing: `lr0 · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `g ← g + wd·θ; v ← μ·v + g; θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &OptimizerConfig,
) {
    state.step += 1;
    let mut i = 0;
    params.for_each_mut(&mut |_, t| {
        let v = state.first[i].data_mut();
        let g = grads[i].data();
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            let grad = g[j] + cfg.weight_decay * *p;
            v[j] = cfg.momentum * v[j] + grad;
            *p -= lr * v[j];
        }
        i += 1;
    });
}

/// AdamW with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &OptimizerConfig,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let mut i = 0;
    params.for_each_mut(&mut |_, tensor| {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let g = grads[i].data();
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            *p *= 1.0 - lr * cfg.weight_decay;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        i += 1;
    });
}

/// Applies the given per-axis scales then the translation; labels and
/// features are untouched.
pub fn augment_with(cloud: &PointCloud, scales: [f64; 3], shift: [f64; 3]) -> PointCloud {
    let coords = cloud
        .coords
        .iter()
        .map(|p| {
            [
                p[0] * scales[0] + shift[0],
                p[1] * scales[1] + shift[1],
                p[2] * scales[2] + shift[2],
            ]
        })
        .collect();
    PointCloud {
        coords,
        features: cloud.features.clone(),
        labels: cloud.labels.clone(),
    }
}

/// Random anisotropic scaling in [0.67, 1.5] followed by a random
/// translation in [−0.2, 0.2], drawn per axis.
pub fn augment(cloud: &PointCloud, rng: &mut impl Rng) -> PointCloud {
    let scales = [
        rng.gen_range(0.67..=1.5),
        rng.gen_range(0.67..=1.5),
        rng.gen_range(0.67..=1.5),
    ];
    let shift = [
        rng.gen_range(-0.2..=0.2),
        rng.gen_range(-0.2..=0.2),
        rng.gen_range(-0.2..=0.2),
    ];
    augment_with(cloud, scales, shift)
}

// ── metrics ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub macc: f64,
    pub miou: Option<f64>,
}

/// Confusion-matrix metrics. `truth[i]` indexes the matrix row,
/// `predictions[i]` the column.
fn confusion_metrics(predictions: &[usize], truth: &[usize], classes: usize, with_iou: bool) -> Metrics {
    assert_eq!(predictions.len(), truth.len());
    let mut matrix = vec![0u64; classes * classes];
    for (&p, &t) in predictions.iter().zip(truth.iter()) {
        matrix[t * classes + p] += 1;
    }
    let total: u64 = matrix.iter().sum();
    let correct: u64 = (0..classes).map(|c| matrix[c * classes + c]).sum();
    let oa = correct as f64 / total as f64;

    let mut acc_sum = 0.0;
    let mut acc_classes = 0;
    let mut iou_sum = 0.0;
    let mut iou_classes = 0;
    for c in 0..classes {
        let tp = matrix[c * classes + c];
        let row: u64 = (0..classes).map(|j| matrix[c * classes + j]).sum();
        let col: u64 = (0..classes).map(|j| matrix[j * classes + c]).sum();
        if row > 0 {
            acc_sum += tp as f64 / row as f64;
            acc_classes += 1;
        }
        let union = row + col - tp;
        if union > 0 {
            iou_sum += tp as f64 / union as f64;
            iou_classes += 1;
        }
    }
    Metrics {
        oa,
        macc: acc_sum / acc_classes as f64,
        miou: with_iou.then(|| iou_sum / iou_classes as f64),
    }
}

pub fn classification_metrics(predictions: &[usize], truth: &[usize], classes: usize) -> Metrics {
    confusion_metrics(predictions, truth, classes, false)
}

pub fn segmentation_metrics(predictions: &[usize], truth: &[usize], classes: usize) -> Metrics {
    confusion_metrics(predictions, truth, classes, true)
}

// ── datasets ────────────────────────────────────────────────────────────

/// Uniform view over both task's samples: a cloud plus its supervision.
#[derive(Debug, Clone)]
pub enum Sample {
    Cls { cloud: PointCloud, label: u32 },
    Seg { cloud: PointCloud },
}

impl Sample {
    pub fn cloud(&self) -> &PointCloud {
        match self {
            Sample::Cls { cloud, .. } => cloud,
            Sample::Seg { cloud } => cloud,
        }
    }

    fn truths(&self) -> Vec<usize> {
        match self {
            Sample::Cls { label, .. } => vec![*label as usize],
            Sample::Seg { cloud } => cloud
                .labels
                .as_ref()
                .expect("scene cloud must carry labels")
                .iter()
                .map(|&l| l as usize)
                .collect(),
        }
    }

    fn augmented(&self, rng: &mut impl Rng) -> Sample {
        match self {
            Sample::Cls { cloud, label } => Sample::Cls {
                cloud: augment(cloud, rng),
                label: *label,
            },
            Sample::Seg { cloud } => Sample::Seg {
                cloud: augment(cloud, rng),
            },
        }
    }
}

pub fn samples_from_clouds(task: Task, labeled: Vec<LabeledCloud>, scenes: Vec<PointCloud>) -> Vec<Sample> {
    match task {
        Task::Classification => labeled
            .into_iter()
            .map(|lc| Sample::Cls {
                cloud: lc.cloud,
                label: lc.label,
            })
            .collect(),
        _ => scenes.into_iter().map(|cloud| Sample::Seg { cloud }).collect(),
    }
}

/// Seed-fixed validation split: shuffled indices, the first
/// `round(n·fraction)` go to validation.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5EED_511F);
    idx.shuffle(&mut rng);
    let val = (n as f64 * fraction).round() as usize;
    let (val_idx, train_idx) = idx.split_at(val);
    (train_idx.to_vec(), val_idx.to_vec())
}

// ── the loop ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val: Metrics,
    pub wall_time: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub best_params: ModelParams,
    pub final_val: Metrics,
    pub final_params: ModelParams,
    pub model: ModelConfig,
}

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    Synth(SynthError),
    Config(String),
    NonFiniteLoss { epoch: usize },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Synth(e) => write!(f, "{e}"),
            TrainError::Config(msg) => write!(f, "{msg}"),
            TrainError::NonFiniteLoss { epoch } => {
                write!(f, "non-finite loss at epoch {epoch}; run aborted")
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<SynthError> for TrainError {
    fn from(e: SynthError) -> Self {
        TrainError::Synth(e)
    }
}

struct PassResult {
    loss: f64,
    grads: Option<Vec<Tensor>>,
    predictions: Vec<usize>,
}

fn sample_pass(
    cfg: &ModelConfig,
    params: &ModelParams,
    sample: &Sample,
    want_grads: bool,
) -> Result<PassResult, ModelError> {
    let tape = Tape::new();
    let mounted = mount(params, &tape, want_grads);
    let logits = forward_logits(&tape, sample.cloud(), cfg, &mounted, 0)?;
    let truths = sample.truths();
    let loss = logits.cross_entropy(&truths)?;
    let loss_value = loss.item();

    let values = logits.value();
    let classes = cfg.classes;
    let predictions = (0..truths.len())
        .map(|row| {
            let slice = &values.data()[row * classes..(row + 1) * classes];
            let mut best = 0;
            for (c, &v) in slice.iter().enumerate() {
                if v > slice[best] {
                    best = c;
                }
            }
            best
        })
        .collect();

    let grads = if want_grads {
        tape.backward(&loss)?;
        Some(gradients(&mounted))
    } else {
        None
    };
    Ok(PassResult {
        loss: loss_value,
        grads,
        predictions,
    })
}

/// Validation metrics over a sample set; forward passes run in parallel and
/// merge in input order.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams,
    samples: &[&Sample],
) -> Result<Metrics, ModelError> {
    let results: Result<Vec<PassResult>, ModelError> = samples
        .par_iter()
        .map(|s| sample_pass(cfg, params, s, false))
        .collect();
    let results = results?;
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for (r, s) in results.iter().zip(samples.iter()) {
        predictions.extend_from_slice(&r.predictions);
        truths.extend(s.truths());
    }
    Ok(match cfg.task {
        Task::Segmentation => segmentation_metrics(&predictions, &truths, cfg.classes),
        _ => classification_metrics(&predictions, &truths, cfg.classes),
    })
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 || !max_norm.is_finite() {
        return;
    }
    let norm_sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

fn primary_metric(task: Task, m: &Metrics) -> f64 {
    match task {
        Task::Segmentation => m.miou.unwrap_or(m.oa),
        _ => m.oa,
    }
}

/// Full seed-deterministic training run driven by a [`RunConfig`]:
/// generate, split, then per epoch shuffle → augment → accumulate batch
/// gradients → step → evaluate. The best-validation parameters are
/// retained alongside the final ones.
pub fn train(run: &RunConfig) -> Result<TrainOutcome, TrainError> {
    let model_cfg = run
        .resolved_model()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let spec = run.dataset_spec();
    let samples = match run.task {
        Task::Classification => samples_from_clouds(run.task, gen_shapes(&spec)?, vec![]),
        Task::Segmentation => samples_from_clouds(run.task, vec![], gen_scenes(&spec)?),
        Task::DetectionBackbone => {
            return Err(TrainError::Config(
                "the detection backbone has no training head".into(),
            ))
        }
    };
    let (train_idx, val_idx) = split_validation(samples.len(), run.data.val_fraction, run.data.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(TrainError::Config(format!(
            "split leaves {} train / {} val samples",
            train_idx.len(),
            val_idx.len()
        )));
    }
    let val_set: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();

    let mut params = param_init(&model_cfg, run.seed);
    let opt_cfg = OptimizerConfig {
        kind: run.train.optimizer,
        lr0: run.train.lr,
        weight_decay: run.train.weight_decay,
        momentum: run.train.momentum,
        beta1: run.train.beta1,
        beta2: run.train.beta2,
        eps: run.train.eps,
    };
    let mut opt = OptimizerState::new(run.train.optimizer, &params);
    let mut rng = ChaCha12Rng::seed_from_u64(run.seed);

    let mut records = Vec::with_capacity(run.train.epochs);
    let mut best: Option<(usize, Metrics, ModelParams)> = None;
    for epoch in 0..run.train.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, run.train.epochs, opt_cfg.lr0);

        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        // augmentation draws happen sequentially so worker count cannot
        // change the stream
        let epoch_samples: Vec<Sample> = order
            .iter()
            .map(|&i| samples[i].augmented(&mut rng))
            .collect();

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in epoch_samples.chunks(run.train.batch.max(1)) {
            let results: Result<Vec<PassResult>, ModelError> = batch
                .par_iter()
                .map(|s| sample_pass(&model_cfg, &params, s, true))
                .collect();
            let results = results?;
            let mut merged: Option<Vec<Tensor>> = None;
            for (r, s) in results.iter().zip(batch.iter()) {
                if !r.loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch });
                }
                loss_sum += r.loss;
                let truths = s.truths();
                correct += r
                    .predictions
                    .iter()
                    .zip(truths.iter())
                    .filter(|(p, t)| p == t)
                    .count();
                seen += truths.len();
                let grads = r.grads.as_ref().expect("training pass carries gradients");
                match &mut merged {
                    None => merged = Some(grads.clone()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads.iter()) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = merged.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            clip_gradients(&mut grads, run.train.clip_norm);
            opt.step(&mut params, &grads, lr, &opt_cfg);
        }

        let val = evaluate(&model_cfg, &params, &val_set)?;
        let record = TrainRecord {
            epoch,
            lr,
            train_loss: loss_sum / epoch_samples.len() as f64,
            train_acc: correct as f64 / seen as f64,
            val,
            wall_time: start.elapsed().as_secs_f64(),
        };
        let better = match &best {
            None => true,
            Some((_, m, _)) => primary_metric(run.task, &val) > primary_metric(run.task, m),
        };
        if better {
            best = Some((epoch, val, clone_params(&params)));
        }
        records.push(record);
    }

    let (best_epoch, best_val, best_params) = best.expect("at least one epoch");
    let final_val = records.last().map(|r| r.val).expect("at least one epoch");
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_val,
        best_params,
        final_val,
        final_params: params,
        model: model_cfg,
    })
}

fn clone_params(params: &ModelParams) -> ModelParams {
    params.map(&mut |t| t.clone())
}

/// Renders the metrics table: one row per epoch, fixed six-decimal floats,
/// `val_miou` empty for classification.
pub fn render_metrics_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_oa,val_macc,val_miou\n");
    for r in records {
        let miou = r
            .val
            .miou
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.val.oa, r.val.macc, miou
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_run_config;
    use crate::model::preset;

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.5), 0.5);
        assert!((cosine_lr(100, 100, 0.5)).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.5) - 0.25).abs() < 1e-15);
    }

    fn tiny_params() -> ModelParams {
        let cfg = preset("miniature-cls", 2).unwrap();
        param_init(&cfg, 0)
    }

    #[test]
    fn sgd_zero_gradient_zero_momentum_is_identity() {
        let mut params = tiny_params();
        let before = crate::model::named_tensors(&params);
        let mut state = OptimizerState::new(OptimizerKind::SgdMomentum, &params);
        let grads: Vec<Tensor> = before.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let cfg = OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr0: 0.1,
            weight_decay: 0.0,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        sgd_step(&mut params, &grads, &mut state, 0.1, &cfg);
        let after = crate::model::named_tensors(&params);
        for ((_, a), (_, b)) in before.iter().zip(after.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        // θ = 1, g = 1, zero state, lr = 0.1, wd = 0.01, β = (0.9, 0.999),
        // eps = 1e-8:
        //   θ' = θ(1 − lr·wd) = 0.999
        //   m = 0.1, v = 0.001; mhat = 1, vhat = 1
        //   θ'' = θ' − lr·1/(1 + eps)
        let cfg_model = preset("miniature-cls", 2).unwrap();
        let mut params = param_init(&cfg_model, 0);
        params.for_each_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = 1.0;
            }
        });
        let mut state = OptimizerState::new(OptimizerKind::AdamW, &params);
        let mut grads = Vec::new();
        params.for_each(&mut |_, t| grads.push(Tensor::full(t.shape().to_vec(), 1.0)));
        let cfg = OptimizerConfig {
            kind: OptimizerKind::AdamW,
            lr0: 0.1,
            weight_decay: 0.01,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adamw_step(&mut params, &grads, &mut state, 0.1, &cfg);
        let want = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8);
        params.for_each(&mut |_, t| {
            for v in t.data() {
                assert!((v - want).abs() < 1e-12, "{v} vs {want}");
            }
        });
    }

    #[test]
    fn optimizer_steps_are_deterministic() {
        let run = || {
            let mut params = tiny_params();
            let mut state = OptimizerState::new(OptimizerKind::AdamW, &params);
            let cfg = OptimizerConfig {
                kind: OptimizerKind::AdamW,
                lr0: 0.01,
                weight_decay: 0.01,
                momentum: 0.9,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            };
            let mut grads = Vec::new();
            params.for_each(&mut |_, t| grads.push(Tensor::full(t.shape().to_vec(), 0.3)));
            for _ in 0..5 {
                adamw_step(&mut params, &grads, &mut state, 0.01, &cfg);
            }
            let mut flat = Vec::new();
            params.for_each(&mut |_, t| flat.extend_from_slice(t.data()));
            flat
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn augment_identity_under_unit_draws() {
        let cloud = PointCloud::new(vec![[0.1, -0.4, 0.7], [1.0, 2.0, -3.0]])
            .with_labels(vec![1, 2]);
        let out = augment_with(&cloud, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]);
        assert_eq!(out.coords, cloud.coords);
        assert_eq!(out.labels, cloud.labels);
    }

    #[test]
    fn augment_draws_stay_in_bounds() {
        let cloud = PointCloud::new(vec![[1.0, 1.0, 1.0]]);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for _ in 0..10_000 {
            let out = augment(&cloud, &mut rng);
            for a in 0..3 {
                lo[a] = lo[a].min(out.coords[0][a]);
                hi[a] = hi[a].max(out.coords[0][a]);
            }
        }
        for a in 0..3 {
            // scale in [0.67, 1.5] and shift in [-0.2, 0.2] around x = 1
            assert!(lo[a] >= 0.67 - 0.2 - 1e-9, "axis {a} low {}", lo[a]);
            assert!(hi[a] <= 1.5 + 0.2 + 1e-9, "axis {a} high {}", hi[a]);
            assert!(lo[a] < 0.55 && hi[a] > 1.6, "bounds not approached");
        }
    }

    #[test]
    fn metrics_perfect_predictions() {
        let m = segmentation_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.macc, 1.0);
        assert_eq!(m.miou, Some(1.0));
    }

    #[test]
    fn metrics_two_class_hand_case() {
        // confusion matrix [[3,1],[0,4]]
        let truth = [0, 0, 0, 0, 1, 1, 1, 1];
        let pred = [0, 0, 0, 1, 1, 1, 1, 1];
        let m = segmentation_metrics(&pred, &truth, 2);
        assert!((m.oa - 7.0 / 8.0).abs() < 1e-15);
        assert!((m.macc - 7.0 / 8.0).abs() < 1e-15);
        assert!((m.miou.unwrap() - 0.775).abs() < 1e-15);
    }

    #[test]
    fn metrics_all_wrong() {
        let m = classification_metrics(&[1, 1], &[0, 0], 2);
        assert_eq!(m.oa, 0.0);
    }

    #[test]
    fn metrics_match_confusion_matrix_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let classes = rng.gen_range(2..6usize);
            let n = rng.gen_range(1..60usize);
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let m = segmentation_metrics(&pred, &truth, classes);

            // independent oracle on integer counts
            let mut mat = vec![vec![0u64; classes]; classes];
            for (&p, &t) in pred.iter().zip(truth.iter()) {
                mat[t][p] += 1;
            }
            let correct: u64 = (0..classes).map(|c| mat[c][c]).sum();
            assert_eq!(m.oa, correct as f64 / n as f64);
            let mut accs = Vec::new();
            let mut ious = Vec::new();
            for c in 0..classes {
                let row: u64 = mat[c].iter().sum();
                let col: u64 = (0..classes).map(|r| mat[r][c]).sum();
                if row > 0 {
                    accs.push(mat[c][c] as f64 / row as f64);
                }
                if row + col - mat[c][c] > 0 {
                    ious.push(mat[c][c] as f64 / (row + col - mat[c][c]) as f64);
                }
            }
            assert_eq!(m.macc, accs.iter().sum::<f64>() / accs.len() as f64);
            assert_eq!(
                m.miou.unwrap(),
                ious.iter().sum::<f64>() / ious.len() as f64
            );
        }
    }

    #[test]
    fn split_is_seeded_and_exact() {
        let (train, val) = split_validation(500, 0.2, 7);
        assert_eq!(val.len(), 100);
        assert_eq!(train.len(), 400);
        let (train2, val2) = split_validation(500, 0.2, 7);
        assert_eq!(train, train2);
        assert_eq!(val, val2);
    }

    #[test]
    fn frozen_batch_loss_decreases_over_first_steps() {
        for seed in [0u64, 1, 2] {
            let cfg = preset("miniature-cls", 2).unwrap();
            let spec = crate::synth::DatasetSpec {
                task: Task::Classification,
                classes: 2,
                samples: 4,
                points: cfg.input_points,
                noise: 0.0,
                seed: 3,
            };
            let samples = samples_from_clouds(
                Task::Classification,
                gen_shapes(&spec).unwrap(),
                vec![],
            );
            let mut params = param_init(&cfg, seed);
            let mut state = OptimizerState::new(OptimizerKind::SgdMomentum, &params);
            let opt_cfg = OptimizerConfig {
                kind: OptimizerKind::SgdMomentum,
                lr0: 1e-3,
                weight_decay: 0.0,
                momentum: 0.9,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            };
            let batch: Vec<&Sample> = samples.iter().collect();
            let mut prev = f64::INFINITY;
            for _step in 0..10 {
                let mut loss_sum = 0.0;
                let mut grads: Option<Vec<Tensor>> = None;
                for s in &batch {
                    let r = sample_pass(&cfg, &params, s, true).unwrap();
                    loss_sum += r.loss;
                    let g = r.grads.unwrap();
                    match &mut grads {
                        None => grads = Some(g),
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(g.iter()) {
                                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                let mut grads = grads.unwrap();
                for g in grads.iter_mut() {
                    for v in g.data_mut() {
                        *v /= batch.len() as f64;
                    }
                }
                let loss = loss_sum / batch.len() as f64;
                assert!(loss < prev, "seed {seed}: loss {loss} did not decrease from {prev}");
                prev = loss;
                sgd_step(&mut params, &grads, &mut state, 1e-3, &opt_cfg);
            }
        }
    }

    #[test]
    fn train_runs_are_seed_deterministic() {
        let mut run = default_run_config(Task::Classification);
        run.model.preset = "miniature-cls".to_string();
        run.data.classes = 2;
        run.data.samples = 6;
        run.data.points = 128;
        run.train.epochs = 2;
        run.train.batch = 4;
        let a = train(&run).unwrap();
        let b = train(&run).unwrap();
        assert_eq!(render_metrics_csv(&a.records), render_metrics_csv(&b.records));
        let pa = crate::model::named_tensors(&a.final_params);
        let pb = crate::model::named_tensors(&b.final_params);
        for ((_, x), (_, y)) in pa.iter().zip(pb.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn metrics_csv_has_the_pinned_header() {
        let records = vec![TrainRecord {
            epoch: 0,
            lr: 0.1,
            train_loss: 1.5,
            train_acc: 0.5,
            val: Metrics {
                oa: 0.25,
                macc: 0.25,
                miou: None,
            },
            wall_time: 1.0,
        }];
        let csv = render_metrics_csv(&records);
        assert!(csv.starts_with("epoch,lr,train_loss,train_acc,val_oa,val_macc,val_miou\n"));
        assert!(csv.contains("0,0.100000,1.500000,0.500000,0.250000,0.250000,\n"));
    }
}
