use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::optim::Sgd;
use super::{lr_at, TrainConfig};
use crate::data::{batch_iter, center_pixels, eval_batches, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::model::{FEModel, FEModelConfig, Group, Mode, ParamStore};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Fractional epochs completed when the evaluation ran.
    pub epoch: f64,
    /// Percentages in `[0, 100]`.
    pub top1: f64,
    pub top5: f64,
    /// Seconds since the start of the run.
    pub wall_seconds: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Elements that received a gradient on the first step, per group.
    pub grad_params: BTreeMap<Group, usize>,
    /// Mean seconds per optimizer step (forward, backward and update; batch
    /// synthesis excluded).
    pub mean_step_seconds: f64,
    pub total_seconds: f64,
    /// Momentum values held by the optimizer at the end of the run.
    pub optimizer_numel: usize,
}

impl RunMetrics {
    pub fn final_top1(&self) -> Option<f64> {
        self.evals.last().map(|e| e.top1)
    }

    pub fn best_top1(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.top1).reduce(f64::max)
    }

    pub fn grad_param_total(&self) -> usize {
        self.grad_params.values().sum()
    }
}

/// Which network maps a clip to logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    /// Spatial stage, optional adapter, temporal stage, head.
    Factorised(Mode),
    /// Head on the mean of the per-frame representations; blind to order.
    MeanPooled,
}

impl Classifier {
    fn logits<F: Real>(self, model: &FEModel<'_, F>, g: &Graph<F>, video: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Classifier::Factorised(mode) => model.forward(g, video, mode),
            Classifier::MeanPooled => model.forward_mean_pooled(g, video),
        }
    }
}

/// True when `label` is among the `k` largest of `logits`; equal logits
/// rank the lower class index first.
pub fn top_k_hit<F: Real>(logits: &[F], label: usize, k: usize) -> bool {
    let target = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count();
    rank < k
}

/// Top-1 and top-5 accuracy in percent on the held-out split, one clip per
/// video.
pub fn evaluate<F: Real>(
    config: &FEModelConfig,
    mode: Mode,
    store: &ParamStore<F>,
    data: &DatasetSpec,
    batch: usize,
) -> Result<(f64, f64)> {
    evaluate_classifier(config, Classifier::Factorised(mode), store, data, batch)
}

pub fn evaluate_classifier<F: Real>(
    config: &FEModelConfig,
    classifier: Classifier,
    store: &ParamStore<F>,
    data: &DatasetSpec,
    batch: usize,
) -> Result<(f64, f64)> {
    let model = FEModel::new(config, store);
    let (mut hit1, mut hit5, mut total) = (0usize, 0usize, 0usize);
    for b in eval_batches::<F>(data, Split::Eval, batch, config.num_frames)? {
        let g = Graph::inference();
        let logits = classifier.logits(&model, &g, &center_pixels(&b.video))?;
        let c = config.num_classes;
        for (row, &label) in logits.data().chunks_exact(c).zip(&b.labels) {
            hit1 += usize::from(top_k_hit(row, label, 1));
            hit5 += usize::from(top_k_hit(row, label, 5));
        }
        total += b.labels.len();
    }
    if total == 0 {
        return Ok((0.0, 0.0));
    }
    let pct = |h: usize| 100.0 * h as f64 / total as f64;
    Ok((pct(hit1), pct(hit5)))
}

/// Index of the first value within `margin` of the maximum.
pub fn near_peak_index(top1: &[f64], margin: f64) -> Option<usize> {
    let best = top1.iter().copied().reduce(f64::max)?;
    top1.iter().position(|&v| v >= best - margin)
}

/// Epoch of the first evaluation within `margin` percentage points of the
/// best top-1.
pub fn near_peak_epoch(metrics: &RunMetrics, margin: f64) -> Option<f64> {
    let top1: Vec<f64> = metrics.evals.iter().map(|e| e.top1).collect();
    near_peak_index(&top1, margin).map(|i| metrics.evals[i].epoch)
}

fn check_frames(config: &FEModelConfig, store: &ParamStore<impl Real>, data: &DatasetSpec) -> Result<()> {
    if config.num_frames > data.source_frames {
        return Err(Error::FrameMismatch(format!(
            "model expects {} frames but clips have {}",
            config.num_frames, data.source_frames
        )));
    }
    if config.image_size != data.image_size || config.channels != 1 {
        return Err(Error::Config(format!(
            "model takes {0}x{0}x{1} frames, data renders {2}x{2}x1",
            config.image_size, config.channels, data.image_size
        )));
    }
    if config.num_classes != data.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, data has {}",
            config.num_classes, data.num_classes
        )));
    }
    let Ok(pos) = store.get("temporal.pos_embed") else {
        return Ok(());
    };
    let rows = pos.shape()[0];
    if rows != config.num_frames {
        return Err(Error::FrameMismatch(format!(
            "temporal positional table has {rows} rows, config asks for {} frames",
            config.num_frames
        )));
    }
    Ok(())
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    crate::model::splitmix64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Train `store` in place for `train.epochs` epochs.
///
/// `freeze` is applied to the store first. Groups it marks frozen are
/// checked to be bitwise unchanged at the end.
pub fn run_stage<F: Real>(
    config: &FEModelConfig,
    mode: Mode,
    store: &mut ParamStore<F>,
    data: &DatasetSpec,
    train: &TrainConfig,
    freeze: &BTreeMap<Group, bool>,
) -> Result<RunMetrics> {
    if mode == Mode::Sfa && !store.has_group(Group::Adapter) {
        return Err(Error::MissingGroup("adapter"));
    }
    if !store.has_group(Group::Temporal) {
        return Err(Error::MissingGroup("temporal"));
    }
    train_classifier(config, Classifier::Factorised(mode), store, data, train, freeze)
}

/// [`run_stage`] for any [`Classifier`].
pub fn train_classifier<F: Real>(
    config: &FEModelConfig,
    classifier: Classifier,
    store: &mut ParamStore<F>,
    data: &DatasetSpec,
    train: &TrainConfig,
    freeze: &BTreeMap<Group, bool>,
) -> Result<RunMetrics> {
    train.validate()?;
    config.validate()?;
    data.validate()?;
    check_frames(config, store, data)?;
    for (&g, &frozen) in freeze {
        store.set_frozen(g, frozen);
    }
    let mut metrics = RunMetrics::default();
    if train.epochs == 0 {
        return Ok(metrics);
    }

    let snapshot: Vec<(String, Tensor<F>)> = store
        .iter()
        .filter(|(n, _)| Group::of(n).is_some_and(|g| store.is_frozen(g)))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();

    let per_epoch = batch_iter::<F>(data, Split::Train, train.local_batch, config.num_frames, 0)?
        .num_batches();
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the training split",
            train.local_batch
        )));
    }
    let total_steps = per_epoch * train.epochs;
    let eval_every = if train.eval_every == 0 { per_epoch } else { train.eval_every };

    let start = Instant::now();
    let mut opt = Sgd::<F>::new(train.momentum);
    let mut step_time = 0.0;
    let mut step = 0;
    for epoch in 0..train.epochs {
        let batches = batch_iter::<F>(
            data,
            Split::Train,
            train.local_batch,
            config.num_frames,
            epoch_seed(train.seed, epoch),
        )?;
        for batch in batches {
            let t0 = Instant::now();
            let lr = lr_at(step, total_steps, train);
            let g = Graph::new();
            let video = center_pixels(&batch.video);
            let logits = classifier.logits(&FEModel::new(config, store), &g, &video)?;
            let loss = g.cross_entropy(&logits, &batch.labels, train.label_smoothing)?;
            let loss_value = loss.item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            g.backward(&loss)?;
            if step == 0 {
                for (name, t) in store.iter() {
                    if t.has_grad() {
                        let group = Group::of(name).expect("store names carry a group");
                        *metrics.grad_params.entry(group).or_insert(0) += t.numel();
                    }
                }
            }
            opt.step(store, lr)?;
            step_time += t0.elapsed().as_secs_f64();
            metrics.steps.push(StepRecord {
                step,
                loss: loss_value,
                lr,
            });
            step += 1;

            if step % eval_every == 0 || step == total_steps {
                let (top1, top5) = evaluate_classifier(config, classifier, store, data, train.eval_batch)?;
                let rec = EvalRecord {
                    epoch: step as f64 / per_epoch as f64,
                    top1,
                    top5,
                    wall_seconds: start.elapsed().as_secs_f64(),
                    steps: step,
                };
                log::info!(
                    "{classifier:?} {}f epoch {:.2} step {step} loss {loss_value:.4} top1 {top1:.2}",
                    config.num_frames,
                    rec.epoch
                );
                metrics.evals.push(rec);
            }
        }
    }

    for (name, before) in &snapshot {
        let after = store.get(name)?;
        if !(after.same(before) || after.bitwise_eq(before)) {
            return Err(Error::FreezeViolation(name.clone()));
        }
    }
    metrics.mean_step_seconds = step_time / step as f64;
    metrics.total_seconds = start.elapsed().as_secs_f64();
    metrics.optimizer_numel = opt.buffer_numel();
    Ok(metrics)
}
