use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Sgd;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::model::{init_head, init_spatial, FEModel, FEModelConfig, Group, ParamStore};
use crate::tensor::{Graph, Tensor};

/// Still-image pretraining of the spatial stage.
///
/// Frames are rendered without their motion trail and labelled with the
/// sprite's cell on a `grid × grid` partition, so the learned features
/// locate the sprite but carry no direction information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grid: usize,
    pub seed: u64,
    /// Held-out images scored at the end.
    pub eval_images: usize,
}

impl Default for ImagePretrainConfig {
    fn default() -> Self {
        ImagePretrainConfig {
            steps: 500,
            batch: 32,
            lr: 0.02,
            momentum: 0.9,
            grid: 4,
            seed: 0,
            eval_images: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImagePretrainResult {
    /// Spatial group only; its config records `grid²` classes and one frame.
    pub checkpoint: Checkpoint,
    pub final_loss: f64,
    /// Held-out cell accuracy in percent.
    pub top1: f64,
}

fn image_batch(
    data: &DatasetSpec,
    split: Split,
    rng: &mut ChaCha8Rng,
    count: usize,
    grid: usize,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let n = data.image_size;
    let mut px = Vec::with_capacity(count * n * n);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let index = rng.random_range(0..data.split_len(split));
        let frame = rng.random_range(0..data.source_frames);
        px.extend(data.render_still(split, index, frame).into_iter().map(|v| 2.0 * v - 1.0));
        labels.push(data.grid_cell(split, index, frame, grid));
    }
    Ok((Tensor::new(&[count, 1, n, n, 1], px)?, labels))
}

fn image_logits(
    g: &Graph<f32>,
    config: &FEModelConfig,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let m = FEModel::new(config, store);
    let x = m.spatial_encode(g, &m.patch_embed(g, images)?)?;
    let x = g.reshape(&x, &[images.shape()[0], config.hidden])?;
    m.head(g, &x)
}

/// Train a fresh spatial stage on still frames and return it as a
/// spatial-only checkpoint.
pub fn pretrain_image(
    config: &FEModelConfig,
    data: &DatasetSpec,
    cfg: &ImagePretrainConfig,
) -> Result<ImagePretrainResult> {
    data.validate()?;
    if cfg.grid == 0 || cfg.batch == 0 {
        return Err(Error::Config("grid and batch must be positive".into()));
    }
    let icfg = config.clone().with_frames(1).with_classes(cfg.grid * cfg.grid);
    icfg.validate()?;
    let mut store = ParamStore::new();
    init_spatial(&mut store, &icfg, cfg.seed)?;
    init_head(&mut store, &icfg, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x696d_6167_65);
    let mut opt = Sgd::<f32>::new(cfg.momentum);
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let (images, labels) = image_batch(data, Split::Train, &mut rng, cfg.batch, cfg.grid)?;
        let g = Graph::new();
        let logits = image_logits(&g, &icfg, &store, &images)?;
        let loss = g.cross_entropy(&logits, &labels, 0.0)?;
        final_loss = loss.item().into();
        if !final_loss.is_finite() {
            return Err(Error::NonFinite(format!("image pretraining loss at step {step}")));
        }
        g.backward(&loss)?;
        opt.step(&mut store, cfg.lr)?;
    }

    let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6576_616c);
    let (images, labels) = image_batch(data, Split::Eval, &mut erng, cfg.eval_images, cfg.grid)?;
    let logits = image_logits(&Graph::inference(), &icfg, &store, &images)?;
    let classes = cfg.grid * cfg.grid;
    let hits = logits
        .data()
        .chunks_exact(classes)
        .zip(&labels)
        .filter(|(row, &y)| super::top_k_hit(row, y, 1))
        .count();
    let top1 = 100.0 * hits as f64 / labels.len().max(1) as f64;
    log::info!("image pretraining: loss {final_loss:.4} cell top1 {top1:.1}");

    store.remove_group(Group::Head);
    let meta = CheckpointMeta::new(icfg, "image", 0.0, data.seed);
    Ok(ImagePretrainResult {
        checkpoint: Checkpoint::from_store(&store, meta),
        final_loss,
        top1,
    })
}
