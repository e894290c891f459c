//! Desk-scale experiments: the component ablation, the Stage-1 frame
//! sweep, the convergence headstart, the curriculum chain and the
//! order-invariant control.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ablation_init, AblationSources, AblationVariant, Checkpoint, CheckpointMeta};
use crate::data::DatasetSpec;
use crate::error::Result;
use crate::model::{init_head, init_store, FEModelConfig, Group, Mode, ParamStore};
use crate::train::{
    near_peak_epoch, pretrain_image, run_pipeline, run_stage, train_classifier, Classifier,
    ImagePretrainConfig, InitSource, PipelineResult, RunMetrics, RunSpec, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    /// Architecture; `num_frames` is overridden per run.
    pub model: FEModelConfig,
    pub image: ImagePretrainConfig,
    pub stage1_frames: usize,
    pub stage1: TrainConfig,
    pub target_frames: usize,
    pub stage2: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 2,
            base_lr: 0.03,
            warmup_epochs: 0.5,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            seed: 0,
            data: DatasetSpec::default(),
            model: FEModelConfig::desk(),
            image: ImagePretrainConfig::default(),
            stage1_frames: 8,
            stage1: TrainConfig { epochs: 3, ..train.clone() },
            target_frames: 16,
            stage2: train,
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn frames(&self, t: usize) -> FEModelConfig {
        self.model.clone().with_frames(t)
    }

    pub fn stage1_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.stage1.clone() }
    }

    pub fn stage2_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.stage2.clone() }
    }

    /// Spatial-only checkpoint from still-image pretraining.
    pub fn image_source(&self) -> Result<Checkpoint> {
        let cfg = ImagePretrainConfig { seed: self.seed, ..self.image.clone() };
        Ok(pretrain_image(&self.model, &self.data, &cfg)?.checkpoint)
    }

    /// Full Stage-1 training at `frames` from the image source.
    pub fn stage1_source(&self, image: &Checkpoint, frames: usize) -> Result<(Checkpoint, RunMetrics)> {
        let cfg = self.frames(frames);
        let spatial = image.params::<f32>();
        let sources = AblationSources { image_spatial: Some(&spatial), stage1: None };
        let mut store = ablation_init(AblationVariant::Baseline, sources, &cfg, self.seed)?;
        let flags = store.freeze_flags();
        let metrics = run_stage(&cfg, Mode::Baseline, &mut store, &self.data, &self.stage1_train(), &flags)?;
        let meta = CheckpointMeta::new(cfg, format!("stage1_{frames}f"), self.stage1.epochs as f64, self.data.seed);
        Ok((Checkpoint::from_store(&store, meta), metrics))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub top1: f64,
    pub top5: f64,
    pub mean_step_seconds: f64,
    /// Mean step time over the baseline row's.
    pub step_time_ratio: f64,
    pub metrics: RunMetrics,
}

fn last_eval(m: &RunMetrics) -> (f64, f64) {
    m.evals.last().map_or((0.0, 0.0), |e| (e.top1, e.top5))
}

/// Train one ablation variant at the target frame count.
pub fn train_variant(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
    image: &Checkpoint,
    stage1: &Checkpoint,
) -> Result<RunMetrics> {
    let target = cfg.frames(cfg.target_frames);
    let spatial = image.params::<f32>();
    let s1 = stage1.params::<f32>();
    let sources = AblationSources {
        image_spatial: Some(&spatial),
        stage1: Some((&s1, &stage1.meta.config)),
    };
    let mut store = ablation_init(variant, sources, &target, cfg.seed)?;
    let flags = store.freeze_flags();
    run_stage(&target, variant.mode(), &mut store, &cfg.data, &cfg.stage2_train(), &flags)
}

/// One seed of the component ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    /// Rows in table order: baseline, I, II, III, V.
    pub rows: Vec<AblationRow>,
    /// The Stage-1 run variant V starts from.
    pub stage1: RunMetrics,
}

impl AblationTable {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Training seconds of a row, plus Stage-1 for variant V.
    pub fn combined_seconds(&self, variant: AblationVariant) -> Option<f64> {
        let own = self.row(variant)?.metrics.total_seconds;
        Some(if variant == AblationVariant::V {
            own + self.stage1.total_seconds
        } else {
            own
        })
    }
}

/// All five rows in table order, trained with identical budgets.
pub fn ablation_table(cfg: &ExperimentConfig) -> Result<AblationTable> {
    let image = cfg.image_source()?;
    let (stage1_ckpt, stage1) = cfg.stage1_source(&image, cfg.stage1_frames)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for variant in AblationVariant::ALL {
        let metrics = train_variant(cfg, variant, &image, &stage1_ckpt)?;
        let (top1, top5) = last_eval(&metrics);
        log::info!("ablation seed {} {variant}: top1 {top1:.2}", cfg.seed);
        rows.push(AblationRow {
            variant,
            top1,
            top5,
            mean_step_seconds: metrics.mean_step_seconds,
            step_time_ratio: 1.0,
            metrics,
        });
    }
    let base = rows[0].mean_step_seconds;
    for row in &mut rows {
        row.step_time_ratio = row.mean_step_seconds / base;
    }
    Ok(AblationTable { seed: cfg.seed, rows, stage1 })
}

/// Stage-2 source for the frame sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SweepSource {
    Image,
    Frames(usize),
}

impl std::fmt::Display for SweepSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepSource::Image => f.write_str("image"),
            SweepSource::Frames(t) => write!(f, "{t}f"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub source: SweepSource,
    pub target_frames: usize,
    pub top1: f64,
    pub metrics: RunMetrics,
}

/// Stage-2 at each target frame count from the image-only source and from
/// Stage-1 checkpoints trained at each of `source_frames`.
pub fn frame_sweep(
    cfg: &ExperimentConfig,
    source_frames: &[usize],
    targets: &[usize],
) -> Result<Vec<SweepCell>> {
    let image = cfg.image_source()?;
    let mut sources = vec![(SweepSource::Image, image.clone())];
    for &t in source_frames {
        sources.push((SweepSource::Frames(t), cfg.stage1_source(&image, t)?.0));
    }
    let mut cells = Vec::new();
    for (source, ckpt) in &sources {
        for &target in targets {
            let run = ExperimentConfig { target_frames: target, ..cfg.clone() };
            // The image-only source has no temporal stage to transfer, so it
            // takes the frozen-spatial-plus-adapter row instead.
            let variant = match source {
                SweepSource::Image => AblationVariant::III,
                SweepSource::Frames(_) => AblationVariant::V,
            };
            let metrics = train_variant(&run, variant, &image, ckpt)?;
            let top1 = last_eval(&metrics).0;
            log::info!("sweep seed {} {source} -> {target}f: top1 {top1:.2}", cfg.seed);
            cells.push(SweepCell { source: *source, target_frames: target, top1, metrics });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Headstart {
    pub initialized: RunMetrics,
    pub scratch: RunMetrics,
    pub npp_initialized: Option<f64>,
    pub npp_scratch: Option<f64>,
}

/// Surgery-initialized Stage-2 against an identically shaped sfa-mode model
/// whose spatial stage comes from the image source and whose temporal stage
/// starts fresh.
pub fn headstart(cfg: &ExperimentConfig) -> Result<Headstart> {
    let mut cfg = cfg.clone();
    if cfg.stage2.eval_every == 0 {
        // Four evaluations per epoch resolve the early part of the curve.
        let per_epoch = cfg.data.split_len(crate::data::Split::Train) / cfg.stage2.local_batch;
        cfg.stage2.eval_every = (per_epoch / 4).max(1);
    }
    let cfg = &cfg;
    let image = cfg.image_source()?;
    let (stage1, _) = cfg.stage1_source(&image, cfg.stage1_frames)?;
    let initialized = train_variant(cfg, AblationVariant::V, &image, &stage1)?;
    let scratch = train_variant(cfg, AblationVariant::III, &image, &stage1)?;
    Ok(Headstart {
        npp_initialized: near_peak_epoch(&initialized, 1.0),
        npp_scratch: near_peak_epoch(&scratch, 1.0),
        initialized,
        scratch,
    })
}

/// Fresh store for `mode` at `frames`, spatial stage from the image source.
pub fn image_initialized(cfg: &ExperimentConfig, image: &Checkpoint, frames: usize, mode: Mode) -> Result<ParamStore<f32>> {
    let target = cfg.frames(frames);
    let mut store = init_store::<f32>(&target, mode, cfg.seed)?;
    store.copy_group_from(&image.params(), Group::Spatial)?;
    Ok(store)
}

/// Order-invariant control at `frames`: trainable spatial stage from the
/// image source, head on mean-pooled frame representations, trained with
/// the Stage-1 budget.
pub fn order_control(cfg: &ExperimentConfig, image: &Checkpoint, frames: usize) -> Result<RunMetrics> {
    let target = cfg.frames(frames);
    let mut store = ParamStore::<f32>::new();
    store.copy_group_from(&image.params(), Group::Spatial)?;
    init_head(&mut store, &target, cfg.seed)?;
    let flags = store.freeze_flags();
    train_classifier(&target, Classifier::MeanPooled, &mut store, &cfg.data, &cfg.stage1_train(), &flags)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-variant median of `value` across seeds.
pub fn median_by_variant(
    tables: &[AblationTable],
    value: impl Fn(&AblationTable, AblationVariant) -> Option<f64>,
) -> BTreeMap<AblationVariant, f64> {
    AblationVariant::ALL
        .into_iter()
        .map(|v| {
            let vals: Vec<f64> = tables.iter().filter_map(|t| value(t, v)).collect();
            (v, median(&vals))
        })
        .collect()
}

/// Curriculum chains at desk scale: `short` and `long` epoch budgets stand
/// in for 10 and 30 epochs, and 4/8/16 frames for the short, medium and
/// long clips.
pub fn curriculum_models(cfg: &ExperimentConfig, short: usize, long: usize) -> Vec<(String, Vec<RunSpec>)> {
    let train = |epochs: usize| TrainConfig { epochs, seed: cfg.seed, ..cfg.stage2.clone() };
    let full = |name: &str, t: usize, epochs: usize| {
        RunSpec::new(name, cfg.frames(t), Mode::Baseline, train(epochs))
    };
    let sfa = |name: &str, t: usize, epochs: usize, from: &str| {
        RunSpec::new(name, cfg.frames(t), Mode::Sfa, train(epochs)).from_prior(from)
    };
    vec![
        (
            "A".into(),
            vec![
                full("stage1_4f", 4, short),
                sfa("sfa_8f", 8, short, "stage1_4f"),
                sfa("sfa_16f", 16, short, "sfa_8f"),
            ],
        ),
        ("B".into(), vec![full("stage1_8f", 8, short), sfa("sfa_16f", 16, 2 * short, "stage1_8f")]),
        ("C".into(), vec![full("stage1_8f", 8, short), sfa("sfa_16f", 16, long, "stage1_8f")]),
        ("D".into(), vec![full("stage1_8f", 8, long), sfa("sfa_16f", 16, long, "stage1_8f")]),
        ("E".into(), vec![full("baseline_16f", 16, long)]),
    ]
}

/// Run one curriculum chain; the first step takes its spatial stage from
/// `image`.
pub fn run_curriculum(specs: Vec<RunSpec>, image: &Checkpoint, data: &DatasetSpec) -> Result<PipelineResult> {
    let image = Arc::new(image.clone());
    let specs: Vec<RunSpec> = specs
        .into_iter()
        .map(|s| match s.init {
            InitSource::Fresh => s.from_checkpoint(image.clone()),
            _ => s,
        })
        .collect();
    run_pipeline(&specs, data)
}
