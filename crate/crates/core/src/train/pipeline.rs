use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::engine::{run_stage, RunMetrics};
use super::TrainConfig;
use crate::checkpoint::{surgery_stage2_init, Checkpoint, CheckpointMeta, HeadPolicy};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::{
    init_adapter, init_head, init_store, init_temporal, interpolate_temporal_posemb, FEModelConfig, Group, Mode,
    ParamStore,
};

/// Where a run's parameters come from.
#[derive(Debug, Clone)]
pub enum InitSource {
    Fresh,
    /// The checkpoint produced by an earlier step of the same pipeline.
    Prior(String),
    Checkpoint(Arc<Checkpoint>),
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub name: String,
    /// Architecture for this run; `num_frames` is the clip length.
    pub config: FEModelConfig,
    pub mode: Mode,
    pub init: InitSource,
    pub head: HeadPolicy,
    /// Exact set of frozen groups. `None` keeps what initialization chose:
    /// a frozen spatial group in `Sfa` mode, nothing otherwise.
    pub freeze: Option<BTreeSet<Group>>,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn new(name: impl Into<String>, config: FEModelConfig, mode: Mode, train: TrainConfig) -> Self {
        RunSpec {
            name: name.into(),
            config,
            mode,
            init: InitSource::Fresh,
            head: HeadPolicy::Copy,
            freeze: None,
            train,
        }
    }

    pub fn from_prior(mut self, step: impl Into<String>) -> Self {
        self.init = InitSource::Prior(step.into());
        self
    }

    pub fn from_checkpoint(mut self, ckpt: Arc<Checkpoint>) -> Self {
        self.init = InitSource::Checkpoint(ckpt);
        self
    }

    pub fn with_freeze(mut self, groups: impl IntoIterator<Item = Group>) -> Self {
        self.freeze = Some(groups.into_iter().collect());
        self
    }
}

#[derive(Debug, Clone)]
pub struct PipelineStep {
    pub name: String,
    pub metrics: RunMetrics,
    pub checkpoint: Arc<Checkpoint>,
    pub stage_seconds: f64,
    pub cumulative_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineResult {
    pub steps: Vec<PipelineStep>,
}

impl PipelineResult {
    pub fn step(&self, name: &str) -> Option<&PipelineStep> {
        self.steps.iter().find(|s| s.name == name)
    }

    pub fn total_seconds(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cumulative_seconds)
    }
}

/// Copy every group of a source into a full-model (no adapter) store. A
/// missing temporal group or head is freshly created.
fn transfer_full<F: crate::tensor::Real>(
    src: &ParamStore<F>,
    src_cfg: &FEModelConfig,
    target: &FEModelConfig,
    head: HeadPolicy,
    seed: u64,
) -> Result<ParamStore<F>> {
    let diff = src_cfg.architecture_diff(target, false);
    if !diff.is_empty() {
        return Err(Error::Surgery(diff));
    }
    if !src.has_group(Group::Spatial) {
        return Err(Error::MissingGroup("spatial"));
    }
    let mut out = ParamStore::new();
    out.copy_group_from(src, Group::Spatial)?;
    if src.has_group(Group::Temporal) {
        for (name, t) in src.group_iter(Group::Temporal) {
            if name == "temporal.pos_embed" {
                out.insert(name, &interpolate_temporal_posemb(t, target.num_frames)?)?;
            } else {
                out.insert(name, t)?;
            }
        }
    } else {
        init_temporal(&mut out, target, seed)?;
    }
    let copy_head = head == HeadPolicy::Copy
        && src.has_group(Group::Head)
        && src_cfg.num_classes == target.num_classes;
    if copy_head {
        out.copy_group_from(src, Group::Head)?;
    } else {
        init_head(&mut out, target, seed)?;
    }
    Ok(out)
}

/// Initial parameters for `spec`, transferred from `source` when given.
pub fn initialize_run(spec: &RunSpec, source: Option<&Checkpoint>) -> Result<ParamStore<f32>> {
    let seed = spec.train.seed;
    let mut store = match source {
        None => {
            let mut s = init_store(&spec.config, spec.mode, seed)?;
            if spec.mode == Mode::Sfa {
                s.set_frozen(Group::Spatial, true);
            }
            s
        }
        Some(src) => transfer(spec, src, seed)?,
    };
    if let Some(frozen) = &spec.freeze {
        for g in Group::ALL {
            store.set_frozen(g, frozen.contains(&g));
        }
    }
    Ok(store)
}

fn transfer(spec: &RunSpec, src: &Checkpoint, seed: u64) -> Result<ParamStore<f32>> {
    let src_store = src.params::<f32>();
    let src_cfg = &src.meta.config;
    Ok(match spec.mode {
        // A spatial-only source (still-image pretraining) gets fresh
        // temporal, adapter and head groups.
        Mode::Sfa if !src_store.has_group(Group::Temporal) => {
            let mut s = transfer_full(&src_store, src_cfg, &spec.config, spec.head, seed)?;
            init_adapter(&mut s, &spec.config, seed)?;
            s.set_frozen(Group::Spatial, true);
            s
        }
        Mode::Sfa => {
            let mut s = surgery_stage2_init(&src_store, src_cfg, &spec.config, spec.head, seed)?;
            // Chained adapter stages keep the adapter they already trained.
            if src_store.has_group(Group::Adapter) {
                s.copy_group_from(&src_store, Group::Adapter)?;
            }
            s
        }
        Mode::Baseline => transfer_full(&src_store, src_cfg, &spec.config, spec.head, seed)?,
    })
}

/// Execute chained runs in order. Every `Prior` reference is resolved
/// before anything trains.
pub fn run_pipeline(specs: &[RunSpec], data: &DatasetSpec) -> Result<PipelineResult> {
    let mut seen = BTreeSet::new();
    for spec in specs {
        if let InitSource::Prior(name) = &spec.init {
            if !seen.contains(name.as_str()) {
                return Err(Error::MissingSource(format!(
                    "step `{}` starts from `{name}`, which does not run before it",
                    spec.name
                )));
            }
        }
        if !seen.insert(spec.name.as_str()) {
            return Err(Error::Config(format!("duplicate step name `{}`", spec.name)));
        }
        spec.train.validate()?;
        spec.config.validate()?;
    }

    let mut done: BTreeMap<String, Arc<Checkpoint>> = BTreeMap::new();
    let mut result = PipelineResult::default();
    let mut cumulative = 0.0;
    for spec in specs {
        let source = match &spec.init {
            InitSource::Fresh => None,
            InitSource::Prior(name) => Some(done[name].clone()),
            InitSource::Checkpoint(c) => Some(c.clone()),
        };
        let mut store = initialize_run(spec, source.as_deref())?;
        let flags = store.freeze_flags();
        let metrics = run_stage(&spec.config, spec.mode, &mut store, data, &spec.train, &flags)?;
        let stage_seconds = metrics.total_seconds;
        cumulative += stage_seconds;
        let meta = CheckpointMeta::new(
            spec.config.clone(),
            spec.name.clone(),
            spec.train.epochs as f64,
            data.seed,
        );
        let checkpoint = Arc::new(Checkpoint::from_store(&store, meta));
        done.insert(spec.name.clone(), checkpoint.clone());
        result.steps.push(PipelineStep {
            name: spec.name.clone(),
            metrics,
            checkpoint,
            stage_seconds,
            cumulative_seconds: cumulative,
        });
    }
    Ok(result)
}
