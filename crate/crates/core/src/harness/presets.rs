use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::metrics::{emit_metrics, fmt_sig, write_file};
use super::{HarnessError, RunOptions};
use crate::checkpoint::{surgery_from_checkpoint, AblationVariant, Checkpoint, CheckpointMeta, HeadPolicy};
use crate::error::Error;
use crate::experiments::{
    ablation_table, curriculum_models, frame_sweep, headstart, median_by_variant, run_curriculum,
    AblationTable, ExperimentConfig, SweepSource,
};
use crate::model::cost::{estimate_cost, feasibility, FRAME_GRID};
use crate::model::{FEModelConfig, Group, Mode, ParamStore};
use crate::tensor::{Precision, Real};
use crate::train::{initialize_run, run_stage, RunMetrics, RunSpec};

use super::config::HarnessConfig;

type Out = std::result::Result<Vec<PathBuf>, HarnessError>;

fn runtime(e: Error) -> HarnessError {
    HarnessError::Runtime(e)
}

fn save(ckpt: &Checkpoint, path: PathBuf) -> std::result::Result<PathBuf, HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| runtime(Error::io(parent, e)))?;
    }
    ckpt.write_file(&path).map_err(runtime)?;
    Ok(path)
}

fn emit(m: &RunMetrics, dir: &Path, stem: &str, h: &HarnessConfig) -> Out {
    emit_metrics(m, dir, stem, h.format()).map_err(runtime)
}

fn csv(path: PathBuf, text: &str) -> Out {
    Ok(vec![write_file(&path, text).map_err(runtime)?])
}

/// One training stage: Stage 1 (baseline from the image source or an
/// `--init` checkpoint) or Stage 2 (surgery from `--init`).
pub fn single_run(h: &HarnessConfig, opts: &RunOptions, out: &Path) -> Out {
    match opts.precision.unwrap_or(Precision::F32) {
        Precision::F32 => single_run_in::<f32>(h, opts, out),
        Precision::F64 => single_run_in::<f64>(h, opts, out),
    }
}

fn single_run_in<F: Real>(h: &HarnessConfig, opts: &RunOptions, out: &Path) -> Out {
    let e = &h.experiment;
    let stage = opts.stage.unwrap_or(1);
    let init = match &opts.init {
        Some(path) => Some(Checkpoint::read_file(path).map_err(|err| {
            HarnessError::Usage(format!("cannot load --init {}: {err}", path.display()))
        })?),
        None => None,
    };
    let (frames, mode, mut train) = match stage {
        1 => (e.stage1_frames, Mode::Baseline, e.stage1_train()),
        2 => (e.target_frames, Mode::Sfa, e.stage2_train()),
        s => return Err(HarnessError::Usage(format!("--stage must be 1 or 2, got {s}"))),
    };
    if let Some(epochs) = opts.epochs {
        train.epochs = epochs;
    }
    let config = e.frames(frames);
    let head = opts.head.unwrap_or(HeadPolicy::Copy);

    let store32 = match (stage, &init) {
        (2, None) => {
            return Err(HarnessError::Usage("--stage 2 needs an --init checkpoint".into()));
        }
        (2, Some(src)) if src.store.has_group(Group::Temporal) => {
            surgery_from_checkpoint::<f32>(src, &config, head, train.seed).map_err(runtime)?
        }
        _ => {
            let image = match init {
                Some(c) => c,
                None => e.image_source().map_err(runtime)?,
            };
            let mut spec = RunSpec::new("single", config.clone(), mode, train.clone())
                .from_checkpoint(Arc::new(image.clone()));
            spec.head = head;
            initialize_run(&spec, Some(&image)).map_err(runtime)?
        }
    };
    let mut store: ParamStore<F> = store32.cast();
    let metrics = run_stage(&config, mode, &mut store, &e.data, &train, &Default::default())
        .map_err(runtime)?;
    let stem = format!("stage{stage}_{frames}f");
    let meta = CheckpointMeta::new(config, format!("stage{stage}"), train.epochs as f64, e.data.seed);
    let mut files = vec![save(&Checkpoint::from_store(&store, meta), out.join(format!("{stem}.sfa")))?];
    files.extend(emit(&metrics, out, &stem, h)?);
    Ok(files)
}

fn seeds(h: &HarnessConfig) -> Vec<ExperimentConfig> {
    (0..h.ablation_seeds as u64)
        .map(|i| h.experiment.clone().with_seed(h.experiment.seed + i))
        .collect()
}

/// Component ablation over `ablation_seeds` seeds with per-variant medians.
pub fn ablation_table1(h: &HarnessConfig, out: &Path) -> Out {
    let mut files = Vec::new();
    let mut tables: Vec<AblationTable> = Vec::new();
    let mut runs = String::from(
        "seed,variant,top1,top5,step_time_ratio,mean_step_seconds,stage_seconds,combined_seconds\n",
    );
    for cfg in seeds(h) {
        let t = ablation_table(&cfg).map_err(runtime)?;
        let dir = out.join(format!("seed{}", cfg.seed));
        files.extend(emit(&t.stage1, &dir, "stage1", h)?);
        for r in &t.rows {
            files.extend(emit(&r.metrics, &dir, r.variant.as_str(), h)?);
            let _ = writeln!(
                runs,
                "{},{},{},{},{},{},{},{}",
                cfg.seed,
                r.variant,
                fmt_sig(r.top1),
                fmt_sig(r.top5),
                fmt_sig(r.step_time_ratio),
                fmt_sig(r.mean_step_seconds),
                fmt_sig(r.metrics.total_seconds),
                fmt_sig(t.combined_seconds(r.variant).unwrap_or(f64::NAN)),
            );
        }
        tables.push(t);
    }
    files.extend(csv(out.join("table1_runs.csv"), &runs)?);

    let top1 = median_by_variant(&tables, |t, v| t.row(v).map(|r| r.top1));
    let top5 = median_by_variant(&tables, |t, v| t.row(v).map(|r| r.top5));
    let ratio = median_by_variant(&tables, |t, v| t.row(v).map(|r| r.step_time_ratio));
    let stage = median_by_variant(&tables, |t, v| t.row(v).map(|r| r.metrics.total_seconds));
    let combined = median_by_variant(&tables, |t, v| t.combined_seconds(v));
    let mut table = String::from("variant,top1,top5,step_time_ratio,stage_seconds,combined_seconds\n");
    for v in AblationVariant::ALL {
        let _ = writeln!(
            table,
            "{v},{},{},{},{},{}",
            fmt_sig(top1[&v]),
            fmt_sig(top5[&v]),
            fmt_sig(ratio[&v]),
            fmt_sig(stage[&v]),
            fmt_sig(combined[&v]),
        );
    }
    files.extend(csv(out.join("table1.csv"), &table)?);
    Ok(files)
}

/// Stage-2 top-1 for each Stage-1 source, plus the image-only source.
pub fn frame_sweep_fig3(h: &HarnessConfig, out: &Path) -> Out {
    let cells = frame_sweep(&h.experiment, &h.sweep_sources, &h.sweep_targets).map_err(runtime)?;
    let mut files = Vec::new();
    let mut table = String::from("source,target_frames,top1,top5\n");
    for c in &cells {
        let stem = format!("{}_to_{}f", c.source, c.target_frames);
        files.extend(emit(&c.metrics, out, &stem, h)?);
        let top5 = c.metrics.evals.last().map_or(f64::NAN, |e| e.top5);
        let _ = writeln!(table, "{},{},{},{}", c.source, c.target_frames, fmt_sig(c.top1), fmt_sig(top5));
    }
    files.extend(csv(out.join("sweep.csv"), &table)?);
    debug_assert!(cells.iter().any(|c| c.source == SweepSource::Image));
    Ok(files)
}

/// Surgery-initialized Stage 2 against a scratch model of the same shape.
pub fn headstart_fig4(h: &HarnessConfig, out: &Path) -> Out {
    let r = headstart(&h.experiment).map_err(runtime)?;
    let mut files = emit(&r.initialized, out, "initialized", h)?;
    files.extend(emit(&r.scratch, out, "scratch", h)?);
    let mut curve = String::from("epoch,initialized_top1,scratch_top1\n");
    for (a, b) in r.initialized.evals.iter().zip(&r.scratch.evals) {
        let _ = writeln!(curve, "{},{},{}", fmt_sig(a.epoch), fmt_sig(a.top1), fmt_sig(b.top1));
    }
    files.extend(csv(out.join("headstart.csv"), &curve)?);
    let npp = |v: Option<f64>| v.map_or("none".to_string(), fmt_sig);
    let text = format!(
        "run,npp_epoch\ninitialized,{}\nscratch,{}\n",
        npp(r.npp_initialized),
        npp(r.npp_scratch)
    );
    files.extend(csv(out.join("headstart_npp.csv"), &text)?);
    Ok(files)
}

/// Curriculum chains A to E; every step's checkpoint is written.
pub fn curriculum_ae(h: &HarnessConfig, out: &Path) -> Out {
    let e = &h.experiment;
    let image = e.image_source().map_err(runtime)?;
    let mut files = Vec::new();
    let mut table = String::from("model,step,frames,epochs,stage_seconds,cumulative_seconds,top1\n");
    for (model, specs) in curriculum_models(e, h.curriculum_short_epochs, h.curriculum_long_epochs) {
        let shape: Vec<(usize, usize)> = specs.iter().map(|s| (s.config.num_frames, s.train.epochs)).collect();
        let result = run_curriculum(specs, &image, &e.data).map_err(runtime)?;
        let dir = out.join(&model);
        for (step, (frames, epochs)) in result.steps.iter().zip(shape) {
            files.push(save(&step.checkpoint, dir.join(format!("{}.sfa", step.name)))?);
            files.extend(emit(&step.metrics, &dir, &step.name, h)?);
            let _ = writeln!(
                table,
                "{model},{},{frames},{epochs},{},{},{}",
                step.name,
                fmt_sig(step.stage_seconds),
                fmt_sig(step.cumulative_seconds),
                fmt_sig(step.metrics.final_top1().unwrap_or(f64::NAN)),
            );
        }
    }
    files.extend(csv(out.join("curriculum.csv"), &table)?);
    Ok(files)
}

/// Frame-capacity grid for the B/L/H/g presets. No training.
pub fn cost_table6(h: &HarnessConfig, out: &Path) -> Out {
    let budget = (h.cost_budget_gb * 1e9) as u64;
    let (batch, bpv) = (h.cost_local_batch, h.cost_bytes_per_value);
    let mut grid = String::from("model,mode,frames,training_gb,fits\n");
    let mut max = String::from("model,mode,max_frames\n");
    for cfg in [
        FEModelConfig::vivit_b(),
        FEModelConfig::vivit_l(),
        FEModelConfig::vivit_h(),
        FEModelConfig::vivit_g(),
    ] {
        for mode in [Mode::Baseline, Mode::Sfa] {
            let row = feasibility(&cfg, mode, &FRAME_GRID, batch, bpv, budget);
            for &(frames, fits) in &row.cells {
                let gb = estimate_cost(&cfg, mode, frames, batch, bpv).training_bytes() as f64 / 1e9;
                let _ = writeln!(grid, "{},{mode},{frames},{},{fits}", row.model, fmt_sig(gb));
            }
            let m = row.max_frames().map_or("none".to_string(), |f| f.to_string());
            let _ = writeln!(max, "{},{mode},{m}", row.model);
        }
    }
    let mut files = csv(out.join("cost_grid.csv"), &grid)?;
    files.extend(csv(out.join("cost_max_frames.csv"), &max)?);
    Ok(files)
}
