//! Command-line presets: configuration, dispatch, metric files and the
//! run manifest.

pub mod config;
pub mod metrics;
pub mod presets;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::HeadPolicy;
use crate::error::Error;
use crate::tensor::Precision;

pub use config::{parse_config, read_config, HarnessConfig};
pub use metrics::{emit_metrics, fmt_sig, MetricsFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    AblationTable1,
    FrameSweepFig3,
    HeadstartFig4,
    CurriculumAe,
    CostTable6,
    SingleRun,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::AblationTable1,
        Preset::FrameSweepFig3,
        Preset::HeadstartFig4,
        Preset::CurriculumAe,
        Preset::CostTable6,
        Preset::SingleRun,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::AblationTable1 => "ablation_table1",
            Preset::FrameSweepFig3 => "frame_sweep_fig3",
            Preset::HeadstartFig4 => "headstart_fig4",
            Preset::CurriculumAe => "curriculum_ae",
            Preset::CostTable6 => "cost_table6",
            Preset::SingleRun => "single_run",
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

/// Command-line settings. `None` keeps the config-file or default value.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub preset: Preset,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub frames: Option<usize>,
    pub epochs: Option<usize>,
    pub stage: Option<u8>,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub precision: Option<Precision>,
    pub head: Option<HeadPolicy>,
}

impl RunOptions {
    pub fn new(preset: Preset, out: impl Into<PathBuf>) -> Self {
        RunOptions {
            preset,
            config: None,
            seed: None,
            frames: None,
            epochs: None,
            stage: None,
            init: None,
            out: out.into(),
            precision: None,
            head: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(Error),
    #[error("run failed: {0}")]
    Runtime(Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Config(_) => 2,
            HarnessError::Runtime(_) => 1,
        }
    }
}

/// Files a preset produced, relative to the output directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub preset: Preset,
    pub seed: u64,
    pub config_hash: String,
    pub artifacts: Vec<PathBuf>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = format!(
            "preset = {}\nseed = {}\nconfig_hash = {}\n",
            self.preset, self.seed, self.config_hash
        );
        for a in &self.artifacts {
            let _ = writeln!(s, "artifact = {}", a.display());
        }
        s
    }
}

/// Config file, then flags, then validation.
pub fn resolve_config(opts: &RunOptions) -> Result<HarnessConfig, HarnessError> {
    let mut h = HarnessConfig::default();
    if let Some(path) = &opts.config {
        let entries = read_config(path).map_err(HarnessError::Config)?;
        h.apply(&entries).map_err(HarnessError::Config)?;
    }
    let e = &mut h.experiment;
    if let Some(seed) = opts.seed {
        e.seed = seed;
    }
    if opts.frames == Some(0) {
        return Err(HarnessError::Usage("--frames must be at least 1, got 0".into()));
    }
    let stage1 = opts.preset == Preset::SingleRun && opts.stage.unwrap_or(1) == 1;
    if let Some(frames) = opts.frames {
        if stage1 {
            e.stage1_frames = frames;
        } else {
            e.target_frames = frames;
        }
    }
    if let Some(epochs) = opts.epochs {
        if stage1 {
            e.stage1.epochs = epochs;
        } else {
            e.stage2.epochs = epochs;
        }
    }
    if opts.precision == Some(Precision::F64) && opts.preset != Preset::SingleRun {
        return Err(HarnessError::Usage("--precision f64 is only supported by single_run".into()));
    }
    if opts.preset != Preset::SingleRun && (opts.init.is_some() || opts.stage.is_some()) {
        return Err(HarnessError::Usage("--init and --stage apply to single_run only".into()));
    }
    h.validate().map_err(HarnessError::Config)?;
    Ok(h)
}

/// Run a preset and write its manifest.
pub fn run(opts: &RunOptions) -> Result<Manifest, HarnessError> {
    let h = resolve_config(opts)?;
    let out = opts.out.as_path();
    let files = match opts.preset {
        Preset::AblationTable1 => presets::ablation_table1(&h, out),
        Preset::FrameSweepFig3 => presets::frame_sweep_fig3(&h, out),
        Preset::HeadstartFig4 => presets::headstart_fig4(&h, out),
        Preset::CurriculumAe => presets::curriculum_ae(&h, out),
        Preset::CostTable6 => presets::cost_table6(&h, out),
        Preset::SingleRun => presets::single_run(&h, opts, out),
    }?;
    let manifest = Manifest {
        preset: opts.preset,
        seed: h.experiment.seed,
        config_hash: h.hash(),
        artifacts: files.iter().map(|f| relative(f, out)).collect(),
    };
    metrics::write_file(&out.join("manifest.txt"), &manifest.render()).map_err(HarnessError::Runtime)?;
    Ok(manifest)
}

fn relative(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).unwrap_or(path).to_path_buf()
}
