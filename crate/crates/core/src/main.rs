use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use sfa_core::checkpoint::HeadPolicy;
use sfa_core::harness::{run, Preset, RunOptions};
use sfa_core::tensor::Precision;

/// Train and evaluate factorised-encoder video models on the synthetic
/// motion task.
#[derive(Parser, Debug)]
#[command(name = "sfa", version)]
struct Args {
    /// ablation_table1, frame_sweep_fig3, headstart_fig4, curriculum_ae,
    /// cost_table6 or single_run.
    #[arg(long)]
    preset: Preset,
    /// `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Clip length of the run (Stage 1 for single_run --stage 1).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// single_run only: 1 or 2.
    #[arg(long)]
    stage: Option<u8>,
    /// single_run only: source checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    head: Option<HeadPolicy>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        preset: args.preset,
        config: args.config,
        seed: args.seed,
        frames: args.frames,
        epochs: args.epochs,
        stage: args.stage,
        init: args.init,
        out: args.out,
        precision: args.precision,
        head: args.head,
    };
    match run(&opts) {
        Ok(m) => {
            println!("{}", m.render().trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
