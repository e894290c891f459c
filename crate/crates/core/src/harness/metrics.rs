use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::RunMetrics;

/// Format with six significant digits, `%g` style: fixed notation for
/// moderate magnitudes, exponent otherwise, trailing zeros dropped.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    JsonLines,
}

impl std::str::FromStr for MetricsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "jsonl" | "json-lines" => Ok(MetricsFormat::JsonLines),
            other => Err(Error::Config(format!("unknown metrics format `{other}`"))),
        }
    }
}

/// Step log as `step,loss,lr` rows.
pub fn steps_csv(m: &RunMetrics) -> String {
    let mut out = String::from("step,loss,lr\n");
    for s in &m.steps {
        let _ = writeln!(out, "{},{},{}", s.step, fmt_sig(s.loss), fmt_sig(s.lr));
    }
    out
}

/// Eval log as `epoch,top1,top5,wall_seconds` rows.
pub fn evals_csv(m: &RunMetrics) -> String {
    let mut out = String::from("epoch,top1,top5,wall_seconds\n");
    for e in &m.evals {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_sig(e.epoch),
            fmt_sig(e.top1),
            fmt_sig(e.top5),
            fmt_sig(e.wall_seconds)
        );
    }
    out
}

pub fn steps_jsonl(m: &RunMetrics) -> String {
    m.steps
        .iter()
        .map(|s| {
            format!(
                "{{\"step\":{},\"loss\":{},\"lr\":{}}}\n",
                s.step,
                fmt_sig(s.loss),
                fmt_sig(s.lr)
            )
        })
        .collect()
}

pub fn evals_jsonl(m: &RunMetrics) -> String {
    m.evals
        .iter()
        .map(|e| {
            format!(
                "{{\"epoch\":{},\"top1\":{},\"top5\":{},\"wall_seconds\":{}}}\n",
                fmt_sig(e.epoch),
                fmt_sig(e.top1),
                fmt_sig(e.top5),
                fmt_sig(e.wall_seconds)
            )
        })
        .collect()
}

pub fn write_file(path: &Path, contents: &str) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Write the step and eval logs of one run as `<stem>_steps.<ext>` and
/// `<stem>_evals.<ext>`.
pub fn emit_metrics(m: &RunMetrics, dir: &Path, stem: &str, format: MetricsFormat) -> Result<Vec<PathBuf>> {
    let (ext, steps, evals) = match format {
        MetricsFormat::Csv => ("csv", steps_csv(m), evals_csv(m)),
        MetricsFormat::JsonLines => ("jsonl", steps_jsonl(m), evals_jsonl(m)),
    };
    Ok(vec![
        write_file(&dir.join(format!("{stem}_steps.{ext}")), &steps)?,
        write_file(&dir.join(format!("{stem}_evals.{ext}")), &evals)?,
    ])
}
