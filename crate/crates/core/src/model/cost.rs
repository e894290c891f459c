//! Analytical FLOP and memory model for one training step.
//!
//! Block FLOPs are multiply-accumulate counts: attention projections
//! `4·n·d²`, attention scores and mixing `2·n²·d`, MLP `2·n·d·m`. Backward
//! costs twice the forward of every trainable group and nothing for frozen
//! ones. Only trainable subgraphs store activations, and only trainable
//! groups carry a gradient buffer and a momentum buffer.

use serde::Serialize;

use super::{count_params, FEModelConfig, Group, Mode};

/// Values kept for backward per token per encoder block:
/// `10·d + 2·m + heads·n` (norm inputs/outputs, q/k/v, attention output,
/// projections, residuals, MLP hidden pre/post activation, attention probs).
fn block_activation_values(cfg: &FEModelConfig, n: u64) -> u64 {
    let (d, m, h) = (cfg.hidden as u64, cfg.mlp_dim as u64, cfg.heads as u64);
    10 * d + 2 * m + h * n
}

fn block_flops(cfg: &FEModelConfig, n: u64) -> u64 {
    let (d, m) = (cfg.hidden as u64, cfg.mlp_dim as u64);
    4 * n * d * d + 2 * n * n * d + 2 * n * d * m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostEstimate {
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub activation_bytes: u64,
    pub param_bytes: u64,
    pub optimizer_bytes: u64,
    /// Gradient buffers for trainable parameters.
    pub gradient_bytes: u64,
    /// Spatial-stage share of `fwd_flops`.
    pub spatial_fwd_flops: u64,
    /// Spatial-stage share of `activation_bytes`.
    pub spatial_activation_bytes: u64,
}

impl CostEstimate {
    /// Peak memory for one step: weights, gradients, momentum, activations.
    pub fn training_bytes(&self) -> u64 {
        self.param_bytes + self.gradient_bytes + self.optimizer_bytes + self.activation_bytes
    }
}

fn trainable(mode: Mode, group: Group) -> bool {
    !(mode == Mode::Sfa && group == Group::Spatial)
}

/// Cost of one training step on `frames`-frame clips. In `Sfa` mode the
/// spatial group is frozen; in `Baseline` mode every group trains.
pub fn estimate_cost(
    cfg: &FEModelConfig,
    mode: Mode,
    frames: usize,
    local_batch: usize,
    bytes_per_value: usize,
) -> CostEstimate {
    let cfg = cfg.clone().with_frames(frames);
    let (b, t) = (local_batch as u64, frames as u64);
    let d = cfg.hidden as u64;
    let bpv = bytes_per_value as u64;
    let patches = cfg.num_patches() as u64;
    let n_s = patches + 1;
    let n_t = t + 1;

    let spatial_per_frame =
        patches * cfg.patch_dim() as u64 * d + cfg.spatial_depth as u64 * block_flops(&cfg, n_s);
    let spatial = b * t * spatial_per_frame;
    let temporal = b * cfg.temporal_depth as u64 * block_flops(&cfg, n_t);
    let adapter = match mode {
        Mode::Sfa => b * t * 2 * d * cfg.adapter_hidden as u64,
        Mode::Baseline => 0,
    };
    let head = b * d * cfg.num_classes as u64;

    let per_group = [
        (Group::Spatial, spatial),
        (Group::Temporal, temporal),
        (Group::Adapter, adapter),
        (Group::Head, head),
    ];
    let fwd_flops = per_group.iter().map(|(_, f)| f).sum();
    let bwd_flops = per_group
        .iter()
        .filter(|(g, _)| trainable(mode, *g))
        .map(|(_, f)| 2 * f)
        .sum();

    let spatial_act = if trainable(mode, Group::Spatial) {
        b * t
            * (patches * cfg.patch_dim() as u64
                + cfg.spatial_depth as u64 * n_s * block_activation_values(&cfg, n_s))
    } else {
        0
    };
    let temporal_act = b * cfg.temporal_depth as u64 * n_t * block_activation_values(&cfg, n_t)
        + b * t * d;
    let adapter_act = match mode {
        Mode::Sfa => b * t * (d + 2 * cfg.adapter_hidden as u64),
        Mode::Baseline => 0,
    };
    let head_act = b * d;

    let counts = count_params(&cfg, mode);
    let total: u64 = counts.values().map(|&c| c as u64).sum();
    let trainable_params: u64 = counts
        .iter()
        .filter(|(g, _)| trainable(mode, **g))
        .map(|(_, &c)| c as u64)
        .sum();

    CostEstimate {
        fwd_flops,
        bwd_flops,
        activation_bytes: (spatial_act + temporal_act + adapter_act + head_act) * bpv,
        param_bytes: total * bpv,
        optimizer_bytes: trainable_params * bpv,
        gradient_bytes: trainable_params * bpv,
        spatial_fwd_flops: spatial,
        spatial_activation_bytes: spatial_act * bpv,
    }
}

/// Frame counts probed by the feasibility grid.
pub const FRAME_GRID: [usize; 8] = [4, 8, 16, 32, 48, 64, 96, 128];

/// One row of the frame-capacity table.
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityRow {
    pub model: String,
    pub mode: Mode,
    /// `(frames, fits)` for every grid entry.
    pub cells: Vec<(usize, bool)>,
}

impl FeasibilityRow {
    /// Largest grid frame count that fits, if any.
    pub fn max_frames(&self) -> Option<usize> {
        self.cells.iter().filter(|(_, ok)| *ok).map(|(f, _)| *f).max()
    }
}

pub fn feasibility(
    cfg: &FEModelConfig,
    mode: Mode,
    grid: &[usize],
    local_batch: usize,
    bytes_per_value: usize,
    budget_bytes: u64,
) -> FeasibilityRow {
    FeasibilityRow {
        model: cfg.variant_name.clone(),
        mode,
        cells: grid
            .iter()
            .map(|&f| {
                let c = estimate_cost(cfg, mode, f, local_batch, bytes_per_value);
                (f, c.training_bytes() <= budget_bytes)
            })
            .collect(),
    }
}
