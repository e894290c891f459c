//! Factorised-encoder video transformer: config, parameters, forward pass
//! and analytical cost model.

mod config;
pub mod cost;
mod fe;
mod params;

use std::collections::BTreeMap;

pub use config::FEModelConfig;
pub use fe::{interpolate_temporal_posemb, patchify, FEModel, Mode, LN_EPS};
pub use params::{
    init_adapter, init_head, init_spatial, init_temporal, record_seed, trunc_normal, Group,
    ParamStore, INIT_STD, TOKEN_STD,
};

pub(crate) use params::splitmix64;

use crate::error::Result;
use crate::tensor::Real;

/// Fully fresh parameters for `mode` (the adapter group only in `Sfa`).
pub fn init_store<F: Real>(cfg: &FEModelConfig, mode: Mode, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    init_spatial(&mut store, cfg, seed)?;
    init_temporal(&mut store, cfg, seed)?;
    if mode == Mode::Sfa {
        init_adapter(&mut store, cfg, seed)?;
    }
    init_head(&mut store, cfg, seed)?;
    Ok(store)
}

/// Parameters in one pre-norm encoder block (attention, MLP, two norms).
pub fn block_params(hidden: usize, mlp: usize) -> usize {
    let (d, m) = (hidden, mlp);
    (4 * d * d + 4 * d) + (2 * d * m + d + m) + 4 * d
}

/// Closed-form parameter count per group.
pub fn count_params(cfg: &FEModelConfig, mode: Mode) -> BTreeMap<Group, usize> {
    let d = cfg.hidden;
    let block = block_params(d, cfg.mlp_dim);
    let spatial = cfg.patch_dim() * d
        + d
        + d
        + (cfg.num_patches() + 1) * d
        + cfg.spatial_depth * block
        + 2 * d;
    let temporal = d + cfg.num_frames * d + cfg.temporal_depth * block + 2 * d;
    let head = d * cfg.num_classes + cfg.num_classes;
    let mut out = BTreeMap::from([
        (Group::Spatial, spatial),
        (Group::Temporal, temporal),
        (Group::Head, head),
    ]);
    if mode == Mode::Sfa {
        let a = cfg.adapter_hidden;
        out.insert(Group::Adapter, d * a + a + a * d + d);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_closed_form() {
        let (d, m) = (64, 256);
        assert_eq!(block_params(d, m), 4 * d * d + 4 * d + 2 * d * m + d + m + 4 * d);
    }

    #[test]
    fn adapter_count_for_desk_width() {
        let counts = count_params(&FEModelConfig::desk(), Mode::Sfa);
        assert_eq!(counts[&Group::Adapter], 8320);
        assert!(!count_params(&FEModelConfig::desk(), Mode::Baseline).contains_key(&Group::Adapter));
    }

    #[test]
    fn closed_form_matches_allocation() {
        for mode in [Mode::Baseline, Mode::Sfa] {
            let cfg = FEModelConfig::desk();
            let store = init_store::<f32>(&cfg, mode, 0).unwrap();
            assert_eq!(store.numel_by_group(), count_params(&cfg, mode));
        }
    }
}
