//! Parameter transfer between training stages and the ablation variants.

use serde::{Deserialize, Serialize};

use super::format::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{
    init_adapter, init_head, init_spatial, init_temporal, interpolate_temporal_posemb,
    FEModelConfig, Group, Mode, ParamStore,
};
use crate::tensor::Real;

/// What to do with the classifier head when moving to a new stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPolicy {
    Copy,
    Reinit,
}

impl std::str::FromStr for HeadPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(HeadPolicy::Copy),
            "reinit" => Ok(HeadPolicy::Reinit),
            other => Err(Error::Config(format!("unknown head policy `{other}`"))),
        }
    }
}

/// Copy the temporal group, resampling its positional table to
/// `target.num_frames`.
fn transfer_temporal<F: Real>(
    dst: &mut ParamStore<F>,
    src: &ParamStore<F>,
    target: &FEModelConfig,
) -> Result<()> {
    for (name, t) in src.group_iter(Group::Temporal) {
        if name == "temporal.pos_embed" {
            dst.insert(name, &interpolate_temporal_posemb(t, target.num_frames)?)?;
        } else {
            dst.insert(name, t)?;
        }
    }
    Ok(())
}

/// Stage-2 parameters from a Stage-1 store.
///
/// The spatial group is copied and frozen, the temporal group is copied with
/// its positional table resampled to the target frame count, a fresh
/// identity adapter is inserted and the head is copied or re-created.
pub fn surgery_stage2_init<F: Real>(
    source: &ParamStore<F>,
    source_config: &FEModelConfig,
    target: &FEModelConfig,
    head: HeadPolicy,
    seed: u64,
) -> Result<ParamStore<F>> {
    target.validate()?;
    let diff = source_config.architecture_diff(target, head == HeadPolicy::Copy);
    if !diff.is_empty() {
        return Err(Error::Surgery(diff));
    }
    if !source.has_group(Group::Spatial) {
        return Err(Error::MissingGroup("spatial"));
    }
    if !source.has_group(Group::Temporal) {
        return Err(Error::MissingGroup("temporal"));
    }

    let mut out = ParamStore::new();
    out.copy_group_from(source, Group::Spatial)?;
    transfer_temporal(&mut out, source, target)?;
    init_adapter(&mut out, target, seed)?;
    match head {
        HeadPolicy::Copy => {
            if !source.has_group(Group::Head) {
                return Err(Error::MissingGroup("head"));
            }
            out.copy_group_from(source, Group::Head)?;
        }
        HeadPolicy::Reinit => init_head(&mut out, target, seed)?,
    }
    out.set_frozen(Group::Spatial, true);
    Ok(out)
}

/// [`surgery_stage2_init`] reading the source architecture from the
/// checkpoint metadata.
pub fn surgery_from_checkpoint<F: Real>(
    stage1: &Checkpoint,
    target: &FEModelConfig,
    head: HeadPolicy,
    seed: u64,
) -> Result<ParamStore<F>> {
    surgery_stage2_init(&stage1.params(), &stage1.meta.config, target, head, seed)
}

/// Rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "baseline")]
    Baseline,
    /// Frozen image-initialized spatial stage, random temporal stage.
    I,
    /// Trainable spatial stage, frozen random temporal stage.
    II,
    /// Variant I plus an identity adapter.
    III,
    /// Full two-stage transfer.
    V,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Baseline,
        AblationVariant::I,
        AblationVariant::II,
        AblationVariant::III,
        AblationVariant::V,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::I => "I",
            AblationVariant::II => "II",
            AblationVariant::III => "III",
            AblationVariant::V => "V",
        }
    }

    /// Forward mode the variant's store supports.
    pub fn mode(self) -> Mode {
        match self {
            AblationVariant::III | AblationVariant::V => Mode::Sfa,
            _ => Mode::Baseline,
        }
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

/// Inputs an ablation variant may draw from.
#[derive(Debug, Clone, Copy, Default)]
pub struct AblationSources<'a, F: Real> {
    /// Spatial-only image-pretrained parameters. When absent, a seeded
    /// random spatial group stands in.
    pub image_spatial: Option<&'a ParamStore<F>>,
    /// Stage-1 parameters and their architecture, required by variant V.
    pub stage1: Option<(&'a ParamStore<F>, &'a FEModelConfig)>,
}

/// Parameters for one ablation row on `config`.
pub fn ablation_init<F: Real>(
    variant: AblationVariant,
    sources: AblationSources<'_, F>,
    config: &FEModelConfig,
    seed: u64,
) -> Result<ParamStore<F>> {
    config.validate()?;
    if variant == AblationVariant::V {
        let (store, src_cfg) = sources
            .stage1
            .ok_or_else(|| Error::MissingSource("variant V needs a Stage-1 checkpoint".into()))?;
        let head = if src_cfg.num_classes == config.num_classes {
            HeadPolicy::Copy
        } else {
            HeadPolicy::Reinit
        };
        return surgery_stage2_init(store, src_cfg, config, head, seed);
    }

    let mut out = ParamStore::new();
    match sources.image_spatial {
        Some(src) => {
            if !src.has_group(Group::Spatial) {
                return Err(Error::MissingGroup("spatial"));
            }
            out.copy_group_from(src, Group::Spatial)?;
        }
        None => init_spatial(&mut out, config, seed)?,
    }
    init_temporal(&mut out, config, seed)?;
    init_head(&mut out, config, seed)?;
    match variant {
        AblationVariant::Baseline => {}
        AblationVariant::I => out.set_frozen(Group::Spatial, true),
        AblationVariant::II => out.set_frozen(Group::Temporal, true),
        AblationVariant::III => {
            init_adapter(&mut out, config, seed)?;
            out.set_frozen(Group::Spatial, true);
        }
        AblationVariant::V => unreachable!(),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_store;

    #[test]
    fn missing_stage1_is_an_error() {
        let cfg = FEModelConfig::desk();
        let r = ablation_init::<f32>(AblationVariant::V, AblationSources::default(), &cfg, 0);
        assert!(matches!(r, Err(Error::MissingSource(_))));
    }

    #[test]
    fn width_mismatch_lists_fields() {
        let src_cfg = FEModelConfig::desk();
        let src = init_store::<f32>(&src_cfg, Mode::Baseline, 0).unwrap();
        let mut target = src_cfg.clone();
        target.hidden = 32;
        target.mlp_dim = 128;
        target.adapter_hidden = 32;
        match surgery_stage2_init(&src, &src_cfg, &target, HeadPolicy::Copy, 0) {
            Err(Error::Surgery(fields)) => {
                assert!(fields.iter().any(|f| f.contains("hidden")));
                assert!(fields.iter().any(|f| f.contains("mlp_dim")));
            }
            other => panic!("expected surgery error, got {other:?}"),
        }
    }

    #[test]
    fn variant_flags() {
        let cfg = FEModelConfig::desk();
        let none = AblationSources::<f32>::default();
        let ii = ablation_init(AblationVariant::II, none, &cfg, 1).unwrap();
        assert!(ii.is_frozen(Group::Temporal) && !ii.is_frozen(Group::Spatial));
        let i = ablation_init(AblationVariant::I, none, &cfg, 1).unwrap();
        assert!(!i.has_group(Group::Adapter) && i.is_frozen(Group::Spatial));
        let iii = ablation_init(AblationVariant::III, none, &cfg, 1).unwrap();
        assert!(iii.has_group(Group::Adapter) && iii.is_frozen(Group::Spatial));
    }
}
