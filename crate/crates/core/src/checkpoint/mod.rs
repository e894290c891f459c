//! Checkpoint serialization and stage-to-stage parameter transfer.

mod format;
mod surgery;

pub use format::{load, save, Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use surgery::{
    ablation_init, surgery_from_checkpoint, surgery_stage2_init, AblationSources,
    AblationVariant, HeadPolicy,
};
