mod common;

use common::*;
use sfa_core::checkpoint::{
    ablation_init, load, save, surgery_stage2_init, AblationSources, AblationVariant, Checkpoint, CheckpointMeta,
    HeadPolicy, MAGIC,
};
use sfa_core::data::DatasetSpec;
use sfa_core::model::{init_spatial, init_store, FEModel, FEModelConfig, Group, Mode, ParamStore};
use sfa_core::tensor::{Graph, Tensor};
use sfa_core::train::{run_stage, TrainConfig};
use sfa_core::Error;

fn meta(cfg: &FEModelConfig) -> CheckpointMeta {
    CheckpointMeta::new(cfg.clone(), "stage1", 3.0, 11)
}

fn stage1(frames: usize, seed: u64) -> (FEModelConfig, ParamStore<f32>) {
    let cfg = FEModelConfig::desk().with_frames(frames);
    let store = init_store(&cfg, Mode::Baseline, seed).unwrap();
    (cfg, store)
}

fn clip(frames: usize, batch: usize, seed: u64) -> Tensor<f32> {
    let n = batch * frames * 32 * 32;
    Tensor::new(&[batch, frames, 32, 32, 1], uniform(seed, n, 1.0).into_iter().map(|v| v as f32).collect()).unwrap()
}

#[test]
fn roundtrip_is_bitwise_and_deterministic() {
    let (cfg, mut store) = stage1(8, 1);
    store.set_frozen(Group::Spatial, true);
    let bytes = save(&store, &meta(&cfg)).unwrap();
    assert_eq!(&bytes[..5], MAGIC);
    assert_eq!(bytes, save(&store, &meta(&cfg)).unwrap());
    let (back, m) = load::<f32>(&bytes).unwrap();
    assert!(back.bitwise_eq(&store));
    assert_eq!(m, meta(&cfg));
    assert!(back.is_frozen(Group::Spatial));
    assert_eq!(back.numel_by_group(), store.numel_by_group());

    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint::from_store(&store, meta(&cfg));
    ckpt.write_file(dir.path().join("a.sfa")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.sfa")).unwrap(), bytes);
    let missing = Checkpoint::read_file(dir.path().join("missing.sfa")).unwrap_err();
    assert!(missing.to_string().contains("missing.sfa"), "{missing}");
}

#[test]
fn records_are_sorted_by_name() {
    let (cfg, store) = stage1(2, 2);
    let names: Vec<&str> = store.names().collect();
    let mut sorted = names.clone();
    sorted.sort_unstable();
    assert_eq!(names, sorted);
    let bytes = save(&store, &meta(&cfg)).unwrap();
    let first = names[0].as_bytes();
    let pos = bytes.windows(first.len()).rposition(|w| w == first).unwrap();
    let second = names[1].as_bytes();
    assert!(bytes.windows(second.len()).rposition(|w| w == second).unwrap() > pos);
}

#[test]
fn corrupted_streams_raise_distinct_errors() {
    let (cfg, store) = stage1(2, 3);
    let bytes = save(&store, &meta(&cfg)).unwrap();

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(load::<f32>(&bad), Err(Error::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[5] = 2;
    assert!(matches!(load::<f32>(&bad), Err(Error::UnsupportedVersion(2))));

    let err = load::<f32>(&bytes[..bytes.len() - 3]).unwrap_err();
    let last = store.names().last().unwrap().to_string();
    assert!(matches!(err, Error::Truncated(ref what) if what.contains(&last)), "{err}");

    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(matches!(load::<f32>(&long), Err(Error::LengthMismatch { found, declared, .. }) if found == declared + 2));

    // Rename a record to a name outside every group, keeping its length.
    let name = b"head.bias";
    let mut bad = bytes.clone();
    let at = bad.windows(name.len()).rposition(|w| w == name).unwrap();
    bad[at..at + 4].copy_from_slice(b"tail");
    assert!(matches!(load::<f32>(&bad), Err(Error::UnknownGroup(ref n)) if n == "tail.bias"));
}

#[test]
fn surgery_at_same_length_is_the_stage1_function() {
    let (cfg, store) = stage1(8, 4);
    let s2 = surgery_stage2_init(&store, &cfg, &cfg, HeadPolicy::Copy, 0).unwrap();
    assert!(s2.is_frozen(Group::Spatial));
    assert!(!s2.is_frozen(Group::Temporal) && !s2.is_frozen(Group::Adapter) && !s2.is_frozen(Group::Head));
    let x = clip(8, 3, 5);
    let g = Graph::inference();
    let a = FEModel::new(&cfg, &store).forward(&g, &x, Mode::Baseline).unwrap();
    let b = FEModel::new(&cfg, &s2).forward(&g, &x, Mode::Sfa).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn surgery_scope_when_frames_change() {
    let (cfg, store) = stage1(8, 6);
    let target = cfg.clone().with_frames(16);
    let s2 = surgery_stage2_init(&store, &cfg, &target, HeadPolicy::Copy, 0).unwrap();
    for (name, t) in store.iter() {
        let u = s2.get(name).unwrap();
        if name == "temporal.pos_embed" {
            assert_eq!(u.shape(), [16, 64]);
        } else {
            assert!(u.bitwise_eq(t), "{name} changed");
        }
    }
    let fc2 = s2.get("adapter.fc2.weight").unwrap();
    assert!(fc2.data().iter().all(|&v| v == 0.0));
    let fc1 = s2.get("adapter.fc1.weight").unwrap().data();
    let std = (fc1.iter().map(|v| v * v).sum::<f32>() / fc1.len() as f32).sqrt();
    assert!((0.015..0.025).contains(&std), "adapter fc1 std {std}");

    // Idempotence.
    let again = surgery_stage2_init(&store, &cfg, &target, HeadPolicy::Copy, 0).unwrap();
    assert!(again.bitwise_eq(&s2));
}

#[test]
fn head_reinit_for_new_class_count() {
    let (cfg, store) = stage1(8, 7);
    let target = cfg.clone().with_classes(7);
    assert!(matches!(
        surgery_stage2_init(&store, &cfg, &target, HeadPolicy::Copy, 0),
        Err(Error::Surgery(ref f)) if f.iter().any(|s| s.contains("num_classes"))
    ));
    let s2 = surgery_stage2_init(&store, &cfg, &target, HeadPolicy::Reinit, 0).unwrap();
    assert_eq!(s2.get("head.weight").unwrap().shape(), [64, 7]);
    let x = clip(8, 2, 8);
    let g = Graph::inference();
    let m1 = FEModel::new(&cfg, &store);
    let m2 = FEModel::new(&target, &s2);
    let f1 = m1.frame_features(&g, &x, Mode::Baseline).unwrap();
    let f2 = m2.frame_features(&g, &x, Mode::Baseline).unwrap();
    assert_eq!(f1.data(), f2.data());
    assert_eq!(m2.forward(&g, &x, Mode::Sfa).unwrap().shape(), [2, 7]);
}

#[test]
fn width_mismatch_lists_fields() {
    let (cfg, store) = stage1(8, 9);
    let mut target = cfg.clone();
    target.hidden = 32;
    target.temporal_depth = 3;
    let Err(Error::Surgery(fields)) = surgery_stage2_init(&store, &cfg, &target, HeadPolicy::Copy, 0) else {
        panic!("expected a surgery error");
    };
    assert!(fields.iter().any(|f| f.contains("hidden")) && fields.iter().any(|f| f.contains("temporal_depth")));
}

fn tiny_data() -> DatasetSpec {
    DatasetSpec { train_per_class: 2, eval_per_class: 1, ..DatasetSpec::default() }
}

fn one_step() -> TrainConfig {
    TrainConfig { epochs: 1, local_batch: 16, warmup_epochs: 0.0, eval_batch: 8, ..TrainConfig::default() }
}

#[test]
fn ablation_variants_follow_their_freeze_rules() {
    let cfg = FEModelConfig::desk().with_frames(2);
    let mut image = ParamStore::<f32>::new();
    init_spatial(&mut image, &cfg, 100).unwrap();
    let (s1cfg, s1) = stage1(2, 10);
    let sources = AblationSources { image_spatial: Some(&image), stage1: Some((&s1, &s1cfg)) };

    let mut ii = ablation_init(AblationVariant::II, sources, &cfg, 0).unwrap();
    let before = ii.clone();
    let flags = ii.freeze_flags();
    let m = run_stage(&cfg, Mode::Baseline, &mut ii, &tiny_data(), &one_step(), &flags).unwrap();
    assert_eq!(m.steps.len(), 1);
    for (name, t) in before.iter() {
        let after = ii.get(name).unwrap();
        match Group::of(name).unwrap() {
            Group::Temporal => assert!(after.bitwise_eq(t), "{name}"),
            Group::Spatial if name.ends_with("weight") => assert!(!after.bitwise_eq(t), "{name}"),
            _ => {}
        }
    }

    let i = ablation_init(AblationVariant::I, sources, &cfg, 0).unwrap();
    assert!(!i.has_group(Group::Adapter) && i.is_frozen(Group::Spatial));
    let x = clip(2, 1, 11);
    let g = Graph::inference();
    assert!(FEModel::new(&cfg, &i).forward(&g, &x, Mode::Sfa).is_err());
    assert!(FEModel::new(&cfg, &i).forward(&g, &x, Mode::Baseline).is_ok());

    let iii = ablation_init(AblationVariant::III, sources, &cfg, 0).unwrap();
    assert!(iii.has_group(Group::Adapter) && iii.is_frozen(Group::Spatial));
    for (name, t) in image.iter() {
        assert!(iii.get(name).unwrap().bitwise_eq(t));
    }

    let v = ablation_init(AblationVariant::V, sources, &cfg, 0).unwrap();
    let direct = surgery_stage2_init(&s1, &s1cfg, &cfg, HeadPolicy::Copy, 0).unwrap();
    assert!(v.bitwise_eq(&direct));

    let base = ablation_init(AblationVariant::Baseline, sources, &cfg, 0).unwrap();
    assert!(Group::ALL.iter().all(|&gr| !base.is_frozen(gr)) && !base.has_group(Group::Adapter));

    let none = AblationSources { image_spatial: Some(&image), stage1: None };
    assert!(matches!(ablation_init(AblationVariant::V, none, &cfg, 0), Err(Error::MissingSource(_))));
}
