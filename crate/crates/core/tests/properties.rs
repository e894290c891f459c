use std::collections::BTreeSet;

use proptest::prelude::*;
use sfa_core::checkpoint::{load, save, CheckpointMeta};
use sfa_core::data::DatasetSpec;
use sfa_core::experiments::{curriculum_models, ExperimentConfig};
use sfa_core::harness::{resolve_config, Preset, RunOptions};
use sfa_core::model::{init_store, interpolate_temporal_posemb, FEModel, FEModelConfig, Group, Mode, ParamStore};
use sfa_core::tensor::{Graph, Tensor};
use sfa_core::train::{lr_at, top_k_hit, TrainConfig};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one((rows, cols, v) in (1usize..5, 1usize..9).prop_flat_map(|(r, c)| (Just(r), Just(c), values(r * c)))) {
        let g = Graph::<f64>::inference();
        let y = g.softmax(&Tensor::new(&[rows, cols], v).unwrap()).unwrap();
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_standardizes((rows, cols, v) in (1usize..4, 2usize..12).prop_flat_map(|(r, c)| (Just(r), Just(c), values(r * c)))) {
        let spread = v.chunks(cols).all(|r| {
            let m = r.iter().sum::<f64>() / cols as f64;
            r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / cols as f64 > 1e-3
        });
        prop_assume!(spread);
        let g = Graph::<f64>::inference();
        let gamma = Tensor::new(&[cols], vec![1.0; cols]).unwrap();
        let beta = Tensor::new(&[cols], vec![0.0; cols]).unwrap();
        let y = g.layer_norm(&Tensor::new(&[rows, cols], v).unwrap(), &gamma, &beta, 1e-12).unwrap();
        for row in y.data().chunks(cols) {
            let m = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn top1_never_exceeds_top5(logits in prop::collection::vec(-5.0f64..5.0, 8), label in 0usize..8) {
        prop_assert!(!top_k_hit(&logits, label, 1) || top_k_hit(&logits, label, 5));
        prop_assert!(top_k_hit(&logits, label, 8));
    }

    #[test]
    fn lr_stays_within_bounds(epochs in 1usize..20, warm in 0.0f64..1.0, per_epoch in 1usize..50, lr in 1e-4f64..1.0) {
        let c = TrainConfig { epochs, warmup_epochs: warm * epochs as f64 * 0.99, base_lr: lr, ..TrainConfig::default() };
        let total = epochs * per_epoch;
        let mut prev_after_warmup: Option<f64> = None;
        for s in 0..=total {
            let v = lr_at(s, total, &c);
            prop_assert!((0.0..=lr * (1.0 + 1e-12)).contains(&v));
            if s as f64 >= c.warmup_steps(total) {
                if let Some(p) = prev_after_warmup {
                    prop_assert!(v <= p + 1e-15);
                }
                prev_after_warmup = Some(v);
            }
        }
    }

    #[test]
    fn interpolation_to_the_same_length_is_identity(t in 1usize..20, d in 1usize..8, seed in any::<u64>()) {
        let v: Vec<f64> = (0..t * d).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
        let table = Tensor::new(&[t, d], v).unwrap();
        let out = interpolate_temporal_posemb(&table, t).unwrap();
        prop_assert!(out.bitwise_eq(&table));
    }

    #[test]
    fn checkpoint_roundtrip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..6),
        frozen in prop::collection::btree_set(0usize..4, 0..4),
        seed in any::<u32>(),
    ) {
        let groups = ["spatial", "temporal", "adapter", "head"];
        let mut store = ParamStore::<f32>::new();
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let v: Vec<f32> = (0..n).map(|k| f32::from_bits((seed as u32).wrapping_add(k as u32 * 7919) % 0x7f00_0000)).collect();
            store.insert(format!("{}.p{i}", groups[i % 4]), &Tensor::new(shape, v).unwrap()).unwrap();
        }
        for &g in &frozen {
            store.set_frozen(Group::ALL[g], true);
        }
        let meta = CheckpointMeta::new(FEModelConfig::desk(), "prop", 1.5, u64::from(seed));
        let bytes = save(&store, &meta).unwrap();
        let (back, m) = load::<f32>(&bytes).unwrap();
        prop_assert!(back.bitwise_eq(&store));
        prop_assert_eq!(&m, &meta);
        prop_assert_eq!(save(&back, &m).unwrap(), bytes);
    }

    #[test]
    fn preset_expansion_is_deterministic(seed in any::<u64>(), short in 1usize..4, long in 1usize..6) {
        let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        let a = curriculum_models(&cfg, short, long);
        let b = curriculum_models(&cfg, short, long);
        let key = |m: &[(String, Vec<sfa_core::train::RunSpec>)]| -> Vec<(String, Vec<(String, usize, usize, u64)>)> {
            m.iter()
                .map(|(n, specs)| (n.clone(), specs.iter().map(|s| (s.name.clone(), s.config.num_frames, s.train.epochs, s.train.seed)).collect()))
                .collect()
        };
        prop_assert_eq!(key(&a), key(&b));
        let mut opts = RunOptions::new(Preset::AblationTable1, "unused");
        opts.seed = Some(seed);
        prop_assert_eq!(resolve_config(&opts).unwrap().hash(), resolve_config(&opts).unwrap().hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn gradients_reach_exactly_the_trainable_groups(frozen in prop::collection::btree_set(0usize..4, 0..4), seed in 0u64..100) {
        let cfg = FEModelConfig::desk().with_frames(1);
        let mut store: ParamStore<f32> = init_store(&cfg, Mode::Sfa, seed).unwrap();
        let frozen: BTreeSet<Group> = frozen.into_iter().map(|i| Group::ALL[i]).collect();
        for &g in &frozen {
            store.set_frozen(g, true);
        }
        let data = DatasetSpec::default();
        let clip = sfa_core::data::make_batch::<f32>(&data, sfa_core::data::Split::Train, &[seed as usize], &[0]).unwrap();
        let g = Graph::new();
        let logits = FEModel::new(&cfg, &store).forward(&g, &clip.video, Mode::Sfa).unwrap();
        let loss = g.cross_entropy(&logits, &clip.labels, 0.0).unwrap();
        if frozen.len() == 4 {
            prop_assert!(g.backward(&loss).is_err() || store.iter().all(|(_, t)| !t.has_grad()));
        } else {
            g.backward(&loss).unwrap();
            for (name, t) in store.iter() {
                let group = Group::of(name).unwrap();
                prop_assert_eq!(t.has_grad(), !frozen.contains(&group), "{}", name);
            }
        }
    }
}
