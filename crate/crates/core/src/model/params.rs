use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::FEModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Parameter group. Every parameter name starts with its group prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Spatial,
    Temporal,
    Adapter,
    Head,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Spatial, Group::Temporal, Group::Adapter, Group::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Spatial => "spatial",
            Group::Temporal => "temporal",
            Group::Adapter => "adapter",
            Group::Head => "head",
        }
    }

    /// Group owning the parameter `name`, from its prefix.
    pub fn of(name: &str) -> Option<Group> {
        name.split('.').next().and_then(|p| p.parse().ok())
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Group::Spatial),
            "temporal" => Ok(Group::Temporal),
            "adapter" => Ok(Group::Adapter),
            "head" => Ok(Group::Head),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }
}

/// Named model parameters with per-group freeze flags.
///
/// Frozen groups hold tensors with `requires_grad == false`, so they never
/// enter the tape.
#[derive(Clone)]
pub struct ParamStore<F: Real> {
    params: BTreeMap<String, Tensor<F>>,
    frozen: BTreeSet<Group>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> fmt::Debug for ParamStore<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.params.len())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Insert (or replace) a parameter; its grad flag follows the group's
    /// freeze state.
    pub fn insert(&mut self, name: impl Into<String>, values: &Tensor<F>) -> Result<()> {
        let name = name.into();
        let group = Group::of(&name).ok_or_else(|| Error::UnknownGroup(name.clone()))?;
        let trainable = !self.frozen.contains(&group);
        self.params.insert(name, values.detached(trainable));
        Ok(())
    }

    /// Insert a tensor handle as-is, without detaching it. Used to route
    /// gradients to externally owned leaves such as gradient-check inputs.
    pub fn insert_shared(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        Group::of(&name).ok_or_else(|| Error::UnknownGroup(name.clone()))?;
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn group_iter(&self, group: Group) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.iter().filter(move |(n, _)| Group::of(n) == Some(group))
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.group_iter(group).next().is_some()
    }

    pub fn remove_group(&mut self, group: Group) {
        self.params.retain(|n, _| Group::of(n) != Some(group));
        self.frozen.remove(&group);
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = Group> + '_ {
        self.frozen.iter().copied()
    }

    /// Freeze or unfreeze a group, rebuilding its leaves with the new flag.
    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        if frozen {
            self.frozen.insert(group);
        } else {
            self.frozen.remove(&group);
        }
        for (name, t) in self.params.iter_mut() {
            if Group::of(name) == Some(group) && t.requires_grad() == frozen {
                *t = t.detached(!frozen);
            }
        }
    }

    pub fn freeze_flags(&self) -> BTreeMap<Group, bool> {
        Group::ALL
            .iter()
            .filter(|g| self.has_group(**g))
            .map(|&g| (g, self.is_frozen(g)))
            .collect()
    }

    /// Element count per group present in the store.
    pub fn numel_by_group(&self) -> BTreeMap<Group, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in self.iter() {
            if let Some(g) = Group::of(name) {
                *out.entry(g).or_insert(0) += t.numel();
            }
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn clear_grads(&self) {
        self.params.values().for_each(Tensor::clear_grad);
    }

    /// Copy of the store in another element type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<G>()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Copy every parameter of `group` from `other`.
    pub fn copy_group_from(&mut self, other: &ParamStore<F>, group: Group) -> Result<()> {
        for (name, t) in other.group_iter(group) {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// True when both stores hold identical names, shapes and bits.
    pub fn bitwise_eq(&self, other: &ParamStore<F>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }
}

/// Stable 64-bit mix of a global seed and a record name.
pub fn record_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(h ^ splitmix64(seed))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard deviation of the adapter's first layer.
pub const INIT_STD: f64 = 0.02;

/// Standard deviation of class tokens and positional tables. These are
/// added to unit-scale token streams, so they start at the same scale.
pub const TOKEN_STD: f64 = 1.0;

/// Truncated normal (±2σ) values seeded from `(seed, name)`.
pub fn trunc_normal<F: Real>(seed: u64, name: &str, shape: &[usize], std: f64) -> Result<Tensor<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, name));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n: usize = shape.iter().product();
    let mut values = Vec::with_capacity(n);
    while values.len() < n {
        let z: f64 = normal.sample(&mut rng);
        if z.abs() <= 2.0 {
            values.push(F::from_f64_lossy(z * std));
        }
    }
    Tensor::new(shape, values)
}

fn filled<F: Real>(shape: &[usize], v: f64) -> Result<Tensor<F>> {
    Tensor::new(shape, vec![F::from_f64_lossy(v); shape.iter().product()])
}

fn push_layer_norm<F: Real>(store: &mut ParamStore<F>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), &filled(&[d], 1.0)?)?;
    store.insert(format!("{prefix}.beta"), &filled(&[d], 0.0)?)
}

/// Weight `[fan_in, fan_out]` with std `1/√fan_in` (unless `std` is
/// given) and a zero bias.
fn push_linear<F: Real>(
    store: &mut ParamStore<F>,
    seed: u64,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: Option<f64>,
) -> Result<()> {
    let wname = format!("{prefix}.weight");
    let std = std.unwrap_or(1.0 / (fan_in as f64).sqrt());
    store.insert(&wname, &trunc_normal(seed, &wname, &[fan_in, fan_out], std)?)?;
    store.insert(format!("{prefix}.bias"), &filled(&[fan_out], 0.0)?)
}

fn push_encoder<F: Real>(
    store: &mut ParamStore<F>,
    seed: u64,
    prefix: &str,
    cfg: &FEModelConfig,
    depth: usize,
) -> Result<()> {
    let (d, m) = (cfg.hidden, cfg.mlp_dim);
    for i in 0..depth {
        let p = format!("{prefix}.blocks.{i}");
        push_layer_norm(store, &format!("{p}.ln1"), d)?;
        for proj in ["q", "k", "v", "o"] {
            push_linear(store, seed, &format!("{p}.attn.{proj}"), d, d, None)?;
        }
        push_layer_norm(store, &format!("{p}.ln2"), d)?;
        push_linear(store, seed, &format!("{p}.mlp.fc1"), d, m, None)?;
        push_linear(store, seed, &format!("{p}.mlp.fc2"), m, d, None)?;
    }
    push_layer_norm(store, &format!("{prefix}.ln_final"), d)
}

/// Freshly initialized spatial group.
pub fn init_spatial<F: Real>(store: &mut ParamStore<F>, cfg: &FEModelConfig, seed: u64) -> Result<()> {
    let d = cfg.hidden;
    push_linear(store, seed, "spatial.patch_embed", cfg.patch_dim(), d, None)?;
    store.insert("spatial.cls_token", &trunc_normal(seed, "spatial.cls_token", &[d], TOKEN_STD)?)?;
    store.insert(
        "spatial.pos_embed",
        &trunc_normal(seed, "spatial.pos_embed", &[cfg.num_patches() + 1, d], TOKEN_STD)?,
    )?;
    push_encoder(store, seed, "spatial", cfg, cfg.spatial_depth)
}

/// Freshly initialized temporal group for `cfg.num_frames` frames.
pub fn init_temporal<F: Real>(store: &mut ParamStore<F>, cfg: &FEModelConfig, seed: u64) -> Result<()> {
    let d = cfg.hidden;
    store.insert("temporal.cls_token", &trunc_normal(seed, "temporal.cls_token", &[d], TOKEN_STD)?)?;
    store.insert(
        "temporal.pos_embed",
        &trunc_normal(seed, "temporal.pos_embed", &[cfg.num_frames, d], TOKEN_STD)?,
    )?;
    push_encoder(store, seed, "temporal", cfg, cfg.temporal_depth)
}

/// Identity-initialized adapter: random first layer, all-zero second layer.
pub fn init_adapter<F: Real>(store: &mut ParamStore<F>, cfg: &FEModelConfig, seed: u64) -> Result<()> {
    let (d, a) = (cfg.hidden, cfg.adapter_hidden);
    push_linear(store, seed, "adapter.fc1", d, a, Some(INIT_STD))?;
    store.insert("adapter.fc2.weight", &filled(&[a, d], 0.0)?)?;
    store.insert("adapter.fc2.bias", &filled(&[d], 0.0)?)
}

/// Classifier with a random weight and a zero bias.
pub fn init_head<F: Real>(store: &mut ParamStore<F>, cfg: &FEModelConfig, seed: u64) -> Result<()> {
    push_linear(store, seed, "head", cfg.hidden, cfg.num_classes, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_prefixes() {
        assert_eq!(Group::of("spatial.blocks.0.ln1.gamma"), Some(Group::Spatial));
        assert_eq!(Group::of("head.weight"), Some(Group::Head));
        assert_eq!(Group::of("decoder.weight"), None);
    }

    #[test]
    fn init_is_order_independent() {
        let a = trunc_normal::<f32>(7, "temporal.cls_token", &[64], 1.0).unwrap();
        let _ = trunc_normal::<f32>(7, "spatial.cls_token", &[64], 1.0).unwrap();
        let b = trunc_normal::<f32>(7, "temporal.cls_token", &[64], 1.0).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.data().iter().all(|v| v.abs() <= 2.0));
        let c = trunc_normal::<f32>(8, "temporal.cls_token", &[64], 1.0).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn freezing_rebuilds_leaves() {
        let cfg = FEModelConfig::desk();
        let mut store = ParamStore::<f32>::new();
        init_spatial(&mut store, &cfg, 0).unwrap();
        init_head(&mut store, &cfg, 0).unwrap();
        store.set_frozen(Group::Spatial, true);
        assert!(store.group_iter(Group::Spatial).all(|(_, t)| !t.requires_grad()));
        assert!(store.group_iter(Group::Head).all(|(_, t)| t.requires_grad()));
        // Inserting into a frozen group keeps it frozen.
        store
            .insert("spatial.cls_token", &Tensor::zeros(&[64]).unwrap())
            .unwrap();
        assert!(!store.get("spatial.cls_token").unwrap().requires_grad());
        assert!(store.insert("bogus.weight", &Tensor::zeros(&[1]).unwrap()).is_err());
    }
}
