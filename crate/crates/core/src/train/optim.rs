use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − lr·v`.
///
/// Buffers are created on first use, so frozen parameters never get one.
#[derive(Debug, Clone)]
pub struct Sgd<F: Real> {
    pub momentum: F,
    buffers: BTreeMap<String, Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum: F::from_f64_lossy(momentum),
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&[F]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    /// Total number of momentum values held.
    pub fn buffer_numel(&self) -> usize {
        self.buffers.values().map(Vec::len).sum()
    }

    /// Apply one update to every trainable tensor and clear its gradient.
    /// Fails without touching anything if a trainable tensor has no gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<()> {
        let trainable: Vec<(String, Tensor<F>)> = store
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some((name, _)) = trainable.iter().find(|(_, t)| !t.has_grad()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        let lr = F::from_f64_lossy(lr);
        let mu = self.momentum;
        for (name, t) in trainable {
            let g = t.take_grad().expect("checked above");
            let v = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            let mut w = t.to_vec();
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = mu * *v + *g;
                *w = *w - lr * *v;
            }
            store.insert(name, &Tensor::new(t.shape(), w)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Group;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("head.bias", &Tensor::new(&[1], vec![w]).unwrap()).unwrap();
        s
    }

    fn set_grad(s: &ParamStore<f64>, g: f64) {
        s.get("head.bias").unwrap().accumulate_grad(vec![g]);
    }

    #[test]
    fn momentum_trace() {
        // f(w) = w²/2, so g = w.
        let mut s = scalar_store(1.0);
        let mut opt = Sgd::new(0.9);
        set_grad(&s, 1.0);
        opt.step(&mut s, 0.1).unwrap();
        let w1 = s.get("head.bias").unwrap().item();
        assert!((w1 - 0.9).abs() < 1e-15);
        set_grad(&s, w1);
        opt.step(&mut s, 0.1).unwrap();
        assert!((opt.buffer("head.bias").unwrap()[0] - 1.8).abs() < 1e-15);
        assert!((s.get("head.bias").unwrap().item() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_only_moves_buffers() {
        let mut s = scalar_store(2.0);
        let mut opt = Sgd::new(0.9);
        set_grad(&s, 3.0);
        opt.step(&mut s, 0.0).unwrap();
        assert_eq!(s.get("head.bias").unwrap().item(), 2.0);
        assert_eq!(opt.buffer("head.bias").unwrap(), [3.0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = scalar_store(1.0);
        let mut opt = Sgd::new(0.9);
        assert!(matches!(opt.step(&mut s, 0.1), Err(Error::MissingGradient(_))));
        s.set_frozen(Group::Head, true);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(opt.buffer_numel(), 0);
    }
}
