use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Named parameters in sorted-name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        tensor.requires_grad = true;
        tensor.grad = None;
        let n = tensor.numel();
        self.params.insert(
            name,
            Parameter {
                tensor,
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    /// Inserts a fully specified parameter (used when restoring checkpoints).
    pub fn insert_parameter(&mut self, name: impl Into<String>, mut p: Parameter) -> Result<()> {
        let name = name.into();
        p.tensor.requires_grad = true;
        let n = p.tensor.numel();
        if p.m.len() != n || p.v.len() != n {
            return Err(Error::shape("insert_parameter", format!("moments of `{name}` do not match")));
        }
        if self.params.insert(name.clone(), p).is_some() {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Sets every gradient slot to zeros.
    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.grad = Some(vec![0.0; p.tensor.numel()]);
        }
    }

    /// Adds the parameter gradients of a reverse pass into the grad slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        self.accumulate_scaled(grads, 1.0)
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in grads.params() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            let slot = p.tensor.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(g).for_each(|(s, v)| *s += scale * v);
        }
        Ok(())
    }

    /// One bias-corrected Adam update of every parameter; clears the grads.
    pub fn adam_step(&mut self, opt: &Adam) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.tensor.grad.is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        for p in self.params.values_mut() {
            let g = p.tensor.grad.take().expect("checked above");
            p.step += 1;
            let bc1 = 1.0 - opt.beta1.powi(p.step as i32);
            let bc2 = 1.0 - opt.beta2.powi(p.step as i32);
            let data = p.tensor.data_mut();
            for i in 0..g.len() {
                p.m[i] = opt.beta1 * p.m[i] + (1.0 - opt.beta1) * g[i];
                p.v[i] = opt.beta2 * p.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                data[i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
            }
        }
        Ok(())
    }

    /// Hash over names, shapes and the bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, p) in &self.params {
            h.write(name.as_bytes());
            for &d in p.tensor.shape() {
                h.write_usize(d);
            }
            for v in p.tensor.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn scalar_set(x: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("x", Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
        ps
    }

    #[test]
    fn count_affine_map() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::zeros(&[3, 5])).unwrap();
        ps.insert("b", Tensor::zeros(&[5])).unwrap();
        assert_eq!(ps.count(), 20);
        assert_eq!(ParameterSet::new().count(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = scalar_set(1.0);
        assert!(ps.insert("x", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn names_iterate_sorted() {
        let mut ps = ParameterSet::new();
        for n in ["zeta", "alpha", "mid"] {
            ps.insert(n, Tensor::zeros(&[1])).unwrap();
        }
        assert_eq!(ps.names().collect::<Vec<_>>(), ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [0.37, -2.5, 1e-3] {
            let mut ps = scalar_set(1.0);
            ps.get_mut("x").unwrap().grad = Some(vec![g]);
            let opt = Adam::default();
            ps.adam_step(&opt).unwrap();
            let moved = ps.get("x").unwrap().item() - 1.0;
            // eps-limited: |Δ| = lr·|g|/(|g| + eps)
            assert!((moved + opt.lr * g.signum()).abs() <= opt.lr * 1e-5, "g={g} moved={moved}");
        }
    }

    #[test]
    fn zero_grad_leaves_parameter() {
        let mut ps = scalar_set(0.75);
        ps.zero_grad();
        ps.adam_step(&Adam::default()).unwrap();
        assert_eq!(ps.get("x").unwrap().item(), 0.75);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = scalar_set(0.75);
        ps.get_mut("x").unwrap().grad = Some(vec![3.0]);
        ps.adam_step(&Adam { lr: 0.0, ..Adam::default() }).unwrap();
        assert_eq!(ps.get("x").unwrap().item(), 0.75);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = scalar_set(0.75);
        assert!(matches!(ps.adam_step(&Adam::default()), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn grads_cleared_after_step() {
        let mut ps = scalar_set(0.75);
        ps.zero_grad();
        ps.adam_step(&Adam::default()).unwrap();
        assert!(ps.get("x").unwrap().grad.is_none());
    }

    #[test]
    fn three_step_trajectory_matches_scalar_adam() {
        // hand-rolled oracle on f(x) = x^2 (grad 2x)
        let opt = Adam::default();
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        let mut ps = scalar_set(x);
        for t in 1..=3 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.99f64.powi(t));
            x -= 3e-4 * mhat / (vhat.sqrt() + 1e-8);

            let mut graph = Graph::new();
            let p = graph.param(&ps, "x").unwrap();
            let sq = graph.mul(p, p).unwrap();
            let loss = graph.sum(sq).unwrap();
            let grads = graph.backward(loss).unwrap();
            ps.zero_grad();
            ps.accumulate(&grads).unwrap();
            ps.adam_step(&opt).unwrap();
        }
        assert!((ps.get("x").unwrap().item() - x).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let a = scalar_set(1.0);
        let b = scalar_set(1.0 + 1e-15);
        assert_eq!(a.fingerprint(), scalar_set(1.0).fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
