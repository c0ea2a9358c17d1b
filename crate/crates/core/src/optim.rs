//! Adam and batch-gradient plumbing shared by every trainer.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::autograd::{Gradients, Tape};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates exactly the tensors named in `grads`, wherever they live in
    /// `stores`.
    pub fn update(&mut self, stores: &mut [&mut ParamStore], grads: &GradStore, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut names: Vec<&String> = grads.grads.keys().collect();
        names.sort();
        for name in names {
            let g = &grads.grads[name];
            let Some(p) = stores.iter_mut().find_map(|s| s.get_mut(name)) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Gradients of every trainable leaf on `tape`, keyed by parameter name.
pub fn tape_grads<T: Real>(tape: &Tape<T>, grads: &Gradients<T>) -> GradStore {
    let mut out = GradStore::default();
    for (name, v) in tape.trainable() {
        if let Some(g) = grads.get(*v) {
            let g: Vec<f32> = g.data.iter().map(|x| x.as_f32()).collect();
            out.add(name, &g);
        }
    }
    out
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let n = grads.norm();
    if n > max_norm && n > 0.0 {
        grads.scale((max_norm / n) as f32);
    }
    n
}

/// Runs `per_sample` over the batch (in parallel when a pool is available),
/// then sums gradients in batch order and averages. Summation order is
/// fixed, so results do not depend on thread count.
pub fn batch_gradients<S, F>(batch: &[S], per_sample: F) -> crate::Result<(GradStore, Vec<f64>)>
where
    S: Sync,
    F: Fn(&S) -> crate::Result<(GradStore, f64)> + Sync,
{
    let results: Vec<crate::Result<(GradStore, f64)>> = batch.par_iter().map(&per_sample).collect();
    let mut total = GradStore::default();
    let mut losses = Vec::with_capacity(batch.len());
    for r in results {
        let (g, l) = r?;
        total.merge(&g);
        losses.push(l);
    }
    total.scale(1.0 / batch.len().max(1) as f32);
    Ok((total, losses))
}

/// Cosine decay from `start` to `end` over `steps`.
pub fn cosine_lr(step: usize, steps: usize, start: f64, end: f64) -> f64 {
    if steps <= 1 {
        return end;
    }
    let p = step as f64 / (steps - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;

    #[test]
    fn adam_descends_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", &[2], Role::Adapter, vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new();
        for _ in 0..500 {
            let mut g = GradStore::default();
            let x = &p.get("x").unwrap().data;
            g.add("x", &[2.0 * x[0], 2.0 * x[1]]);
            opt.update(&mut [&mut p], &g, 0.05);
        }
        let x = &p.get("x").unwrap().data;
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2, "{x:?}");
    }

    #[test]
    fn adam_only_touches_named_tensors() {
        let mut p = ParamStore::new();
        p.insert("a", &[1], Role::Base, vec![1.0]).unwrap();
        p.insert("b", &[1], Role::Adapter, vec![1.0]).unwrap();
        let mut g = GradStore::default();
        g.add("b", &[1.0]);
        Adam::new().update(&mut [&mut p], &g, 0.1);
        assert_eq!(p.get("a").unwrap().data, vec![1.0]);
        assert!(p.get("b").unwrap().data[0] < 1.0);
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0, 10, 1e-5, 1e-7) - 1e-5).abs() < 1e-12);
        assert!((cosine_lr(9, 10, 1e-5, 1e-7) - 1e-7).abs() < 1e-12);
    }
}
