//! Named parameter storage, initialization and the AdamW optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Grads, Graph, Mat, Var};
use crate::error::{Error, Result};

/// An ordered collection of named matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Mat>>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat {
        Arc::make_mut(&mut self.values[id])
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| self.values[i].as_ref())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Total number of scalar entries.
    pub fn element_count(&self) -> u64 {
        self.values.iter().map(|v| v.len() as u64).sum()
    }

    /// Register every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|v| g.leaf(Arc::clone(v), trainable)).collect()
    }

    pub fn from_pairs(pairs: Vec<(String, Mat)>) -> Self {
        let mut set = Self::new();
        for (n, v) in pairs {
            set.insert(n, v);
        }
        set
    }

    pub fn to_pairs(&self) -> Vec<(String, Mat)> {
        self.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Per-parameter gradient sums across micro-batches.
#[derive(Debug)]
pub struct GradAccumulator {
    sums: Vec<Option<Mat>>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            sums: (0..n).map(|_| None).collect(),
        }
    }

    pub fn add(&mut self, grads: &mut Grads, bound: &[Var]) {
        for (slot, &v) in self.sums.iter_mut().zip(bound) {
            if let Some(g) = grads.take(v) {
                match slot {
                    Some(s) => *s += &g,
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn sums(&self) -> &[Option<Mat>] {
        &self.sums
    }

    pub fn clear(&mut self) {
        self.sums.iter_mut().for_each(|s| *s = None);
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|(_, p)| Mat::zeros(p.dim())).collect(),
            v: params.iter().map(|(_, p)| Mat::zeros(p.dim())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; parameters without a gradient are still decayed.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Mat>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            if self.weight_decay > 0.0 {
                let decay = 1.0 - self.lr * self.weight_decay;
                p.mapv_inplace(|x| x * decay);
            }
            let Some(g) = grad else { continue };
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[i].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}

pub fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Kaiming-style init for a `[out × in]` weight.
pub fn linear_weight(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Mat {
    normal_matrix(out_dim, in_dim, (2.0 / in_dim as f64).sqrt(), rng)
}

/// `x · Wᵀ + b` for a weight stored as `[out × in]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = g.matmul_t(x, w);
    match b {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_moves_against_gradient_and_decays() {
        let mut params = ParamSet::new();
        params.insert("w", Mat::from_elem((1, 2), 1.0));
        let mut opt = AdamW::new(&params, 0.1, 0.0);
        opt.step(
            &mut params,
            &[Some(Mat::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap())],
        );
        let w = params.get(0);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);

        let mut opt = AdamW::new(&params, 0.1, 0.5);
        let before = params.get(0).clone();
        opt.step(&mut params, &[None]);
        assert_eq!(params.get(0), &(before * 0.95));
    }
}
