//! Small dense building blocks shared by the encoder, the learnable
//! aggregators and the downstream head: a two-layer tanh MLP with manual
//! backward pass, softmax helpers and an Adam optimizer over flat tensors.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameter containers expose their tensors as flat slices in a fixed
/// order so optimizers, checkpoints and gradient checks can walk them.
pub trait Parameters {
    fn tensors(&self) -> Vec<Tensor<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tensor<'a> {
    pub name: &'static str,
    pub shape: [usize; 2],
    pub data: &'a [f64],
}

pub(crate) fn tensor2<'a>(name: &'static str, a: &'a Array2<f64>) -> Tensor<'a> {
    Tensor {
        name,
        shape: [a.nrows(), a.ncols()],
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn tensor1<'a>(name: &'static str, a: &'a Array1<f64>) -> Tensor<'a> {
    Tensor {
        name,
        shape: [1, a.len()],
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

pub(crate) fn uniform_vector<R: Rng>(rng: &mut R, len: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-bound..=bound))
}

/// `y = W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Array1<f64>,
    hidden: Array1<f64>,
}

impl Mlp {
    /// Fan-in scaled uniform initialization.
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let k1 = 1.0 / (input as f64).sqrt();
        let k2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: uniform_matrix(rng, hidden, input, k1),
            b1: uniform_vector(rng, hidden, k1),
            w2: uniform_matrix(rng, output, hidden, k2),
            b2: uniform_vector(rng, output, k2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let hidden = (self.w1.dot(&x) + &self.b1).mapv(f64::tanh);
        self.w2.dot(&hidden) + &self.b2
    }

    pub fn forward_cached(&self, x: ArrayView1<f64>) -> (Array1<f64>, MlpCache) {
        let hidden = (self.w1.dot(&x) + &self.b1).mapv(f64::tanh);
        let y = self.w2.dot(&hidden) + &self.b2;
        (
            y,
            MlpCache {
                x: x.to_owned(),
                hidden,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, dy: ArrayView1<f64>, grads: &mut Mlp) -> Array1<f64> {
        add_outer(&mut grads.w2, dy, cache.hidden.view());
        grads.b2 += &dy;
        let dh = self.w2.t().dot(&dy);
        let da = &dh * &cache.hidden.mapv(|a| 1.0 - a * a);
        add_outer(&mut grads.w1, da.view(), cache.x.view());
        grads.b1 += &da;
        self.w1.t().dot(&da)
    }

    /// Applies the map to every column of `x` (`input × n`).
    pub fn forward_cols(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cols_cached(x).0
    }

    pub fn forward_cols_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpColsCache) {
        let mut hidden = self.w1.dot(&x);
        hidden += &self.b1.view().insert_axis(Axis(1));
        hidden.mapv_inplace(f64::tanh);
        let mut y = self.w2.dot(&hidden);
        y += &self.b2.view().insert_axis(Axis(1));
        (
            y,
            MlpColsCache {
                x: x.to_owned(),
                hidden,
            },
        )
    }

    /// Column-batched backward pass; returns `dL/dx` (`input × n`).
    pub fn backward_cols(&self, cache: &MlpColsCache, dy: ArrayView2<f64>, grads: &mut Mlp) -> Array2<f64> {
        general_mat_mul(1.0, &dy, &cache.hidden.t(), 1.0, &mut grads.w2);
        grads.b2 += &dy.sum_axis(Axis(1));
        let mut da = self.w2.t().dot(&dy);
        Zip::from(&mut da)
            .and(&cache.hidden)
            .for_each(|d, &a| *d *= 1.0 - a * a);
        general_mat_mul(1.0, &da, &cache.x.t(), 1.0, &mut grads.w1);
        grads.b1 += &da.sum_axis(Axis(1));
        self.w1.t().dot(&da)
    }
}

#[derive(Debug, Clone)]
pub struct MlpColsCache {
    x: Array2<f64>,
    hidden: Array2<f64>,
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        vec![
            tensor2("w1", &self.w1),
            tensor1("b1", &self.b1),
            tensor2("w2", &self.w2),
            tensor1("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
}

/// `m += a bᵀ`
pub(crate) fn add_outer(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    let cols = b.len();
    let bs = b.as_slice();
    let data = m.as_slice_mut().expect("standard layout");
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &mut data[i * cols..(i + 1) * cols];
        match bs {
            Some(bs) => row.iter_mut().zip(bs).for_each(|(r, bj)| *r += ai * bj),
            None => row.iter_mut().zip(b.iter()).for_each(|(r, bj)| *r += ai * bj),
        }
    }
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// Given softmax output `w` and `dL/dw`, returns `dL/ds`.
pub fn softmax_backward(w: &[f64], dw: &[f64]) -> Vec<f64> {
    let dot: f64 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
    w.iter().zip(dw).map(|(wi, dwi)| wi * (dwi - dot)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &impl Parameters) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            v: shapes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let g_tensors = grads.tensors();
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let g = g_tensors[k].data;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// `true` when every parameter is finite.
pub fn all_finite(p: &impl Parameters) -> bool {
    p.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
}
