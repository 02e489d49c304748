use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Event, EventSequence, FeatureSpec};
use crate::error::{Error, Result};
use crate::nn::{tensor1, tensor2, uniform_matrix, uniform_vector, Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

/// Single-layer GRU over `[embed(code) ; normalize(amount)]` inputs.
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// n = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruEncoder {
    pub spec: FeatureSpec,
    pub embedding: Array2<f64>,
    pub w_z: Array2<f64>,
    pub w_r: Array2<f64>,
    pub w_n: Array2<f64>,
    pub u_z: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u_n: Array2<f64>,
    pub b_z: Array1<f64>,
    pub b_r: Array1<f64>,
    pub b_n: Array1<f64>,
}

/// Per-user hidden states `h_j` paired with event times `t_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTrajectory {
    pub user_id: String,
    pub times: Vec<f64>,
    /// `len × hidden`, row `j` is the state after event `j`.
    pub states: Array2<f64>,
}

impl EmbeddingTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<ArrayView1<'_, f64>> {
        (!self.is_empty()).then(|| self.states.row(self.len() - 1))
    }
}

/// State after the last event at or before `t`; `None` before the first event.
pub fn encode_asof(traj: &EmbeddingTrajectory, t: f64) -> Option<ArrayView1<'_, f64>> {
    let idx = traj.times.partition_point(|&x| x <= t);
    (idx > 0).then(|| traj.states.row(idx - 1))
}

#[derive(Debug, Clone)]
pub struct GruCache {
    codes: Vec<usize>,
    xs: Vec<f64>,
    hs: Vec<f64>,
    zs: Vec<f64>,
    rs: Vec<f64>,
    ns: Vec<f64>,
}

impl GruCache {
    pub fn steps(&self) -> usize {
        self.codes.len()
    }
}

pub(super) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += W x` for row-major `W` with `out.len()` rows.
#[inline]
fn gemv_acc(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `out += Wᵀ y`.
#[inline]
fn gemv_t_acc(out: &mut [f64], w: &[f64], y: &[f64]) {
    let cols = out.len();
    for (yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if *yi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += yi * a;
        }
    }
}

/// `g += a bᵀ`.
#[inline]
fn outer_acc(g: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (ai, row) in a.iter().zip(g.chunks_exact_mut(cols)) {
        if *ai == 0.0 {
            continue;
        }
        for (r, bj) in row.iter_mut().zip(b) {
            *r += ai * bj;
        }
    }
}

impl GruEncoder {
    /// Embedding rows ~ N(0, 1); recurrent weights ~ U(±1/√hidden).
    pub fn new<R: Rng>(spec: FeatureSpec, cfg: EncoderConfig, rng: &mut R) -> Self {
        let m = cfg.hidden;
        let d = spec.input_width();
        let k = 1.0 / (m as f64).sqrt();
        let embedding = Array2::from_shape_fn((spec.vocab_size.max(1), spec.d_cat), |_| {
            StandardNormal.sample(rng)
        });
        Self {
            embedding,
            w_z: uniform_matrix(rng, m, d, k),
            w_r: uniform_matrix(rng, m, d, k),
            w_n: uniform_matrix(rng, m, d, k),
            u_z: uniform_matrix(rng, m, m, k),
            u_r: uniform_matrix(rng, m, m, k),
            u_n: uniform_matrix(rng, m, m, k),
            b_z: uniform_vector(rng, m, k),
            b_r: uniform_vector(rng, m, k),
            b_n: uniform_vector(rng, m, k),
            spec,
        }
    }

    pub fn zeros(spec: FeatureSpec, cfg: EncoderConfig) -> Self {
        let m = cfg.hidden;
        let d = spec.input_width();
        Self {
            embedding: Array2::zeros((spec.vocab_size.max(1), spec.d_cat)),
            w_z: Array2::zeros((m, d)),
            w_r: Array2::zeros((m, d)),
            w_n: Array2::zeros((m, d)),
            u_z: Array2::zeros((m, m)),
            u_r: Array2::zeros((m, m)),
            u_n: Array2::zeros((m, m)),
            b_z: Array1::zeros(m),
            b_r: Array1::zeros(m),
            b_n: Array1::zeros(m),
            spec,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec.clone(), EncoderConfig { hidden: self.hidden() })
    }

    pub fn hidden(&self) -> usize {
        self.b_z.len()
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig { hidden: self.hidden() }
    }

    fn check_codes(&self, events: &[Event]) -> Result<()> {
        let vocab = self.embedding.nrows();
        match events.iter().position(|e| e.event_type as usize >= vocab) {
            Some(index) => Err(Error::OutOfVocabulary {
                index,
                code: events[index].event_type,
                vocab,
            }),
            None => Ok(()),
        }
    }

    fn fill_input(&self, e: &Event, x: &mut [f64]) {
        let d_cat = self.spec.d_cat;
        x[..d_cat].copy_from_slice(
            self.embedding
                .row(e.event_type as usize)
                .as_slice()
                .expect("standard layout"),
        );
        x[d_cat] = self.spec.normalize(e.amount);
    }

    /// One recurrence step; writes gates and the new state.
    #[inline]
    fn step(&self, x: &[f64], h: &[f64], z: &mut [f64], r: &mut [f64], n: &mut [f64], h_new: &mut [f64], rh: &mut [f64]) {
        let m = h.len();
        z.copy_from_slice(self.b_z.as_slice().unwrap());
        r.copy_from_slice(self.b_r.as_slice().unwrap());
        n.copy_from_slice(self.b_n.as_slice().unwrap());
        gemv_acc(z, self.w_z.as_slice().unwrap(), x);
        gemv_acc(z, self.u_z.as_slice().unwrap(), h);
        gemv_acc(r, self.w_r.as_slice().unwrap(), x);
        gemv_acc(r, self.u_r.as_slice().unwrap(), h);
        for i in 0..m {
            z[i] = sigmoid(z[i]);
            r[i] = sigmoid(r[i]);
            rh[i] = r[i] * h[i];
        }
        gemv_acc(n, self.w_n.as_slice().unwrap(), x);
        gemv_acc(n, self.u_n.as_slice().unwrap(), rh);
        for i in 0..m {
            n[i] = n[i].tanh();
            h_new[i] = (1.0 - z[i]) * n[i] + z[i] * h[i];
        }
    }

    fn run(&self, events: &[Event], mut on_state: impl FnMut(usize, &[f64])) {
        let m = self.hidden();
        let mut x = vec![0.0; self.spec.input_width()];
        let mut h = vec![0.0; m];
        let mut h_new = vec![0.0; m];
        let (mut z, mut r, mut n, mut rh) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for (j, e) in events.iter().enumerate() {
            self.fill_input(e, &mut x);
            self.step(&x, &h, &mut z, &mut r, &mut n, &mut h_new, &mut rh);
            std::mem::swap(&mut h, &mut h_new);
            on_state(j, &h);
        }
    }

    /// Hidden state after every event of the sequence.
    pub fn forward(&self, seq: &EventSequence) -> Result<EmbeddingTrajectory> {
        self.check_codes(&seq.events)?;
        let m = self.hidden();
        let mut states = Array2::zeros((seq.len(), m));
        {
            let data = states.as_slice_mut().unwrap();
            self.run(&seq.events, |j, h| data[j * m..(j + 1) * m].copy_from_slice(h));
        }
        Ok(EmbeddingTrajectory {
            user_id: seq.user_id.clone(),
            times: seq.times().collect(),
            states,
        })
    }

    /// Final hidden state of a (sub)sequence.
    pub fn encode_last(&self, events: &[Event]) -> Result<Array1<f64>> {
        self.check_codes(events)?;
        let mut last = Array1::zeros(self.hidden());
        let n = events.len();
        self.run(events, |j, h| {
            if j + 1 == n {
                last.as_slice_mut().unwrap().copy_from_slice(h);
            }
        });
        Ok(last)
    }

    /// Forward pass keeping what the backward pass needs. Returns the final
    /// state and the cache.
    pub fn forward_cached(&self, events: &[Event]) -> Result<(Array1<f64>, GruCache)> {
        self.check_codes(events)?;
        let m = self.hidden();
        let d = self.spec.input_width();
        let steps = events.len();
        let mut cache = GruCache {
            codes: events.iter().map(|e| e.event_type as usize).collect(),
            xs: vec![0.0; steps * d],
            hs: vec![0.0; (steps + 1) * m],
            zs: vec![0.0; steps * m],
            rs: vec![0.0; steps * m],
            ns: vec![0.0; steps * m],
        };
        let mut rh = vec![0.0; m];
        for (j, e) in events.iter().enumerate() {
            let x = &mut cache.xs[j * d..(j + 1) * d];
            self.fill_input(e, x);
            let (prev, next) = cache.hs.split_at_mut((j + 1) * m);
            self.step(
                &cache.xs[j * d..(j + 1) * d],
                &prev[j * m..],
                &mut cache.zs[j * m..(j + 1) * m],
                &mut cache.rs[j * m..(j + 1) * m],
                &mut cache.ns[j * m..(j + 1) * m],
                &mut next[..m],
                &mut rh,
            );
        }
        let last = Array1::from(cache.hs[steps * m..].to_vec());
        Ok((last, cache))
    }

    /// Backpropagation through time from `dL/dh_T` at the final step.
    pub fn backward(&self, cache: &GruCache, d_last: ArrayView1<f64>, grads: &mut GruEncoder) {
        let m = self.hidden();
        let d = self.spec.input_width();
        let d_cat = self.spec.d_cat;
        let mut dh: Vec<f64> = d_last.to_vec();
        let mut dh_prev = vec![0.0; m];
        let (mut da_z, mut da_r, mut da_n) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut drh = vec![0.0; m];
        let mut rh = vec![0.0; m];
        let mut dx = vec![0.0; d];

        for j in (0..cache.steps()).rev() {
            let x = &cache.xs[j * d..(j + 1) * d];
            let h_prev = &cache.hs[j * m..(j + 1) * m];
            let z = &cache.zs[j * m..(j + 1) * m];
            let r = &cache.rs[j * m..(j + 1) * m];
            let n = &cache.ns[j * m..(j + 1) * m];

            for i in 0..m {
                let dn = dh[i] * (1.0 - z[i]);
                let dz = dh[i] * (h_prev[i] - n[i]);
                dh_prev[i] = dh[i] * z[i];
                da_n[i] = dn * (1.0 - n[i] * n[i]);
                da_z[i] = dz * z[i] * (1.0 - z[i]);
                rh[i] = r[i] * h_prev[i];
                drh[i] = 0.0;
            }
            gemv_t_acc(&mut drh, self.u_n.as_slice().unwrap(), &da_n);
            for i in 0..m {
                let dr = drh[i] * h_prev[i];
                dh_prev[i] += drh[i] * r[i];
                da_r[i] = dr * r[i] * (1.0 - r[i]);
            }

            outer_acc(grads.w_n.as_slice_mut().unwrap(), &da_n, x);
            outer_acc(grads.u_n.as_slice_mut().unwrap(), &da_n, &rh);
            outer_acc(grads.w_z.as_slice_mut().unwrap(), &da_z, x);
            outer_acc(grads.u_z.as_slice_mut().unwrap(), &da_z, h_prev);
            outer_acc(grads.w_r.as_slice_mut().unwrap(), &da_r, x);
            outer_acc(grads.u_r.as_slice_mut().unwrap(), &da_r, h_prev);
            for (g, v) in grads.b_n.iter_mut().zip(&da_n) {
                *g += v;
            }
            for (g, v) in grads.b_z.iter_mut().zip(&da_z) {
                *g += v;
            }
            for (g, v) in grads.b_r.iter_mut().zip(&da_r) {
                *g += v;
            }

            gemv_t_acc(&mut dh_prev, self.u_z.as_slice().unwrap(), &da_z);
            gemv_t_acc(&mut dh_prev, self.u_r.as_slice().unwrap(), &da_r);

            dx.iter_mut().for_each(|v| *v = 0.0);
            gemv_t_acc(&mut dx, self.w_z.as_slice().unwrap(), &da_z);
            gemv_t_acc(&mut dx, self.w_r.as_slice().unwrap(), &da_r);
            gemv_t_acc(&mut dx, self.w_n.as_slice().unwrap(), &da_n);
            let code = cache.codes[j];
            let mut row = grads.embedding.row_mut(code);
            for (g, v) in row.iter_mut().zip(&dx[..d_cat]) {
                *g += v;
            }

            std::mem::swap(&mut dh, &mut dh_prev);
        }
    }

    pub fn add_assign(&mut self, other: &GruEncoder) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.data).for_each(|(x, y)| *x += y);
        }
    }
}

impl Parameters for GruEncoder {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        vec![
            tensor2("embedding", &self.embedding),
            tensor2("w_z", &self.w_z),
            tensor2("w_r", &self.w_r),
            tensor2("w_n", &self.w_n),
            tensor2("u_z", &self.u_z),
            tensor2("u_r", &self.u_r),
            tensor2("u_n", &self.u_n),
            tensor1("b_z", &self.b_z),
            tensor1("b_r", &self.b_r),
            tensor1("b_n", &self.b_n),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.embedding.as_slice_mut().unwrap(),
            self.w_z.as_slice_mut().unwrap(),
            self.w_r.as_slice_mut().unwrap(),
            self.w_n.as_slice_mut().unwrap(),
            self.u_z.as_slice_mut().unwrap(),
            self.u_r.as_slice_mut().unwrap(),
            self.u_n.as_slice_mut().unwrap(),
            self.b_z.as_slice_mut().unwrap(),
            self.b_r.as_slice_mut().unwrap(),
            self.b_n.as_slice_mut().unwrap(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn spec(vocab: usize, d_cat: usize) -> FeatureSpec {
        FeatureSpec {
            vocab_size: vocab,
            d_cat,
            d_cont: 1,
            cont_mean: 0.0,
            cont_std: 1.0,
        }
    }

    fn seq(n: usize) -> EventSequence {
        let events = (0..n)
            .map(|j| Event {
                t: j as f64,
                event_type: (j % 3) as u32,
                amount: 0.5 * j as f64,
            })
            .collect();
        EventSequence::new("u", events, None).unwrap()
    }

    #[test]
    fn zero_weights_keep_state_at_zero() {
        let enc = GruEncoder::zeros(spec(3, 2), EncoderConfig { hidden: 4 });
        let traj = enc.forward(&seq(6)).unwrap();
        assert!(traj.states.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_length_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = GruEncoder::new(spec(3, 2), EncoderConfig { hidden: 4 }, &mut rng);
        assert_eq!(enc.forward(&seq(1)).unwrap().len(), 1);
        let t = enc.forward(&seq(9)).unwrap();
        assert_eq!(t.states.nrows(), 9);
        assert!(t.states.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = GruEncoder::new(spec(3, 2), EncoderConfig { hidden: 4 }, &mut rng);
        let a = enc.forward(&seq(5)).unwrap();
        let b = enc.forward(&seq(5)).unwrap();
        assert_eq!(a, b);
        let last = enc.encode_last(&seq(5).events).unwrap();
        assert_eq!(last.view(), a.last().unwrap());
        let (cached, _) = enc.forward_cached(&seq(5).events).unwrap();
        assert_eq!(cached, last);
    }

    #[test]
    fn out_of_vocab_reports_index() {
        let enc = GruEncoder::zeros(spec(2, 2), EncoderConfig { hidden: 2 });
        match enc.forward(&seq(4)) {
            Err(Error::OutOfVocabulary { index, code, .. }) => {
                assert_eq!((index, code), (2, 2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn asof_lookup() {
        let traj = EmbeddingTrajectory {
            user_id: "u".into(),
            times: vec![1.0, 5.0, 9.0],
            states: Array2::from_shape_vec((3, 1), vec![10.0, 50.0, 90.0]).unwrap(),
        };
        assert_eq!(encode_asof(&traj, 7.0).unwrap()[0], 50.0);
        assert_eq!(encode_asof(&traj, 9.0).unwrap()[0], 90.0);
        assert!(encode_asof(&traj, 0.5).is_none());
    }
}
