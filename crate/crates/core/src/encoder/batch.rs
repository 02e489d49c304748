//! Column-batched GRU passes for many sequences of one common length.
//! States are `m × B` matrices so every gate is a single GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::gru::{sigmoid, GruEncoder};
use crate::data::Event;
use crate::error::{Error, Result};

/// Per-step activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    codes: Vec<Vec<usize>>,
    xs: Vec<Array2<f64>>,
    /// `steps + 1` states, the first one zero.
    hs: Vec<Array2<f64>>,
    zs: Vec<Array2<f64>>,
    rs: Vec<Array2<f64>>,
    ns: Vec<Array2<f64>>,
}

fn affine(w: &Array2<f64>, x: &Array2<f64>, u: &Array2<f64>, h: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut a = Array2::zeros((w.nrows(), x.ncols()));
    a.assign(&b.view().insert_axis(Axis(1)));
    general_mat_mul(1.0, w, x, 1.0, &mut a);
    general_mat_mul(1.0, u, h, 1.0, &mut a);
    a
}

impl GruEncoder {
    fn batch_input(&self, seqs: &[&[Event]], j: usize) -> Array2<f64> {
        let d_cat = self.spec.d_cat;
        let mut x = Array2::zeros((self.spec.input_width(), seqs.len()));
        for (b, s) in seqs.iter().enumerate() {
            let e = &s[j];
            let mut col = x.column_mut(b);
            col.slice_mut(ndarray::s![..d_cat])
                .assign(&self.embedding.row(e.event_type as usize));
            col[d_cat] = self.spec.normalize(e.amount);
        }
        x
    }

    /// Final states (`m × B`) of equal-length sequences, with the cache for
    /// [`GruEncoder::backward_batch`].
    pub fn forward_batch_cached(&self, seqs: &[&[Event]]) -> Result<(Array2<f64>, BatchCache)> {
        let steps = seqs.first().map_or(0, |s| s.len());
        if seqs.iter().any(|s| s.len() != steps) {
            return Err(Error::invalid("batched encoding needs sequences of equal length"));
        }
        let vocab = self.embedding.nrows();
        for s in seqs {
            if let Some(index) = s.iter().position(|e| e.event_type as usize >= vocab) {
                return Err(Error::OutOfVocabulary {
                    index,
                    code: s[index].event_type,
                    vocab,
                });
            }
        }
        let m = self.hidden();
        let mut cache = BatchCache {
            codes: Vec::with_capacity(steps),
            xs: Vec::with_capacity(steps),
            hs: vec![Array2::zeros((m, seqs.len()))],
            zs: Vec::with_capacity(steps),
            rs: Vec::with_capacity(steps),
            ns: Vec::with_capacity(steps),
        };
        for j in 0..steps {
            let x = self.batch_input(seqs, j);
            let h = cache.hs.last().expect("initial state");
            let z = affine(&self.w_z, &x, &self.u_z, h, &self.b_z).mapv_into(sigmoid);
            let r = affine(&self.w_r, &x, &self.u_r, h, &self.b_r).mapv_into(sigmoid);
            let rh = &r * h;
            let n = affine(&self.w_n, &x, &self.u_n, &rh, &self.b_n).mapv_into(f64::tanh);
            let mut h_new = Array2::zeros(h.raw_dim());
            Zip::from(&mut h_new)
                .and(&z)
                .and(&n)
                .and(h)
                .for_each(|o, &z, &n, &h| *o = (1.0 - z) * n + z * h);
            cache.codes.push(seqs.iter().map(|s| s[j].event_type as usize).collect());
            cache.xs.push(x);
            cache.zs.push(z);
            cache.rs.push(r);
            cache.ns.push(n);
            cache.hs.push(h_new);
        }
        Ok((cache.hs[steps].clone(), cache))
    }

    /// Backpropagation through time from `dL/dH_T` (`m × B`).
    pub fn backward_batch(&self, cache: &BatchCache, d_last: ArrayView2<f64>, grads: &mut GruEncoder) {
        let d_cat = self.spec.d_cat;
        let mut dh = d_last.to_owned();
        for j in (0..cache.xs.len()).rev() {
            let (x, h_prev) = (&cache.xs[j], &cache.hs[j]);
            let (z, r, n) = (&cache.zs[j], &cache.rs[j], &cache.ns[j]);

            let mut dh_prev = &dh * z;
            let mut da_n = Array2::zeros(dh.raw_dim());
            let mut da_z = Array2::zeros(dh.raw_dim());
            Zip::from(&mut da_n)
                .and(&mut da_z)
                .and(&dh)
                .and(z)
                .and(n)
                .and(h_prev)
                .for_each(|an, az, &dh, &z, &n, &hp| {
                    *an = dh * (1.0 - z) * (1.0 - n * n);
                    *az = dh * (hp - n) * z * (1.0 - z);
                });
            let drh = self.u_n.t().dot(&da_n);
            let mut da_r = Array2::zeros(dh.raw_dim());
            Zip::from(&mut da_r)
                .and(&mut dh_prev)
                .and(&drh)
                .and(r)
                .and(h_prev)
                .for_each(|ar, dhp, &drh, &r, &hp| {
                    *ar = drh * hp * r * (1.0 - r);
                    *dhp += drh * r;
                });
            let rh = r * h_prev;

            general_mat_mul(1.0, &da_n, &x.t(), 1.0, &mut grads.w_n);
            general_mat_mul(1.0, &da_n, &rh.t(), 1.0, &mut grads.u_n);
            general_mat_mul(1.0, &da_z, &x.t(), 1.0, &mut grads.w_z);
            general_mat_mul(1.0, &da_z, &h_prev.t(), 1.0, &mut grads.u_z);
            general_mat_mul(1.0, &da_r, &x.t(), 1.0, &mut grads.w_r);
            general_mat_mul(1.0, &da_r, &h_prev.t(), 1.0, &mut grads.u_r);
            grads.b_n += &da_n.sum_axis(Axis(1));
            grads.b_z += &da_z.sum_axis(Axis(1));
            grads.b_r += &da_r.sum_axis(Axis(1));

            general_mat_mul(1.0, &self.u_z.t(), &da_z, 1.0, &mut dh_prev);
            general_mat_mul(1.0, &self.u_r.t(), &da_r, 1.0, &mut dh_prev);

            let mut dx = self.w_z.t().dot(&da_z);
            general_mat_mul(1.0, &self.w_r.t(), &da_r, 1.0, &mut dx);
            general_mat_mul(1.0, &self.w_n.t(), &da_n, 1.0, &mut dx);
            for (b, &code) in cache.codes[j].iter().enumerate() {
                let mut row = grads.embedding.row_mut(code);
                row += &dx.column(b).slice(ndarray::s![..d_cat]);
            }
            dh = dh_prev;
        }
    }
}
