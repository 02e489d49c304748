//! Scalar-loop reference implementations shared by the integration tests.
//! Matrices are column lists: `h[i]` is context column `i`.

#![allow(dead_code)]

use ctxagg::aggregation::Aggregator;
use ctxagg::nn::Mlp;
use ndarray::{Array2, ArrayView2};

pub fn columns(h: ArrayView2<f64>) -> Vec<Vec<f64>> {
    (0..h.ncols()).map(|j| h.column(j).to_vec()).collect()
}

pub fn to_matrix(cols: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((cols[0].len(), cols.len()), |(i, j)| cols[j][i])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut top = scores[0];
    for &s in scores {
        if s > top {
            top = s;
        }
    }
    let mut e = Vec::with_capacity(scores.len());
    let mut total = 0.0;
    for &s in scores {
        let v = (s - top).exp();
        e.push(v);
        total += v;
    }
    for v in e.iter_mut() {
        *v /= total;
    }
    e
}

fn weighted_sum(cols: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; cols[0].len()];
    for (col, &wi) in cols.iter().zip(w) {
        for k in 0..g.len() {
            g[k] += wi * col[k];
        }
    }
    g
}

fn matvec(a: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            y[i] += a[[i, j]] * x[j];
        }
    }
    y
}

pub fn mlp(net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut hidden = matvec(&net.w1, x);
    for (i, v) in hidden.iter_mut().enumerate() {
        *v = (*v + net.b1[i]).tanh();
    }
    let mut y = matvec(&net.w2, &hidden);
    for (i, v) in y.iter_mut().enumerate() {
        *v += net.b2[i];
    }
    y
}

fn decay(last_times: &[f64], t: f64, tau: f64) -> Vec<f64> {
    last_times.iter().map(|ti| (-(t - ti) / tau).exp()).collect()
}

/// Reference `g` for any aggregator.
pub fn aggregate(agg: &Aggregator, cols: &[Vec<f64>], q: &[f64], last_times: &[f64], t: f64) -> Vec<f64> {
    let m = q.len();
    match agg {
        Aggregator::Mean => {
            let w = vec![1.0 / cols.len() as f64; cols.len()];
            weighted_sum(cols, &w)
        }
        Aggregator::Max => (0..m)
            .map(|k| {
                let mut best = f64::NEG_INFINITY;
                for c in cols {
                    if c[k] > best {
                        best = c[k];
                    }
                }
                best
            })
            .collect(),
        Aggregator::Attention => {
            let s: Vec<f64> = cols.iter().map(|c| dot(c, q)).collect();
            weighted_sum(cols, &softmax(&s))
        }
        Aggregator::LearnableAttention { a } => {
            let aq = matvec(a, q);
            let s: Vec<f64> = cols.iter().map(|c| dot(c, &aq)).collect();
            weighted_sum(cols, &softmax(&s))
        }
        Aggregator::KernelAttention { phi } => {
            let pq = mlp(phi, q);
            let s: Vec<f64> = cols.iter().map(|c| dot(&mlp(phi, c), &pq)).collect();
            weighted_sum(cols, &softmax(&s))
        }
        Aggregator::ExpHawkes { tau } => weighted_sum(cols, &decay(last_times, t, *tau)),
        Aggregator::LearnableExpHawkes { tau, phi } => {
            let outs: Vec<Vec<f64>> = cols
                .iter()
                .map(|c| {
                    let mut x = c.clone();
                    x.extend_from_slice(q);
                    mlp(phi, &x)
                })
                .collect();
            weighted_sum(&outs, &decay(last_times, t, *tau))
        }
        Aggregator::AttentionHawkes { tau } => {
            let s: Vec<f64> = cols.iter().map(|c| dot(c, q)).collect();
            let a = softmax(&s);
            let d = decay(last_times, t, *tau);
            let w: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x * y).collect();
            weighted_sum(cols, &w)
        }
    }
}

/// Latest `(t, state)` at or before `t` by scanning every stored entry.
pub fn asof_scan<'a>(entries: &'a [(f64, Vec<f64>)], t: f64) -> Option<&'a (f64, Vec<f64>)> {
    let mut found: Option<&(f64, Vec<f64>)> = None;
    for e in entries {
        if e.0 <= t && found.is_none_or(|f| f.0 < e.0) {
            found = Some(e);
        }
    }
    found
}
