use std::ops::Range;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gru::{EncoderConfig, GruEncoder};
use crate::data::{Event, EventSequence, FeatureSpec, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColesConfig {
    /// Subsequences sampled per user per batch (K).
    pub subsequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub margin: f64,
    /// Users per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for ColesConfig {
    fn default() -> Self {
        Self {
            subsequences: 5,
            min_len: 25,
            max_len: 200,
            margin: 0.5,
            batch_size: 128,
            epochs: 60,
            adam: AdamConfig::default(),
        }
    }
}

impl ColesConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("coles.{field}"),
                message: message.into(),
            })
        };
        if self.subsequences < 2 {
            return bad("subsequences", "must be at least 2");
        }
        if self.min_len < 1 {
            return bad("min_len", "must be at least 1");
        }
        if self.max_len < self.min_len {
            return bad("max_len", "must be >= min_len");
        }
        if !(self.margin > 0.0) {
            return bad("margin", "must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if !(self.adam.lr >= 0.0) {
            return bad("adam.lr", "must be non-negative");
        }
        Ok(())
    }
}

/// Margin contrastive loss over all pairs:
/// `Σ_pos d² + Σ_neg max(0, margin − d)²`. Returns the loss and
/// `∂L/∂embedding` for each input.
pub fn coles_loss(embeddings: &[Array1<f64>], owners: &[usize], margin: f64) -> Result<(f64, Vec<Array1<f64>>)> {
    if embeddings.len() != owners.len() {
        return Err(Error::shape(embeddings.len(), owners.len()));
    }
    if owners.iter().all(|o| *o == owners[0]) {
        return Err(Error::invalid("contrastive batch needs at least two users"));
    }
    let dim = embeddings[0].len();
    let mut grads: Vec<Array1<f64>> = embeddings.iter().map(|_| Array1::zeros(dim)).collect();
    let mut loss = 0.0;
    let mut diff = vec![0.0; dim];
    for i in 0..embeddings.len() {
        let ei = embeddings[i].as_slice().expect("contiguous");
        for j in i + 1..embeddings.len() {
            let ej = embeddings[j].as_slice().expect("contiguous");
            let mut d2 = 0.0;
            for k in 0..dim {
                diff[k] = ei[k] - ej[k];
                d2 += diff[k] * diff[k];
            }
            // dL/d(diff)
            let coef = if owners[i] == owners[j] {
                loss += d2;
                2.0
            } else {
                let d = d2.sqrt();
                if d >= margin || d == 0.0 {
                    if d == 0.0 {
                        loss += margin * margin;
                    }
                    continue;
                }
                loss += (margin - d) * (margin - d);
                -2.0 * (margin - d) / d
            };
            let (a, b) = grads.split_at_mut(j);
            let (gi, gj) = (&mut a[i], &mut b[0]);
            for k in 0..dim {
                gi[k] += coef * diff[k];
                gj[k] -= coef * diff[k];
            }
        }
    }
    Ok((loss, grads))
}

/// Random contiguous slice of a length-`len` sequence with length uniform in
/// `[min(min_len, len), min(max_len, len)]`.
pub fn sample_subsequence<R: Rng>(len: usize, cfg: &ColesConfig, rng: &mut R) -> Range<usize> {
    let lo = cfg.min_len.min(len).max(1);
    let hi = cfg.max_len.min(len).max(lo);
    let l = rng.random_range(lo..=hi);
    let start = rng.random_range(0..=len - l);
    start..start + l
}

/// Shuffled user batches; a trailing batch with one user is merged into the
/// previous one so every batch has negatives.
pub fn epoch_batches<R: Rng>(n_users: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// `(owner, slice)` pairs for one batch, K per user.
pub fn sample_batch<R: Rng>(batch: &[usize], lens: &[usize], cfg: &ColesConfig, rng: &mut R) -> Vec<(usize, Range<usize>)> {
    let mut out = Vec::with_capacity(batch.len() * cfg.subsequences);
    for &u in batch {
        for _ in 0..cfg.subsequences {
            out.push((u, sample_subsequence(lens[u], cfg, rng)));
        }
    }
    out
}

/// Work items per gradient-accumulation chunk. Fixed so the summation order
/// does not depend on the thread count.
pub(crate) const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub encoder: GruEncoder,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Loss and parameter gradient of the contrastive objective for one batch of
/// `(owner, events)` slices.
pub fn batch_loss_and_grad(encoder: &GruEncoder, items: &[(usize, &[Event])], margin: f64) -> Result<(f64, GruEncoder)> {
    let forwards: Vec<_> = items
        .par_iter()
        .map(|(_, ev)| encoder.forward_cached(ev))
        .collect::<Result<_>>()?;
    let embeddings: Vec<Array1<f64>> = forwards.iter().map(|(h, _)| h.clone()).collect();
    let owners: Vec<usize> = items.iter().map(|(o, _)| *o).collect();
    let (loss, d_emb) = coles_loss(&embeddings, &owners, margin)?;
    let partials: Vec<GruEncoder> = forwards
        .par_chunks(GRAD_CHUNK)
        .zip(d_emb.par_chunks(GRAD_CHUNK))
        .map(|(fw, de)| {
            let mut g = encoder.zeros_like();
            for ((_, cache), d) in fw.iter().zip(de) {
                encoder.backward(cache, d.view(), &mut g);
            }
            g
        })
        .collect();
    let mut grads = encoder.zeros_like();
    for p in &partials {
        grads.add_assign(p);
    }
    Ok((loss, grads))
}

/// Contrastive pretraining on the train split.
pub fn pretrain(
    dataset: &LabeledDataset,
    spec: FeatureSpec,
    enc_cfg: EncoderConfig,
    cfg: &ColesConfig,
    seed: u64,
) -> Result<Pretrained> {
    cfg.validate()?;
    let users: Vec<&EventSequence> = dataset
        .sequences_in(Split::Train)
        .filter(|s| s.len() >= cfg.min_len)
        .collect();
    if users.len() < 2 {
        return Err(Error::invalid(format!(
            "pretraining needs at least two train users with length >= {}",
            cfg.min_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = GruEncoder::new(spec, enc_cfg, &mut rng);
    pretrain_from(encoder, &users, cfg, &mut rng)
}

/// Continues contrastive training of an existing encoder.
pub fn pretrain_from(
    mut encoder: GruEncoder,
    users: &[&EventSequence],
    cfg: &ColesConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Pretrained> {
    let lens: Vec<usize> = users.iter().map(|s| s.len()).collect();
    let mut opt = Adam::new(cfg.adam, &encoder);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(users.len(), cfg.batch_size, rng);
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let picks = sample_batch(batch, &lens, cfg, rng);
            let items: Vec<(usize, &[Event])> = picks
                .iter()
                .map(|(u, r)| (*u, &users[*u].events[r.clone()]))
                .collect();
            let (loss, grads) = batch_loss_and_grad(&encoder, &items, cfg.margin)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "contrastive loss at epoch {epoch}, batch {b}"
                )));
            }
            opt.step(&mut encoder, &grads);
            total += loss;
        }
        let mean = total / batches.len() as f64;
        log::debug!("pretrain epoch {epoch}: mean loss {mean:.4}");
        loss_curve.push(mean);
    }
    Ok(Pretrained { encoder, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_positive_pair_costs_nothing() {
        let e = vec![
            Array1::from(vec![0.3, 0.1]),
            Array1::from(vec![0.3, 0.1]),
            Array1::from(vec![9.0, 9.0]),
        ];
        let (l, g) = coles_loss(&e, &[0, 0, 1], 0.5).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn positive_pair_in_mixed_batch() {
        let e = vec![
            Array1::from(vec![0.0, 0.0]),
            Array1::from(vec![0.0, 0.0]),
            Array1::from(vec![5.0, 0.0]),
        ];
        let (l, _) = coles_loss(&e, &[0, 0, 1], 0.5).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn negative_beyond_margin_costs_nothing() {
        let e = vec![Array1::from(vec![0.0]), Array1::from(vec![0.6])];
        let (l, g) = coles_loss(&e, &[0, 1], 0.5).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g[0][0], 0.0);
    }

    #[test]
    fn negative_inside_margin() {
        let e = vec![Array1::from(vec![0.0, 0.0]), Array1::from(vec![0.2, 0.0])];
        let (l, g) = coles_loss(&e, &[0, 1], 0.5).unwrap();
        assert_abs_diff_eq!(l, 0.09, epsilon = 1e-15);
        // dL/de0 = -2(m-d) * (e0-e1)/d = -2*0.3*(-1) = 0.6
        assert_abs_diff_eq!(g[0][0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1][0], -0.6, epsilon = 1e-12);
    }

    #[test]
    fn single_user_batch_is_rejected() {
        let e = vec![Array1::from(vec![0.0]), Array1::from(vec![1.0])];
        assert!(matches!(coles_loss(&e, &[3, 3], 0.5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let e = vec![
            Array1::from(vec![0.1, 0.2]),
            Array1::from(vec![0.3, -0.1]),
            Array1::from(vec![0.15, 0.1]),
            Array1::from(vec![0.9, 0.9]),
        ];
        let owners = [0, 0, 1, 1];
        let (_, g) = coles_loss(&e, &owners, 0.5).unwrap();
        let eps = 1e-6;
        for i in 0..4 {
            for k in 0..2 {
                let mut p = e.clone();
                p[i][k] += eps;
                let mut m = e.clone();
                m[i][k] -= eps;
                let fd = (coles_loss(&p, &owners, 0.5).unwrap().0 - coles_loss(&m, &owners, 0.5).unwrap().0) / (2.0 * eps);
                assert_abs_diff_eq!(fd, g[i][k], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn subsequence_lengths_respect_bounds() {
        let cfg = ColesConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for len in [1usize, 10, 25, 100, 500] {
            for _ in 0..200 {
                let r = sample_subsequence(len, &cfg, &mut rng);
                assert!(r.end <= len);
                assert!(r.len() >= cfg.min_len.min(len));
                assert!(r.len() <= cfg.max_len.min(len));
            }
        }
    }

    #[test]
    fn batches_cover_users_without_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(9, 4, &mut rng);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }
}
