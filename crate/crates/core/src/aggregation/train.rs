use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{decay_weights, stack_query, Aggregator};
use crate::data::{EventSequence, LabeledDataset, Split};
use crate::encoder::{coles_loss, epoch_batches, sample_batch, ColesConfig, GruEncoder, GRAD_CHUNK};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_check, GradCheckReport};
use crate::nn::{softmax, softmax_backward, Adam, MlpColsCache};
use crate::store::{AsOfIndex, Snapshot};

/// Intermediate values of one learnable-aggregator forward pass.
#[derive(Debug, Clone)]
pub enum AggCache {
    Attention {
        q: Array1<f64>,
        w: Vec<f64>,
    },
    Kernel {
        w: Vec<f64>,
        phi_h: Array2<f64>,
        phi_q: Array1<f64>,
        cache_h: MlpColsCache,
        cache_q: MlpColsCache,
    },
    ExpHawkes {
        decay: Vec<f64>,
        cache: MlpColsCache,
    },
}

impl Aggregator {
    /// Forward pass that keeps what [`Aggregator::backward`] needs.
    pub fn forward_cached(&self, snap: &Snapshot, q: ArrayView1<f64>) -> Result<(Array1<f64>, AggCache)> {
        let h = snap.h.view();
        if h.ncols() == 0 {
            return Err(Error::EmptyContext(snap.t));
        }
        if q.len() != h.nrows() {
            return Err(Error::shape(h.nrows(), q.len()));
        }
        match self {
            Aggregator::LearnableAttention { a } => {
                let w = softmax(h.t().dot(&a.dot(&q)).as_slice().unwrap());
                let g = h.dot(&ArrayView1::from(&w));
                Ok((g, AggCache::Attention { q: q.to_owned(), w }))
            }
            Aggregator::KernelAttention { phi } => {
                let (phi_h, cache_h) = phi.forward_cols_cached(h);
                let (phi_q, cache_q) = phi.forward_cols_cached(q.insert_axis(Axis(1)));
                let phi_q = phi_q.column(0).to_owned();
                let w = softmax(phi_h.t().dot(&phi_q).as_slice().unwrap());
                let g = h.dot(&ArrayView1::from(&w));
                Ok((
                    g,
                    AggCache::Kernel {
                        w,
                        phi_h,
                        phi_q,
                        cache_h,
                        cache_q,
                    },
                ))
            }
            Aggregator::LearnableExpHawkes { tau, phi } => {
                let decay = decay_weights(&snap.last_times, snap.t, *tau)?;
                let (y, cache) = phi.forward_cols_cached(stack_query(h, q).view());
                let g = y.dot(&ArrayView1::from(&decay));
                Ok((g, AggCache::ExpHawkes { decay, cache }))
            }
            other => Err(Error::invalid(format!("{} has no trainable parameters", other.kind()))),
        }
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂g`.
    pub fn backward(&self, snap: &Snapshot, cache: &AggCache, dg: ArrayView1<f64>, grads: &mut Aggregator) {
        let h = snap.h.view();
        match (self, cache, grads) {
            (Aggregator::LearnableAttention { .. }, AggCache::Attention { q, w }, Aggregator::LearnableAttention { a: da }) => {
                let dw = h.t().dot(&dg);
                let ds = softmax_backward(w, dw.as_slice().unwrap());
                let du = h.dot(&ArrayView1::from(&ds));
                crate::nn::add_outer(da, du.view(), q.view());
            }
            (
                Aggregator::KernelAttention { phi },
                AggCache::Kernel {
                    w,
                    phi_h,
                    phi_q,
                    cache_h,
                    cache_q,
                },
                Aggregator::KernelAttention { phi: gphi },
            ) => {
                let dw = h.t().dot(&dg);
                let ds = Array1::from(softmax_backward(w, dw.as_slice().unwrap()));
                let d_phi_h = phi_q.view().insert_axis(Axis(1)).dot(&ds.view().insert_axis(Axis(0)));
                let d_phi_q = phi_h.dot(&ds);
                phi.backward_cols(cache_h, d_phi_h.view(), gphi);
                phi.backward_cols(cache_q, d_phi_q.view().insert_axis(Axis(1)), gphi);
            }
            (
                Aggregator::LearnableExpHawkes { phi, .. },
                AggCache::ExpHawkes { decay, cache },
                Aggregator::LearnableExpHawkes { phi: gphi, .. },
            ) => {
                let dy = dg
                    .insert_axis(Axis(1))
                    .dot(&ArrayView1::from(decay).insert_axis(Axis(0)));
                phi.backward_cols(cache, dy.view(), gphi);
            }
            _ => panic!("aggregator, cache and gradient kinds disagree"),
        }
    }
}

/// One contrastive training sample: its owner, the context snapshot at the
/// sample's end time, and the frozen encoder state of the sample.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub owner: usize,
    pub snapshot: Snapshot,
    pub query: Array1<f64>,
}

fn items_loss_and_grad(agg: &Aggregator, items: &[TrainItem], margin: f64) -> Result<(f64, Aggregator)> {
    let forwards: Vec<(Array1<f64>, AggCache)> = items
        .par_iter()
        .map(|it| agg.forward_cached(&it.snapshot, it.query.view()))
        .collect::<Result<_>>()?;
    let gs: Vec<Array1<f64>> = forwards.iter().map(|(g, _)| g.clone()).collect();
    let owners: Vec<usize> = items.iter().map(|it| it.owner).collect();
    let (loss, dg) = coles_loss(&gs, &owners, margin)?;
    let partials: Vec<Aggregator> = items
        .par_chunks(GRAD_CHUNK)
        .zip(forwards.par_chunks(GRAD_CHUNK))
        .zip(dg.par_chunks(GRAD_CHUNK))
        .map(|((its, fw), dgs)| {
            let mut g = agg.zeros_like();
            for ((it, (_, cache)), d) in its.iter().zip(fw).zip(dgs) {
                agg.backward(&it.snapshot, cache, d.view(), &mut g);
            }
            g
        })
        .collect();
    let mut grads = agg.zeros_like();
    for p in &partials {
        grads.add_assign(p);
    }
    Ok((loss, grads))
}

fn items_loss(agg: &Aggregator, items: &[TrainItem], margin: f64) -> Result<f64> {
    let gs = items
        .iter()
        .map(|it| agg.forward_cached(&it.snapshot, it.query.view()).map(|(g, _)| g))
        .collect::<Result<Vec<_>>>()?;
    let owners: Vec<usize> = items.iter().map(|it| it.owner).collect();
    Ok(coles_loss(&gs, &owners, margin)?.0)
}

/// Analytic aggregator gradient of the contrastive loss on `g` versus central
/// finite differences.
pub fn check_aggregator_gradients(agg: &Aggregator, items: &[TrainItem], margin: f64, epsilon: f64) -> Result<GradCheckReport> {
    let (_, grads) = items_loss_and_grad(agg, items, margin)?;
    Ok(finite_difference_check(
        agg,
        &grads,
        |p| items_loss(p, items, margin).expect("validated items"),
        epsilon,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainedAggregator {
    pub aggregator: Aggregator,
    pub loss_curve: Vec<f64>,
}

/// Contrastive training of a learnable aggregator over a frozen encoder.
/// Each sampled subsequence is embedded by the encoder, its context snapshot
/// is taken at the subsequence's last event time, and the loss is applied
/// to the resulting `g` vectors.
pub fn train_aggregator(
    init: Aggregator,
    encoder: &GruEncoder,
    index: &AsOfIndex,
    context: &[String],
    dataset: &LabeledDataset,
    cfg: &ColesConfig,
    seed: u64,
) -> Result<TrainedAggregator> {
    cfg.validate()?;
    if !init.kind().is_learnable() {
        return Err(Error::invalid(format!("{} has no trainable parameters", init.kind())));
    }
    let users: Vec<&EventSequence> = dataset
        .sequences_in(Split::Train)
        .filter(|s| s.len() >= cfg.min_len)
        .collect();
    if users.len() < 2 {
        return Err(Error::invalid("aggregator training needs at least two train users"));
    }
    let lens: Vec<usize> = users.iter().map(|s| s.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg = init;
    let mut opt = Adam::new(cfg.adam, &agg);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(users.len(), cfg.batch_size, &mut rng);
        let (mut total, mut used) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let picks = sample_batch(batch, &lens, cfg, &mut rng);
            let items: Vec<TrainItem> = picks
                .par_iter()
                .map(|(u, r)| -> Result<Option<TrainItem>> {
                    let events = &users[*u].events[r.clone()];
                    let t_end = events.last().expect("non-empty slice").t;
                    let snapshot = match index.snapshot(context, t_end) {
                        Ok(s) => s,
                        Err(Error::EmptyContext(_)) => return Ok(None),
                        Err(e) => return Err(e),
                    };
                    Ok(Some(TrainItem {
                        owner: *u,
                        snapshot,
                        query: encoder.encode_last(events)?,
                    }))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            if items.iter().all(|it| it.owner == items[0].owner) {
                continue;
            }
            let (loss, grads) = items_loss_and_grad(&agg, &items, cfg.margin)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} contrastive loss at epoch {epoch}, batch {b}",
                    agg.kind()
                )));
            }
            opt.step(&mut agg, &grads);
            total += loss;
            used += 1;
        }
        let mean = if used > 0 { total / used as f64 } else { f64::NAN };
        log::debug!("{} epoch {epoch}: mean loss {mean:.4}", agg.kind());
        loss_curve.push(mean);
    }
    Ok(TrainedAggregator {
        aggregator: agg,
        loss_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{agg_attention, AggregatorKind};
    use rand::Rng;

    fn random_items(rng: &mut ChaCha8Rng, m: usize, count: usize) -> Vec<TrainItem> {
        (0..count)
            .map(|i| {
                let n = rng.random_range(1..5);
                let h = Array2::from_shape_fn((m, n), |_| rng.random_range(-0.5..0.5));
                let last_times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
                TrainItem {
                    owner: i / 2,
                    snapshot: Snapshot {
                        users: (0..n).map(|k| format!("c{k}")).collect(),
                        h,
                        last_times,
                        excluded: vec![],
                        t: 2.0,
                    },
                    query: Array1::from_shape_fn(m, |_| rng.random_range(-0.5..0.5)),
                }
            })
            .collect()
    }

    #[test]
    fn learnable_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let items = random_items(&mut rng, 3, 6);
        for kind in [
            AggregatorKind::LearnableAttention,
            AggregatorKind::KernelAttention,
            AggregatorKind::LearnableExpHawkes,
        ] {
            let mut agg = Aggregator::init(kind, 3, 1.5, &mut rng).unwrap();
            if let Aggregator::LearnableAttention { a } = &mut agg {
                a.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
            }
            let r = check_aggregator_gradients(&agg, &items, 0.5, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn identity_init_equals_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items = random_items(&mut rng, 4, 3);
        let agg = Aggregator::init(AggregatorKind::LearnableAttention, 4, 1.0, &mut rng).unwrap();
        for it in &items {
            let (g, _) = agg.forward_cached(&it.snapshot, it.query.view()).unwrap();
            let plain = agg_attention(it.snapshot.h.view(), it.query.view()).unwrap();
            assert_eq!(g, plain);
        }
    }
}
