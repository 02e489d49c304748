use std::collections::{BTreeMap, BTreeSet};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::auc::roc_auc_multiclass;
use super::context::ContextProvider;
use crate::data::{top_k_event_types, Event, LabeledDataset, Split};
use crate::encoder::GruEncoder;
use crate::error::{Error, Result};
use crate::nn::{softmax, tensor1, tensor2, Adam, AdamConfig, Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTuneMode {
    Freeze,
    Unfreeze,
}

impl FineTuneMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Freeze => "freeze",
            Self::Unfreeze => "unfreeze",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalEvalConfig {
    pub window: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub top_k: usize,
    pub mode: FineTuneMode,
    /// Share of train users held out for early stopping; 0 trains for the
    /// full `epochs`.
    pub validation_fraction: f64,
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
}

impl Default for LocalEvalConfig {
    fn default() -> Self {
        Self {
            window: 32,
            stride: 16,
            batch_size: 512,
            epochs: 1000,
            lr: 1e-3,
            top_k: 10,
            mode: FineTuneMode::Freeze,
            validation_fraction: 0.0,
            patience: 10,
        }
    }
}

impl LocalEvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("local.{field}"),
                message: message.into(),
            })
        };
        if self.window < 1 || self.stride < 1 || self.stride > self.window {
            return bad("stride", "need 1 <= stride <= window");
        }
        if self.top_k < 2 {
            return bad("top_k", "must be at least 2");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr >= 0.0) {
            return bad("lr", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction", "must lie in [0, 1)");
        }
        if self.validation_fraction > 0.0 && self.patience < 1 {
            return bad("patience", "must be at least 1 when validating");
        }
        Ok(())
    }
}

/// Windows per parallel work item; partial gradients are summed in order.
const WINDOW_CHUNK: usize = 128;

/// Window starts `0, stride, …` whose successor event exists.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    (0..).map(|k| k * stride).take_while(|s| s + window < len).collect()
}

/// Linear softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, inputs: usize) -> Self {
        Self {
            w: Array2::zeros((classes, inputs)),
            b: Array1::zeros(classes),
        }
    }

    pub fn probs(&self, x: ArrayView1<f64>) -> Vec<f64> {
        softmax((self.w.dot(&x) + &self.b).as_slice().unwrap())
    }
}

impl Parameters for LinearHead {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        vec![tensor2("w", &self.w), tensor1("b", &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_slice_mut().unwrap(), self.b.as_slice_mut().unwrap()]
    }
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub auc: f64,
    /// The fine-tuned encoder in unfreeze mode.
    pub encoder: Option<GruEncoder>,
    pub classes: Vec<u32>,
    pub train_windows: usize,
    pub test_windows: usize,
}

fn collect_windows<'a>(
    filtered: &'a LabeledDataset,
    split: Split,
    cfg: &LocalEvalConfig,
    class_of: &BTreeMap<u32, usize>,
    keep: impl Fn(&str) -> bool,
) -> Vec<(&'a [Event], usize)> {
    let mut out = Vec::new();
    for seq in filtered.sequences_in(split).filter(|s| keep(&s.user_id)) {
        for s in window_starts(seq.len(), cfg.window, cfg.stride) {
            out.push((&seq.events[s..s + cfg.window], class_of[&seq.events[s + cfg.window].event_type]));
        }
    }
    out
}

/// Next-event-type prediction from sliding windows over the `top_k` most
/// frequent codes. The context part `g` is computed once from the initial
/// encoder's window states and held fixed; in unfreeze mode gradients reach
/// the encoder through `h` only.
pub fn eval_local(
    encoder: &GruEncoder,
    provider: &ContextProvider<'_>,
    dataset: &LabeledDataset,
    cfg: &LocalEvalConfig,
    seed: u64,
) -> Result<LocalResult> {
    cfg.validate()?;
    let classes = top_k_event_types(dataset, cfg.top_k)?;
    if classes.len() < 2 {
        return Err(Error::invalid("fewer than two event types on the train split"));
    }
    let keep: BTreeSet<u32> = classes.iter().copied().collect();
    let class_of: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let filtered = dataset.filter_codes(&keep);
    let held_out = validation_users(&filtered, cfg.validation_fraction, seed);
    let raw_train = collect_windows(&filtered, Split::Train, cfg, &class_of, |u| !held_out.contains(u));
    let raw_val = collect_windows(&filtered, Split::Train, cfg, &class_of, |u| held_out.contains(u));
    let raw_test = collect_windows(&filtered, Split::Test, cfg, &class_of, |_| true);
    if raw_train.is_empty() || raw_test.is_empty() {
        return Err(Error::invalid(format!(
            "no window of length {} has a next event in both splits",
            cfg.window
        )));
    }

    let m = encoder.hidden();
    let gw = provider.width();
    let initial = |raw: &[(&[Event], usize)]| -> Result<Vec<(Array1<f64>, Array1<f64>)>> {
        raw.par_iter()
            .map(|(ev, _)| {
                let h = encoder.encode_last(ev)?;
                let g = provider.context_at(h.view(), ev.last().expect("window").t)?;
                Ok((h, g))
            })
            .collect()
    };
    let hg_train = initial(&raw_train)?;
    let hg_test = initial(&raw_test)?;
    let hg_val = initial(&raw_val)?;

    let to_windows = |hg: Vec<(Array1<f64>, Array1<f64>)>, raw: &[(&[Event], usize)]| -> Vec<(Array1<f64>, usize, Array1<f64>)> {
        hg.into_iter().zip(raw).map(|((h, g), (_, target))| (h, *target, g)).collect()
    };
    let train_init = to_windows(hg_train, &raw_train);
    let test_init = to_windows(hg_test, &raw_test);
    let val_init = to_windows(hg_val, &raw_val);
    let k = classes.len();
    let width = m + gw;
    let feature_matrix = |idx: &[usize], h: Option<&Array2<f64>>| -> Array2<f64> {
        let mut x = Array2::zeros((width, idx.len()));
        for (c, &i) in idx.iter().enumerate() {
            let (h0, _, g) = &train_init[i];
            match h {
                Some(h) => x.slice_mut(s![..m, c]).assign(&h.column(c)),
                None => x.slice_mut(s![..m, c]).assign(h0),
            }
            x.slice_mut(s![m.., c]).assign(g);
        }
        x
    };

    let mut head = LinearHead::zeros(k, width);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut head_opt = Adam::new(adam, &head);
    let mut tuned = match cfg.mode {
        FineTuneMode::Freeze => None,
        FineTuneMode::Unfreeze => Some(encoder.clone()),
    };
    let mut enc_opt = tuned.as_ref().map(|e| Adam::new(adam, e));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_init.len()).collect();
    let mut best: Option<(f64, LinearHead, Option<GruEncoder>)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let enc_now = tuned.as_ref();
            let partials: Vec<(f64, LinearHead, Option<GruEncoder>)> = batch
                .par_chunks(WINDOW_CHUNK)
                .map(|chunk| -> Result<_> {
                    let encoded = match enc_now {
                        Some(e) => {
                            let seqs: Vec<&[Event]> = chunk.iter().map(|&i| raw_train[i].0).collect();
                            Some(e.forward_batch_cached(&seqs)?)
                        }
                        None => None,
                    };
                    let x = feature_matrix(chunk, encoded.as_ref().map(|(h, _)| h));
                    let mut p = head.w.dot(&x) + &head.b.view().insert_axis(Axis(1));
                    let mut loss = 0.0;
                    for (c, mut col) in p.axis_iter_mut(Axis(1)).enumerate() {
                        let probs = softmax(&col.to_vec());
                        col.assign(&Array1::from(probs));
                        let target = train_init[chunk[c]].1;
                        loss -= col[target].max(1e-300).ln() * scale;
                        col[target] -= 1.0;
                    }
                    p *= scale;
                    let mut gh = LinearHead::zeros(k, width);
                    general_mat_mul(1.0, &p, &x.t(), 0.0, &mut gh.w);
                    gh.b = p.sum_axis(Axis(1));
                    let ge = match (enc_now, &encoded) {
                        (Some(e), Some((_, cache))) => {
                            let dh = head.w.slice(s![.., ..m]).t().dot(&p);
                            let mut ge = e.zeros_like();
                            e.backward_batch(cache, dh.view(), &mut ge);
                            Some(ge)
                        }
                        _ => None,
                    };
                    Ok((loss, gh, ge))
                })
                .collect::<Result<_>>()?;
            let mut gh = LinearHead::zeros(k, width);
            let mut ge = enc_now.map(GruEncoder::zeros_like);
            for (loss, h, e) in &partials {
                total += loss;
                gh.w += &h.w;
                gh.b += &h.b;
                if let (Some(acc), Some(e)) = (ge.as_mut(), e) {
                    acc.add_assign(e);
                }
            }
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("head loss at epoch {epoch}")));
            }
            head_opt.step(&mut head, &gh);
            if let (Some(enc), Some(opt), Some(ge)) = (tuned.as_mut(), enc_opt.as_mut(), ge.as_ref()) {
                opt.step(enc, ge);
            }
        }
        log::debug!("local head epoch {epoch}: loss {total:.4}");
        if !val_init.is_empty() {
            let auc = score(&head, tuned.as_ref(), &raw_val, &val_init, k)?;
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, head.clone(), tuned.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    log::debug!("local head stopped after epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((_, h, e)) = best {
        head = h;
        tuned = e;
    }

    Ok(LocalResult {
        auc: score(&head, tuned.as_ref(), &raw_test, &test_init, k)?,
        encoder: tuned,
        classes,
        train_windows: train_init.len(),
        test_windows: test_init.len(),
    })
}

/// Train users held out for early stopping, drawn from a seeded shuffle.
fn validation_users(dataset: &LabeledDataset, fraction: f64, seed: u64) -> BTreeSet<&str> {
    if fraction <= 0.0 {
        return BTreeSet::new();
    }
    let mut users = dataset.users(Split::Train);
    let n = ((users.len() as f64 * fraction).round() as usize).clamp(1, users.len().saturating_sub(1));
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a1));
    users.into_iter().take(n).collect()
}

/// Multiclass AUC of the head on `windows`, re-encoding `h` when the
/// encoder has been tuned.
fn score(
    head: &LinearHead,
    tuned: Option<&GruEncoder>,
    raw: &[(&[Event], usize)],
    init: &[(Array1<f64>, usize, Array1<f64>)],
    k: usize,
) -> Result<f64> {
    let hs: Vec<Array1<f64>> = match tuned {
        Some(e) => raw.par_iter().map(|(ev, _)| e.encode_last(ev)).collect::<Result<_>>()?,
        None => init.iter().map(|(h, _, _)| h.clone()).collect(),
    };
    let mut scores = Array2::zeros((init.len(), k));
    for (i, (h, (_, _, g))) in hs.iter().zip(init).enumerate() {
        let x = ndarray::concatenate(Axis(0), &[h.view(), g.view()]).expect("1-d");
        scores.row_mut(i).assign(&Array1::from(head.probs(x.view())));
    }
    let labels: Vec<usize> = init.iter().map(|(_, t, _)| *t).collect();
    roc_auc_multiclass(scores.view(), &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_starts(100, 32, 16), vec![0, 16, 32, 48, 64]);
        assert_eq!(window_starts(32, 32, 16), Vec::<usize>::new());
        assert_eq!(window_starts(33, 32, 16), vec![0]);
    }

    fn cyclic_dataset(users: usize, len: usize) -> LabeledDataset {
        let seqs = (0..users).map(|u| {
            let events = (0..len)
                .map(|i| Event {
                    t: i as f64,
                    event_type: ((i + u) % 3) as u32,
                    amount: 1.0,
                })
                .collect();
            crate::data::EventSequence::new(format!("u{u:02}"), events, Some(0)).unwrap()
        });
        crate::data::split_by_user(&LabeledDataset::from_sequences(seqs), 0.3, 0).unwrap()
    }

    #[test]
    fn learns_a_deterministic_successor() {
        let ds = cyclic_dataset(20, 80);
        let spec = crate::data::fit_normalizer(&ds, 4).unwrap();
        let enc = GruEncoder::new(spec, crate::encoder::EncoderConfig { hidden: 8 }, &mut ChaCha8Rng::seed_from_u64(1));
        let index = crate::store::AsOfIndex::new(8);
        let ctx: Vec<String> = vec![];
        let provider = ContextProvider::new(&index, &ctx, super::super::context::ContextSource::None).unwrap();
        let cfg = LocalEvalConfig {
            window: 8,
            stride: 4,
            epochs: 200,
            lr: 1e-2,
            top_k: 3,
            ..Default::default()
        };
        let before = enc.clone();
        let r = eval_local(&enc, &provider, &ds, &cfg, 0).unwrap();
        assert!(r.auc > 0.95, "auc {}", r.auc);
        assert!(r.encoder.is_none());
        assert_eq!(enc, before);
    }

    #[test]
    fn validation_users_come_from_train() {
        let ds = cyclic_dataset(20, 40);
        assert!(validation_users(&ds, 0.0, 0).is_empty());
        let train: BTreeSet<&str> = ds.users(Split::Train).into_iter().collect();
        let held = validation_users(&ds, 0.25, 3);
        assert_eq!(held.len(), (train.len() as f64 * 0.25).round() as usize);
        assert!(held.is_subset(&train));
        assert_eq!(held, validation_users(&ds, 0.25, 3));
        assert!(validation_users(&ds, 0.99, 3).len() < train.len());
    }

    #[test]
    fn early_stopping_keeps_a_good_head() {
        let ds = cyclic_dataset(20, 80);
        let spec = crate::data::fit_normalizer(&ds, 4).unwrap();
        let enc = GruEncoder::new(spec, crate::encoder::EncoderConfig { hidden: 8 }, &mut ChaCha8Rng::seed_from_u64(1));
        let index = crate::store::AsOfIndex::new(8);
        let ctx: Vec<String> = vec![];
        let provider = ContextProvider::new(&index, &ctx, super::super::context::ContextSource::None).unwrap();
        let cfg = LocalEvalConfig {
            window: 8,
            stride: 4,
            epochs: 200,
            lr: 1e-2,
            top_k: 3,
            validation_fraction: 0.2,
            patience: 5,
            ..Default::default()
        };
        let a = eval_local(&enc, &provider, &ds, &cfg, 0).unwrap();
        assert!(a.auc > 0.95, "auc {}", a.auc);
        assert_eq!(a.auc, eval_local(&enc, &provider, &ds, &cfg, 0).unwrap().auc);
        let bad = LocalEvalConfig { patience: 0, ..cfg };
        assert!(bad.validate().is_err());
    }
}
