//! GRU sequence encoder with contrastive pretraining.

mod batch;
mod coles;
mod gru;

use std::io::Write;
use std::path::Path;

pub use coles::{
    batch_loss_and_grad, coles_loss, epoch_batches, pretrain, pretrain_from, sample_batch, sample_subsequence,
    ColesConfig, Pretrained,
};
pub(crate) use coles::GRAD_CHUNK;
pub use batch::BatchCache;
pub use gru::{encode_asof, EmbeddingTrajectory, EncoderConfig, GruCache, GruEncoder};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::data::{Event, FeatureSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_check, GradCheckReport};
use crate::nn::Parameters;

pub const ENCODER_KIND: &str = "encoder";

impl GruEncoder {
    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let meta = serde_json::json!({ "feature_spec": self.spec, "hidden": self.hidden() });
        Checkpoint::from_tensors(CheckpointHeader::new(ENCODER_KIND, seed, config_hash, meta), &self.tensors())
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.header.kind != ENCODER_KIND {
            return Err(Error::Format(format!("expected encoder checkpoint, found {}", c.header.kind)));
        }
        let spec: FeatureSpec = serde_json::from_value(c.header.meta["feature_spec"].clone())?;
        let hidden = c.header.meta["hidden"]
            .as_u64()
            .ok_or_else(|| Error::Format("encoder checkpoint lacks hidden width".into()))? as usize;
        let mut enc = GruEncoder::zeros(spec, EncoderConfig { hidden });
        let names: Vec<&'static str> = enc.tensors().iter().map(|t| t.name).collect();
        c.restore_into(names.into_iter().zip(enc.tensors_mut()).collect())?;
        Ok(enc)
    }

    pub fn save(&self, path: &Path, seed: u64, config_hash: &str) -> Result<()> {
        self.to_checkpoint(seed, config_hash).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Contrastive loss of a small batch of `(owner, events)` as a function of
/// the encoder parameters.
fn batch_loss(enc: &GruEncoder, batch: &[(usize, Vec<Event>)], margin: f64) -> Result<f64> {
    let embs = batch
        .iter()
        .map(|(_, ev)| enc.encode_last(ev))
        .collect::<Result<Vec<_>>>()?;
    let owners: Vec<usize> = batch.iter().map(|(o, _)| *o).collect();
    Ok(coles_loss(&embs, &owners, margin)?.0)
}

/// Analytic encoder gradient of the contrastive loss versus central finite
/// differences over every parameter entry.
pub fn check_gradients(
    enc: &GruEncoder,
    batch: &[(usize, Vec<Event>)],
    margin: f64,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let items: Vec<(usize, &[Event])> = batch.iter().map(|(o, e)| (*o, e.as_slice())).collect();
    let (_, grads) = batch_loss_and_grad(enc, &items, margin)?;
    batch_loss(enc, batch, margin)?;
    Ok(finite_difference_check(
        enc,
        &grads,
        |p| batch_loss(p, batch, margin).expect("validated batch"),
        epsilon,
    ))
}

/// Writes `user,t,e0..e{m-1}` rows for every trajectory state.
pub fn write_embeddings_csv<'a>(
    path: &Path,
    trajectories: impl IntoIterator<Item = &'a EmbeddingTrajectory>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header_written = false;
    for traj in trajectories {
        if !header_written {
            let cols: Vec<String> = (0..traj.states.ncols()).map(|k| format!("e{k}")).collect();
            writeln!(w, "user,t,{}", cols.join(",")).map_err(|e| Error::io(path, e))?;
            header_written = true;
        }
        for (j, t) in traj.times.iter().enumerate() {
            let vals: Vec<String> = traj.states.row(j).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{t},{}", traj.user_id, vals.join(",")).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EventSequence, LabeledDataset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(vocab: usize, d_cat: usize) -> FeatureSpec {
        FeatureSpec {
            vocab_size: vocab,
            d_cat,
            d_cont: 1,
            cont_mean: 1.0,
            cont_std: 2.0,
        }
    }

    fn random_events(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<Event> {
        let mut t = 0.0;
        (0..n)
            .map(|_| {
                t += rng.random_range(0.1..1.0);
                Event {
                    t,
                    event_type: rng.random_range(0..vocab),
                    amount: rng.random_range(0.0..5.0),
                }
            })
            .collect()
    }

    #[test]
    fn gradient_check_small_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = GruEncoder::new(spec(4, 3), EncoderConfig { hidden: 4 }, &mut rng);
        let batch = vec![(0, random_events(&mut rng, 5, 4)), (1, random_events(&mut rng, 5, 4))];
        let r = check_gradients(&enc, &batch, 0.5, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > 0);
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = GruEncoder::new(spec(5, 2), EncoderConfig { hidden: 3 }, &mut rng);
        let c = enc.to_checkpoint(1, "h");
        let back = GruEncoder::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.spec, enc.spec);
        for (a, b) in back.tensors().iter().zip(enc.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert_eq!(back.to_checkpoint(1, "h").to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    fn toy_dataset(users: usize, len: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<_> = (0..users)
            .map(|u| EventSequence::new(format!("u{u}"), random_events(&mut rng, len, 4), None).unwrap())
            .collect();
        LabeledDataset::from_sequences(seqs)
    }

    fn small_cfg(epochs: usize) -> ColesConfig {
        ColesConfig {
            min_len: 5,
            max_len: 15,
            batch_size: 4,
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = toy_dataset(6, 20, 0);
        let mut cfg = small_cfg(3);
        cfg.adam.lr = 0.0;
        let a = pretrain(&ds, spec(4, 2), EncoderConfig { hidden: 4 }, &cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let init = GruEncoder::new(spec(4, 2), EncoderConfig { hidden: 4 }, &mut rng);
        assert_eq!(a.encoder, init);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let ds = toy_dataset(6, 20, 0);
        let a = pretrain(&ds, spec(4, 2), EncoderConfig { hidden: 4 }, &small_cfg(2), 3).unwrap();
        let b = pretrain(&ds, spec(4, 2), EncoderConfig { hidden: 4 }, &small_cfg(2), 3).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.loss_curve.len(), 2);
    }

    #[test]
    fn pretraining_needs_two_users() {
        let ds = toy_dataset(1, 20, 0);
        assert!(pretrain(&ds, spec(4, 2), EncoderConfig { hidden: 4 }, &small_cfg(1), 0).is_err());
    }
}
