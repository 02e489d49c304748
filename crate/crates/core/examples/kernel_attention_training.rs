//! Trains the kernel-attention aggregator contrastively over a frozen
//! encoder and reports the loss curve.

use ctxagg::aggregation::{train_aggregator, Aggregator, AggregatorKind};
use ctxagg::data::{fit_normalizer, split_by_user, Split};
use ctxagg::encoder::{pretrain, ColesConfig, EncoderConfig};
use ctxagg::store::AsOfIndex;
use ctxagg::synth::{simulate, GroupedSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ctxagg::Result<()> {
    let spec = GroupedSpec {
        n_users: 60,
        events_per_user: 120.0,
        ..GroupedSpec::default()
    };
    let ds = split_by_user(&simulate(&spec.build()?, 2)?.dataset, 0.3, 0)?;
    let cfg = ColesConfig {
        batch_size: 16,
        epochs: 3,
        min_len: 20,
        max_len: 80,
        ..ColesConfig::default()
    };
    let enc = pretrain(&ds, fit_normalizer(&ds, 8)?, EncoderConfig { hidden: 16 }, &cfg, 0)?.encoder;
    let trajectories = ds.sequences.values().map(|s| enc.forward(s)).collect::<ctxagg::Result<Vec<_>>>()?;
    let index = AsOfIndex::from_trajectories(enc.hidden(), &trajectories)?;
    let context: Vec<String> = ds.sequences.keys().cloned().collect();
    let tau = ds.median_inter_event_time(Split::Train).expect("train gaps");
    let init = Aggregator::init(AggregatorKind::KernelAttention, enc.hidden(), tau, &mut ChaCha8Rng::seed_from_u64(0))?;
    let trained = train_aggregator(init, &enc, &index, &context, &ds, &cfg, 0)?;
    for (epoch, loss) in trained.loss_curve.iter().enumerate() {
        println!("epoch {epoch}: loss {loss:.4}");
    }
    Ok(())
}
