//! Global and local AUC as the number of context users grows.

use ctxagg::aggregation::Aggregator;
use ctxagg::data::{fit_normalizer, split_by_user};
use ctxagg::encoder::{pretrain, ColesConfig, EncoderConfig};
use ctxagg::eval::{sweep_context_size, GlobalEvalConfig, LocalEvalConfig};
use ctxagg::store::AsOfIndex;
use ctxagg::synth::{simulate, GroupedSpec};

fn main() -> ctxagg::Result<()> {
    let spec = GroupedSpec {
        n_users: 100,
        events_per_user: 120.0,
        ..GroupedSpec::default()
    };
    let ds = split_by_user(&simulate(&spec.build()?, 0)?.dataset, 0.3, 0)?;
    let cfg = ColesConfig {
        batch_size: 32,
        epochs: 3,
        ..ColesConfig::default()
    };
    let enc = pretrain(&ds, fit_normalizer(&ds, 8)?, EncoderConfig { hidden: 16 }, &cfg, 0)?.encoder;
    let trajectories = ds.sequences.values().map(|s| enc.forward(s)).collect::<ctxagg::Result<Vec<_>>>()?;
    let index = AsOfIndex::from_trajectories(enc.hidden(), &trajectories)?;
    let pool: Vec<String> = ds.sequences.keys().cloned().collect();
    let local = LocalEvalConfig {
        epochs: 30,
        ..LocalEvalConfig::default()
    };
    let rows = sweep_context_size(
        &enc,
        &index,
        &ds,
        &Aggregator::Mean,
        &pool,
        &[5, 25, 100],
        &GlobalEvalConfig::default(),
        &local,
        0,
    )?;
    for r in rows {
        println!("{:>4} users  {:<6} {}  AUC {:.4}", r.size, r.task, r.method, r.auc);
    }
    Ok(())
}
