//! Sequence-label AUC from GBDT over `[h; g]`, with and without context.

use ctxagg::aggregation::Aggregator;
use ctxagg::data::{fit_normalizer, split_by_user};
use ctxagg::encoder::{pretrain, ColesConfig, EncoderConfig};
use ctxagg::eval::{eval_global, ContextProvider, ContextSource, GlobalEvalConfig};
use ctxagg::store::AsOfIndex;
use ctxagg::synth::{simulate, GroupedSpec};

fn main() -> ctxagg::Result<()> {
    let spec = GroupedSpec {
        n_users: 120,
        events_per_user: 150.0,
        ..GroupedSpec::default()
    };
    let ds = split_by_user(&simulate(&spec.build()?, 0)?.dataset, 0.3, 0)?;
    let cfg = ColesConfig {
        batch_size: 32,
        epochs: 4,
        ..ColesConfig::default()
    };
    let enc = pretrain(&ds, fit_normalizer(&ds, 8)?, EncoderConfig { hidden: 16 }, &cfg, 0)?.encoder;
    let trajectories = ds.sequences.values().map(|s| enc.forward(s)).collect::<ctxagg::Result<Vec<_>>>()?;
    let index = AsOfIndex::from_trajectories(enc.hidden(), &trajectories)?;
    let context: Vec<String> = ds.sequences.keys().cloned().collect();
    let gcfg = GlobalEvalConfig::default();
    for source in [ContextSource::None, ContextSource::Aggregated(&Aggregator::Mean)] {
        let provider = ContextProvider::new(&index, &context, source)?;
        let auc = eval_global(&index, &provider, &ds, &gcfg, 0)?;
        println!("{:<10} global AUC {auc:.4}", source.label());
    }
    Ok(())
}
