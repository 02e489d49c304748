//! Next-event-type AUC from sliding windows, in freeze and unfreeze modes.

use ctxagg::aggregation::Aggregator;
use ctxagg::data::{fit_normalizer, split_by_user};
use ctxagg::encoder::{pretrain, ColesConfig, EncoderConfig};
use ctxagg::eval::{eval_local, ContextProvider, ContextSource, FineTuneMode, LocalEvalConfig};
use ctxagg::store::AsOfIndex;
use ctxagg::synth::{simulate, GroupedSpec};

fn main() -> ctxagg::Result<()> {
    let spec = GroupedSpec {
        n_users: 60,
        events_per_user: 150.0,
        ..GroupedSpec::default()
    };
    let ds = split_by_user(&simulate(&spec.build()?, 0)?.dataset, 0.3, 0)?;
    let cfg = ColesConfig {
        batch_size: 16,
        epochs: 3,
        ..ColesConfig::default()
    };
    let enc = pretrain(&ds, fit_normalizer(&ds, 8)?, EncoderConfig { hidden: 16 }, &cfg, 0)?.encoder;
    let trajectories = ds.sequences.values().map(|s| enc.forward(s)).collect::<ctxagg::Result<Vec<_>>>()?;
    let index = AsOfIndex::from_trajectories(enc.hidden(), &trajectories)?;
    let context: Vec<String> = ds.sequences.keys().cloned().collect();
    for mode in [FineTuneMode::Freeze, FineTuneMode::Unfreeze] {
        let lcfg = LocalEvalConfig {
            epochs: 50,
            mode,
            ..LocalEvalConfig::default()
        };
        for source in [ContextSource::None, ContextSource::Aggregated(&Aggregator::Mean)] {
            let provider = ContextProvider::new(&index, &context, source)?;
            let r = eval_local(&enc, &provider, &ds, &lcfg, 0)?;
            println!(
                "{:<8} {:<10} local AUC {:.4} ({} train / {} test windows)",
                mode.name(),
                source.label(),
                r.auc,
                r.train_windows,
                r.test_windows
            );
        }
    }
    Ok(())
}
