//! Plain-attention matrix over pretrained embeddings: how often each user
//! attends most to itself.

use ctxagg::aggregation::{attention_matrix, Aggregator};
use ctxagg::data::{fit_normalizer, split_by_user};
use ctxagg::encoder::{pretrain, ColesConfig, EncoderConfig};
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
        epochs: 4,
        ..ColesConfig::default()
    };
    let enc = pretrain(&ds, fit_normalizer(&ds, 8)?, EncoderConfig { hidden: 16 }, &cfg, 0)?.encoder;
    let trajectories = ds.sequences.values().map(|s| enc.forward(s)).collect::<ctxagg::Result<Vec<_>>>()?;
    let index = AsOfIndex::from_trajectories(enc.hidden(), &trajectories)?;
    let users: Vec<String> = ds.sequences.keys().cloned().collect();
    let t_end = ds.sequences.values().map(|s| s.last_time()).fold(f64::NEG_INFINITY, f64::max);
    let snap = index.snapshot(&users, t_end)?;
    let w = attention_matrix(&Aggregator::Attention, snap.h.view())?;
    let diagonal = (0..w.nrows())
        .filter(|&i| w.row(i).iter().all(|&x| x <= w[[i, i]]))
        .count();
    println!("{} of {} rows peak on the diagonal", diagonal, w.nrows());
    println!("first row: {:.3}", w.row(0));
    Ok(())
}
