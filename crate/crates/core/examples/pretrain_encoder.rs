//! Contrastive pretraining of the GRU encoder, plus a finite-difference
//! check of its gradient on a tiny batch.

use ctxagg::data::{fit_normalizer, split_by_user};
use ctxagg::encoder::{check_gradients, pretrain, ColesConfig, EncoderConfig};
use ctxagg::synth::{simulate, GroupedSpec};

fn main() -> ctxagg::Result<()> {
    let spec = GroupedSpec {
        n_users: 60,
        events_per_user: 120.0,
        ..GroupedSpec::default()
    };
    let data = simulate(&spec.build()?, 1)?;
    let ds = split_by_user(&data.dataset, 0.3, 0)?;
    let features = fit_normalizer(&ds, 8)?;
    let cfg = ColesConfig {
        batch_size: 16,
        epochs: 5,
        min_len: 20,
        max_len: 80,
        ..ColesConfig::default()
    };
    let pre = pretrain(&ds, features, EncoderConfig { hidden: 16 }, &cfg, 0)?;
    for (epoch, loss) in pre.loss_curve.iter().enumerate() {
        println!("epoch {epoch}: loss {loss:.4}");
    }

    let seqs: Vec<_> = ds.sequences.values().take(3).collect();
    let batch: Vec<_> = seqs
        .iter()
        .enumerate()
        .flat_map(|(u, s)| [(u, s.events[..6].to_vec()), (u, s.events[6..12].to_vec())])
        .collect();
    let report = check_gradients(&pre.encoder, &batch, 0.5, 1e-5)?;
    println!("gradient check: {report:?}");
    Ok(())
}
