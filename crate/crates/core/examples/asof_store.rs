//! As-of lookups, snapshots and periodic refresh of external vectors.

use ctxagg::aggregation::Aggregator;
use ctxagg::encoder::EmbeddingTrajectory;
use ctxagg::store::{refresh_external, AsOfIndex, RefreshPolicy};
use ndarray::array;

fn main() -> ctxagg::Result<()> {
    let trajectories = [
        EmbeddingTrajectory {
            user_id: "alice".into(),
            times: vec![0.5, 2.0, 3.5],
            states: array![[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]],
        },
        EmbeddingTrajectory {
            user_id: "bob".into(),
            times: vec![1.0, 4.0],
            states: array![[2.0, 2.0], [-1.0, 3.0]],
        },
    ];
    let index = AsOfIndex::from_trajectories(2, &trajectories)?;
    for t in [0.5, 1.0, 2.5, 4.0] {
        let snap = index.snapshot(&["alice", "bob"], t)?;
        println!("t={t}: users {:?}, missing {:?}, H = {:?}", snap.users, snap.excluded, snap.h.as_slice());
    }
    if let Some(e) = index.asof("alice", 3.0) {
        println!("alice as of 3.0: state from t={}", e.t);
    }

    let context = vec!["alice".to_string(), "bob".to_string()];
    let policy = RefreshPolicy::new(1.0)?;
    let store = refresh_external(&index, &Aggregator::Mean, &context, &policy, 0.5, 4.0)?;
    for q in [1.2, 3.9] {
        if let Some((tick, g)) = store.serve("alice", q) {
            println!("served to alice at {q}: tick {tick}, g = {g}");
        }
    }
    Ok(())
}
