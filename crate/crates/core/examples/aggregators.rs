//! All eight aggregators applied to one random snapshot and query.

use ctxagg::aggregation::{Aggregator, AggregatorKind};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ctxagg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, n) = (4, 6);
    let h = Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0));
    let q = h.column(2).to_owned();
    let last_times: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let t = n as f64;
    for kind in AggregatorKind::ALL {
        let agg = Aggregator::init(kind, m, 2.0, &mut rng)?;
        let g = agg.aggregate_raw(h.view(), Some(q.view()), &last_times, t)?;
        println!("{:<20} {:.4}", kind.name(), g);
    }
    Ok(())
}
