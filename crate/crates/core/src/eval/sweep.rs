use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::context::{ContextProvider, ContextSource};
use super::global::{eval_global, GlobalEvalConfig};
use super::local::{eval_local, LocalEvalConfig};
use super::report::{TASK_GLOBAL, TASK_LOCAL};
use crate::aggregation::Aggregator;
use crate::data::LabeledDataset;
use crate::encoder::GruEncoder;
use crate::error::{Error, Result};
use crate::store::AsOfIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub auc: f64,
}

/// Prefixes of one seeded shuffle of `pool`, so every subset contains the
/// smaller ones.
pub fn nested_subsets(pool: &[String], sizes: &[usize], seed: u64) -> Result<Vec<Vec<String>>> {
    if sizes.is_empty() {
        return Err(Error::invalid("no context sizes given"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::invalid(format!("context sizes {sizes:?} must be positive and strictly ascending")));
    }
    let largest = *sizes.last().expect("non-empty");
    if largest > pool.len() {
        return Err(Error::invalid(format!(
            "context size {largest} exceeds the {} available users",
            pool.len()
        )));
    }
    let mut order = pool.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sizes.iter().map(|&n| order[..n].to_vec()).collect())
}

/// Global and local AUC for each nested context subset.
#[allow(clippy::too_many_arguments)]
pub fn sweep_context_size(
    encoder: &GruEncoder,
    index: &AsOfIndex,
    dataset: &LabeledDataset,
    aggregator: &Aggregator,
    pool: &[String],
    sizes: &[usize],
    global: &GlobalEvalConfig,
    local: &LocalEvalConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let method = aggregator.kind().name().to_string();
    let mut rows = Vec::with_capacity(2 * sizes.len());
    for (size, context) in sizes.iter().zip(nested_subsets(pool, sizes, seed)?) {
        let provider = ContextProvider::new(index, &context, ContextSource::Aggregated(aggregator))?;
        let g = eval_global(index, &provider, dataset, global, seed)?;
        let l = eval_local(encoder, &provider, dataset, local, seed)?.auc;
        log::info!("{method} with {size} context users: global {g:.4}, local {l:.4}");
        for (task, auc) in [(TASK_GLOBAL, g), (TASK_LOCAL, l)] {
            rows.push(SweepRow {
                size: *size,
                task: task.into(),
                method: method.clone(),
                seed,
                auc,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["size", "task", "method", "seed", "auc"])?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.task.clone(),
            r.method.clone(),
            r.seed.to_string(),
            format!("{:.6}", r.auc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i:03}")).collect()
    }

    #[test]
    fn subsets_are_nested_and_seeded() {
        let p = pool(50);
        let s = nested_subsets(&p, &[5, 20, 50], 3).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 20, 50]);
        assert_eq!(s[1][..5], s[0][..]);
        assert_eq!(s[2][..20], s[1][..]);
        assert_eq!(nested_subsets(&p, &[5, 20, 50], 3).unwrap(), s);
        assert_ne!(nested_subsets(&p, &[5], 4).unwrap()[0], s[0]);
    }

    #[test]
    fn bad_sizes_are_rejected() {
        let p = pool(10);
        assert!(nested_subsets(&p, &[5, 11], 0).is_err());
        assert!(nested_subsets(&p, &[5, 5], 0).is_err());
        assert!(nested_subsets(&p, &[0], 0).is_err());
        assert!(nested_subsets(&p, &[], 0).is_err());
        assert_eq!(nested_subsets(&p, &[10], 0).unwrap().len(), 1);
    }
}
