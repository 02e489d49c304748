use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::aggregation::Aggregator;
use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::store::{AsOfIndex, ContextAggregator};

/// Where the `g` half of the features comes from.
#[derive(Debug, Clone, Copy)]
pub enum ContextSource<'a> {
    /// Features are `h` only.
    None,
    /// `g ≡ 0`, keeping the `[h; g]` width.
    Zeros,
    Aggregated(&'a Aggregator),
}

impl ContextSource<'_> {
    pub fn label(&self) -> String {
        match self {
            Self::None => "NoContext".into(),
            Self::Zeros => "ZeroContext".into(),
            Self::Aggregated(a) => a.kind().name().into(),
        }
    }
}

/// Serves `g` for arbitrary `(h_t, t)` queries against a fixed context user
/// list. Kernel attention reuses `φ` of every stored context state instead of
/// recomputing it per query.
pub struct ContextProvider<'a> {
    index: &'a AsOfIndex,
    context: &'a [String],
    source: ContextSource<'a>,
    phi_states: HashMap<&'a str, Array2<f64>>,
}

impl<'a> ContextProvider<'a> {
    pub fn new(index: &'a AsOfIndex, context: &'a [String], source: ContextSource<'a>) -> Result<Self> {
        if matches!(source, ContextSource::Aggregated(_)) && context.is_empty() {
            return Err(Error::invalid("context user list is empty"));
        }
        let mut phi_states = HashMap::new();
        if let ContextSource::Aggregated(Aggregator::KernelAttention { phi }) = source {
            for u in context {
                if let Some(states) = index.states(u) {
                    phi_states.insert(u.as_str(), phi.forward_cols(states.view()));
                }
            }
        }
        Ok(Self {
            index,
            context,
            source,
            phi_states,
        })
    }

    pub fn width(&self) -> usize {
        match self.source {
            ContextSource::None => 0,
            _ => self.index.width(),
        }
    }

    /// `g` at time `t` for query state `q`; empty for [`ContextSource::None`].
    pub fn context_at(&self, q: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        match self.source {
            ContextSource::None => Ok(Array1::zeros(0)),
            ContextSource::Zeros => Ok(Array1::zeros(self.index.width())),
            ContextSource::Aggregated(Aggregator::KernelAttention { phi }) => {
                let snap = self.index.snapshot(self.context, t)?;
                let pq = phi.forward_cols(q.insert_axis(Axis(1)));
                let pq = pq.column(0);
                let scores: Vec<f64> = snap
                    .users
                    .iter()
                    .map(|u| {
                        let pos = self.index.asof_position(u, t).expect("present in snapshot");
                        self.phi_states[u.as_str()].column(pos).dot(&pq)
                    })
                    .collect();
                Ok(snap.h.dot(&ArrayView1::from(&softmax(&scores))))
            }
            ContextSource::Aggregated(agg) => {
                let snap = self.index.snapshot(self.context, t)?;
                agg.aggregate(&snap, Some(q))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregatorKind;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cached_kernel_path_matches_direct_formula() {
        let mut idx = AsOfIndex::new(2);
        idx.insert("a", 1.0, array![0.1, 0.9].view()).unwrap();
        idx.insert("a", 3.0, array![-0.4, 0.2].view()).unwrap();
        idx.insert("b", 2.0, array![0.7, -0.3].view()).unwrap();
        let ctx = vec!["a".to_string(), "b".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agg = Aggregator::init(AggregatorKind::KernelAttention, 2, 1.0, &mut rng).unwrap();
        let p = ContextProvider::new(&idx, &ctx, ContextSource::Aggregated(&agg)).unwrap();
        let q = array![0.5, 0.5];
        for t in [2.5, 4.0] {
            let fast = p.context_at(q.view(), t).unwrap();
            let slow = agg.aggregate(&idx.snapshot(&ctx, t).unwrap(), Some(q.view())).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
