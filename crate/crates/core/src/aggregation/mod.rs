//! External-context aggregators `g_t = A(H, h_t)`.
//!
//! `H` is `m × n` with one column per context user, `T` holds the time of
//! each column's state and `t` is the query time. The free functions take
//! their feature maps as closures over column matrices so tests can swap in
//! identity or projection doubles.

mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{check_aggregator_gradients, train_aggregator, AggCache, TrainItem, TrainedAggregator};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::error::{Error, Result};
use crate::nn::{softmax, tensor2, Mlp, Parameters, Tensor};
use crate::store::{ContextAggregator, Snapshot};

/// Hidden width of φ and φ_NN.
pub const MLP_HIDDEN: usize = 100;
/// Output width of the kernel feature map φ.
pub const KERNEL_WIDTH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AggregatorKind {
    Mean,
    Max,
    Attention,
    LearnableAttention,
    KernelAttention,
    ExpHawkes,
    LearnableExpHawkes,
    AttentionHawkes,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 8] = [
        Self::Mean,
        Self::Max,
        Self::Attention,
        Self::LearnableAttention,
        Self::KernelAttention,
        Self::ExpHawkes,
        Self::LearnableExpHawkes,
        Self::AttentionHawkes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "Mean",
            Self::Max => "Max",
            Self::Attention => "Attention",
            Self::LearnableAttention => "LearnableAttention",
            Self::KernelAttention => "KernelAttention",
            Self::ExpHawkes => "ExpHawkes",
            Self::LearnableExpHawkes => "LearnableExpHawkes",
            Self::AttentionHawkes => "AttentionHawkes",
        }
    }

    pub fn is_learnable(self) -> bool {
        matches!(self, Self::LearnableAttention | Self::KernelAttention | Self::LearnableExpHawkes)
    }

    pub fn query_dependent(self) -> bool {
        !matches!(self, Self::Mean | Self::Max | Self::ExpHawkes)
    }

    pub fn uses_time(self) -> bool {
        matches!(self, Self::ExpHawkes | Self::LearnableExpHawkes | Self::AttentionHawkes)
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are ignored (`kernel-attention` works).
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.name().to_lowercase() == key)
            .ok_or_else(|| Error::invalid(format!("unknown aggregator `{s}`")))
    }
}

fn check_context(h: ArrayView2<f64>) -> Result<()> {
    if h.ncols() == 0 {
        return Err(Error::invalid("empty context matrix"));
    }
    Ok(())
}

fn check_query(h: ArrayView2<f64>, q: ArrayView1<f64>) -> Result<()> {
    check_context(h)?;
    if q.len() != h.nrows() {
        return Err(Error::shape(format!("query of width {}", h.nrows()), q.len()));
    }
    Ok(())
}

fn combine(h: ArrayView2<f64>, w: &[f64]) -> Array1<f64> {
    h.dot(&ArrayView1::from(w))
}

pub fn agg_mean(h: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_context(h)?;
    Ok(h.mean_axis(Axis(1)).expect("non-empty"))
}

pub fn agg_max(h: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_context(h)?;
    Ok(h.map_axis(Axis(1), |row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)))
}

/// `softmax(Hᵀ h_t)`.
pub fn attention_weights(h: ArrayView2<f64>, q: ArrayView1<f64>) -> Result<Vec<f64>> {
    check_query(h, q)?;
    Ok(softmax(h.t().dot(&q).as_slice().unwrap()))
}

/// `H softmax(Hᵀ h_t)`.
pub fn agg_attention(h: ArrayView2<f64>, q: ArrayView1<f64>) -> Result<Array1<f64>> {
    let w = attention_weights(h, q)?;
    Ok(combine(h, &w))
}

/// `H softmax(Hᵀ A h_t)`.
pub fn agg_learnable_attention(h: ArrayView2<f64>, q: ArrayView1<f64>, a: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_query(h, q)?;
    let m = h.nrows();
    if a.dim() != (m, m) {
        return Err(Error::shape(format!("A of shape {m}x{m}"), format!("{}x{}", a.nrows(), a.ncols())));
    }
    let w = softmax(h.t().dot(&a.dot(&q)).as_slice().unwrap());
    Ok(combine(h, &w))
}

/// `H softmax(⟨φ(H), φ(h_t)⟩)`; `phi` maps every column of its argument.
pub fn agg_kernel_attention<F>(h: ArrayView2<f64>, q: ArrayView1<f64>, phi: F) -> Result<Array1<f64>>
where
    F: Fn(ArrayView2<f64>) -> Array2<f64>,
{
    check_query(h, q)?;
    let ph = phi(h);
    let pq = phi(q.insert_axis(Axis(1)));
    if ph.nrows() != pq.nrows() || ph.ncols() != h.ncols() {
        return Err(Error::shape(
            format!("feature map output {}x{}", pq.nrows(), h.ncols()),
            format!("{}x{}", ph.nrows(), ph.ncols()),
        ));
    }
    let w = softmax(ph.t().dot(&pq.column(0)).as_slice().unwrap());
    Ok(combine(h, &w))
}

/// `exp(−(t − T_i)/τ)` per column.
pub fn decay_weights(last_times: &[f64], t: f64, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("time scale must be positive, got {tau}")));
    }
    last_times
        .iter()
        .map(|&ti| {
            if ti > t {
                Err(Error::invalid(format!("context state time {ti} after query time {t}")))
            } else {
                Ok((-(t - ti) / tau).exp())
            }
        })
        .collect()
}

fn check_times(h: ArrayView2<f64>, last_times: &[f64]) -> Result<()> {
    if last_times.len() != h.ncols() {
        return Err(Error::shape(format!("{} context times", h.ncols()), last_times.len()));
    }
    Ok(())
}

/// `Σ_i exp(−(t − T_i)/τ) H_i`, not renormalized.
pub fn agg_exp_hawkes(h: ArrayView2<f64>, last_times: &[f64], t: f64, tau: f64) -> Result<Array1<f64>> {
    check_context(h)?;
    check_times(h, last_times)?;
    Ok(combine(h, &decay_weights(last_times, t, tau)?))
}

/// `Σ_i exp(−(t − T_i)/τ) φ_NN([H_i ; h_t])`.
pub fn agg_learnable_exp_hawkes<F>(
    h: ArrayView2<f64>,
    q: ArrayView1<f64>,
    last_times: &[f64],
    t: f64,
    tau: f64,
    phi_nn: F,
) -> Result<Array1<f64>>
where
    F: Fn(ArrayView2<f64>) -> Array2<f64>,
{
    check_query(h, q)?;
    check_times(h, last_times)?;
    let d = decay_weights(last_times, t, tau)?;
    let y = phi_nn(stack_query(h, q).view());
    if y.ncols() != h.ncols() {
        return Err(Error::shape(h.ncols(), y.ncols()));
    }
    Ok(combine(y.view(), &d))
}

/// `[H ; h_t 1ᵀ]`, shape `2m × n`.
pub(crate) fn stack_query(h: ArrayView2<f64>, q: ArrayView1<f64>) -> Array2<f64> {
    let qs = q.insert_axis(Axis(1));
    let tiled = qs.broadcast((q.len(), h.ncols())).expect("broadcast column");
    concatenate(Axis(0), &[h, tiled]).expect("matching column count")
}

/// `H (softmax(Hᵀ h_t) ⊙ exp(−(t − T)/τ))`, not renormalized.
pub fn agg_attention_hawkes(
    h: ArrayView2<f64>,
    q: ArrayView1<f64>,
    last_times: &[f64],
    t: f64,
    tau: f64,
) -> Result<Array1<f64>> {
    check_times(h, last_times)?;
    let a = attention_weights(h, q)?;
    let d = decay_weights(last_times, t, tau)?;
    let w: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x * y).collect();
    Ok(combine(h, &w))
}

/// `[h_t ; g_t]`.
pub fn concat_context(h: ArrayView1<f64>, g: ArrayView1<f64>) -> Result<Array1<f64>> {
    if h.len() != g.len() {
        return Err(Error::shape(format!("context of width {}", h.len()), g.len()));
    }
    Ok(concatenate(Axis(0), &[h, g]).expect("1-d"))
}

/// An aggregator together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregator {
    Mean,
    Max,
    Attention,
    LearnableAttention { a: Array2<f64> },
    KernelAttention { phi: Mlp },
    ExpHawkes { tau: f64 },
    LearnableExpHawkes { tau: f64, phi: Mlp },
    AttentionHawkes { tau: f64 },
}

impl Aggregator {
    /// Fresh aggregator for width-`m` embeddings: `A = I`, feature maps with
    /// fan-in uniform weights.
    pub fn init<R: Rng>(kind: AggregatorKind, m: usize, tau: f64, rng: &mut R) -> Result<Self> {
        if kind.uses_time() && !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config {
                field: "aggregator.tau".into(),
                message: format!("must be positive and finite, got {tau}"),
            });
        }
        Ok(match kind {
            AggregatorKind::Mean => Self::Mean,
            AggregatorKind::Max => Self::Max,
            AggregatorKind::Attention => Self::Attention,
            AggregatorKind::LearnableAttention => Self::LearnableAttention { a: Array2::eye(m) },
            AggregatorKind::KernelAttention => Self::KernelAttention {
                phi: Mlp::new(m, MLP_HIDDEN, KERNEL_WIDTH, rng),
            },
            AggregatorKind::ExpHawkes => Self::ExpHawkes { tau },
            AggregatorKind::LearnableExpHawkes => Self::LearnableExpHawkes {
                tau,
                phi: Mlp::new(2 * m, MLP_HIDDEN, m, rng),
            },
            AggregatorKind::AttentionHawkes => Self::AttentionHawkes { tau },
        })
    }

    pub fn kind(&self) -> AggregatorKind {
        match self {
            Self::Mean => AggregatorKind::Mean,
            Self::Max => AggregatorKind::Max,
            Self::Attention => AggregatorKind::Attention,
            Self::LearnableAttention { .. } => AggregatorKind::LearnableAttention,
            Self::KernelAttention { .. } => AggregatorKind::KernelAttention,
            Self::ExpHawkes { .. } => AggregatorKind::ExpHawkes,
            Self::LearnableExpHawkes { .. } => AggregatorKind::LearnableExpHawkes,
            Self::AttentionHawkes { .. } => AggregatorKind::AttentionHawkes,
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match self {
            Self::ExpHawkes { tau } | Self::LearnableExpHawkes { tau, .. } | Self::AttentionHawkes { tau } => Some(*tau),
            _ => None,
        }
    }

    /// Gradient container of the same shape with all parameters zero.
    pub fn zeros_like(&self) -> Self {
        match self {
            Self::LearnableAttention { a } => Self::LearnableAttention {
                a: Array2::zeros(a.raw_dim()),
            },
            Self::KernelAttention { phi } => Self::KernelAttention { phi: phi.zeros_like() },
            Self::LearnableExpHawkes { tau, phi } => Self::LearnableExpHawkes {
                tau: *tau,
                phi: phi.zeros_like(),
            },
            other => other.clone(),
        }
    }

    pub fn add_assign(&mut self, other: &Aggregator) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.data).for_each(|(x, y)| *x += y);
        }
    }

    /// `g` for raw inputs; `q` may be omitted for query-independent kinds.
    pub fn aggregate_raw(
        &self,
        h: ArrayView2<f64>,
        q: Option<ArrayView1<f64>>,
        last_times: &[f64],
        t: f64,
    ) -> Result<Array1<f64>> {
        let need = || Error::invalid(format!("{} needs the query state h_t", self.kind()));
        match self {
            Self::Mean => agg_mean(h),
            Self::Max => agg_max(h),
            Self::Attention => agg_attention(h, q.ok_or_else(need)?),
            Self::LearnableAttention { a } => agg_learnable_attention(h, q.ok_or_else(need)?, a.view()),
            Self::KernelAttention { phi } => agg_kernel_attention(h, q.ok_or_else(need)?, |x| phi.forward_cols(x)),
            Self::ExpHawkes { tau } => agg_exp_hawkes(h, last_times, t, *tau),
            Self::LearnableExpHawkes { tau, phi } => {
                agg_learnable_exp_hawkes(h, q.ok_or_else(need)?, last_times, t, *tau, |x| phi.forward_cols(x))
            }
            Self::AttentionHawkes { tau } => agg_attention_hawkes(h, q.ok_or_else(need)?, last_times, t, *tau),
        }
    }

    /// `g` for every column of `queries` (`m × B`) against one snapshot,
    /// sharing the work that does not depend on the query.
    pub fn aggregate_many(
        &self,
        h: ArrayView2<f64>,
        queries: ArrayView2<f64>,
        last_times: &[f64],
        t: f64,
    ) -> Result<Array2<f64>> {
        check_context(h)?;
        if queries.nrows() != h.nrows() {
            return Err(Error::shape(format!("queries of width {}", h.nrows()), queries.nrows()));
        }
        let b = queries.ncols();
        let weighted = |scores: Array2<f64>, decay: Option<&[f64]>| -> Array2<f64> {
            let mut w = Array2::zeros(scores.raw_dim());
            for (j, col) in scores.columns().into_iter().enumerate() {
                let mut p = softmax(&col.to_vec());
                if let Some(d) = decay {
                    p.iter_mut().zip(d).for_each(|(x, y)| *x *= y);
                }
                w.column_mut(j).assign(&ArrayView1::from(&p));
            }
            h.dot(&w)
        };
        match self {
            Self::Mean | Self::Max | Self::ExpHawkes { .. } => {
                let g = self.aggregate_raw(h, None, last_times, t)?;
                Ok(g.insert_axis(Axis(1)).broadcast((h.nrows(), b)).expect("column").to_owned())
            }
            Self::Attention => Ok(weighted(h.t().dot(&queries), None)),
            Self::LearnableAttention { a } => Ok(weighted(h.t().dot(&a.dot(&queries)), None)),
            Self::KernelAttention { phi } => {
                let ph = phi.forward_cols(h);
                Ok(weighted(ph.t().dot(&phi.forward_cols(queries)), None))
            }
            Self::AttentionHawkes { tau } => {
                check_times(h, last_times)?;
                let d = decay_weights(last_times, t, *tau)?;
                Ok(weighted(h.t().dot(&queries), Some(&d)))
            }
            Self::LearnableExpHawkes { .. } => {
                let mut g = Array2::zeros((h.nrows(), b));
                for (j, q) in queries.columns().into_iter().enumerate() {
                    g.column_mut(j).assign(&self.aggregate_raw(h, Some(q), last_times, t)?);
                }
                Ok(g)
            }
        }
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let meta = serde_json::json!({ "tau": self.tau(), "m": self.width() });
        Checkpoint::from_tensors(CheckpointHeader::new(self.kind().name(), seed, config_hash, meta), &self.tensors())
    }

    /// Embedding width the parameters were built for, when they fix one.
    pub fn width(&self) -> Option<usize> {
        match self {
            Self::LearnableAttention { a } => Some(a.nrows()),
            Self::KernelAttention { phi } => Some(phi.input_width()),
            Self::LearnableExpHawkes { phi, .. } => Some(phi.output_width()),
            _ => None,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint, m: usize) -> Result<Self> {
        let kind: AggregatorKind = c.header.kind.parse()?;
        let tau = c.header.meta["tau"].as_f64().unwrap_or(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut agg = Aggregator::init(kind, m, tau, &mut rng)?;
        let names: Vec<&'static str> = agg.tensors().iter().map(|t| t.name).collect();
        c.restore_into(names.into_iter().zip(agg.tensors_mut()).collect())?;
        Ok(agg)
    }

    pub fn save(&self, path: &Path, seed: u64, config_hash: &str) -> Result<()> {
        self.to_checkpoint(seed, config_hash).save(path)
    }

    pub fn load(path: &Path, m: usize) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, m)
    }
}

impl ContextAggregator for Aggregator {
    fn query_dependent(&self) -> bool {
        self.kind().query_dependent()
    }

    fn aggregate(&self, snapshot: &Snapshot, query: Option<ArrayView1<f64>>) -> Result<Array1<f64>> {
        self.aggregate_raw(snapshot.h.view(), query, &snapshot.last_times, snapshot.t)
    }
}

impl Parameters for Aggregator {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        match self {
            Self::LearnableAttention { a } => vec![tensor2("a", a)],
            Self::KernelAttention { phi } | Self::LearnableExpHawkes { phi, .. } => phi.tensors(),
            _ => Vec::new(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Self::LearnableAttention { a } => vec![a.as_slice_mut().unwrap()],
            Self::KernelAttention { phi } | Self::LearnableExpHawkes { phi, .. } => phi.tensors_mut(),
            _ => Vec::new(),
        }
    }
}

/// Row `i` holds the attention weights when column `i` is the query.
pub fn attention_matrix(agg: &Aggregator, h: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_context(h)?;
    let scores = match agg {
        Aggregator::Attention => h.t().dot(&h),
        Aggregator::LearnableAttention { a } => h.t().dot(&a.dot(&h)),
        Aggregator::KernelAttention { phi } => {
            let p = phi.forward_cols(h);
            p.t().dot(&p)
        }
        other => {
            return Err(Error::invalid(format!("no attention matrix defined for {}", other.kind())));
        }
    };
    let mut out = Array2::zeros(scores.raw_dim());
    for (i, row) in scores.rows().into_iter().enumerate() {
        let w = softmax(&row.to_vec());
        out.row_mut(i).assign(&ArrayView1::from(&w));
    }
    Ok(out)
}

/// Row-major CSV with the user ids as header.
pub fn write_attention_csv(path: &Path, users: &[String], matrix: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(users)?;
    for row in matrix.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn batched_queries_match_single_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let qs = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let times = [0.5, 1.0, 1.5, 0.2, 2.0];
        for kind in AggregatorKind::ALL {
            let agg = Aggregator::init(kind, 3, 0.7, &mut rng).unwrap();
            let many = agg.aggregate_many(h.view(), qs.view(), &times, 2.0).unwrap();
            for (j, q) in qs.columns().into_iter().enumerate() {
                let one = agg.aggregate_raw(h.view(), Some(q), &times, 2.0).unwrap();
                for i in 0..3 {
                    assert_abs_diff_eq!(many[[i, j]], one[i], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn mean_and_max_examples() {
        let h = array![[1.0, 3.0], [3.0, 5.0]];
        assert_eq!(agg_mean(h.view()).unwrap(), array![2.0, 4.0]);
        let h = array![[1.0, 3.0], [5.0, 2.0]];
        assert_eq!(agg_max(h.view()).unwrap(), array![3.0, 5.0]);
    }

    #[test]
    fn two_way_attention() {
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let g = agg_attention(h.view(), array![1.0, 0.0].view()).unwrap();
        assert_abs_diff_eq!(g[0], 0.7310585786300049, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.2689414213699951, epsilon = 1e-12);
    }

    #[test]
    fn exp_hawkes_hand_value() {
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let g = agg_exp_hawkes(h.view(), &[1.0, 0.0], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], (-1.0f64).exp(), epsilon = 1e-15);
        assert!(agg_exp_hawkes(h.view(), &[2.0, 0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn single_column_attention_kinds_return_it() {
        let h = array![[0.3], [-1.2]];
        let q = array![2.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [AggregatorKind::Attention, AggregatorKind::LearnableAttention, AggregatorKind::KernelAttention] {
            let agg = Aggregator::init(kind, 2, 1.0, &mut rng).unwrap();
            let g = agg.aggregate_raw(h.view(), Some(q.view()), &[0.0], 0.0).unwrap();
            for (a, b) in g.iter().zip(h.column(0)) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn missing_query_and_empty_context() {
        let h = array![[1.0], [2.0]];
        assert!(Aggregator::Attention.aggregate_raw(h.view(), None, &[0.0], 0.0).is_err());
        assert!(Aggregator::Mean.aggregate_raw(h.view(), None, &[0.0], 0.0).is_ok());
        let empty = Array2::<f64>::zeros((2, 0));
        assert!(agg_mean(empty.view()).is_err());
    }

    #[test]
    fn concat_examples() {
        assert_eq!(concat_context(array![1.0, 2.0].view(), array![3.0, 4.0].view()).unwrap(), array![1.0, 2.0, 3.0, 4.0]);
        assert!(concat_context(array![1.0].view(), array![3.0, 4.0].view()).is_err());
    }

    #[test]
    fn attention_matrix_only_for_attention_kinds() {
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let m = attention_matrix(&Aggregator::Attention, h.view()).unwrap();
        assert_abs_diff_eq!(m.row(0).sum(), 1.0, epsilon = 1e-12);
        assert!(m[[0, 0]] > m[[0, 1]] && m[[1, 1]] > m[[1, 0]]);
        assert!(attention_matrix(&Aggregator::Mean, h.view()).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("kernel-attention".parse::<AggregatorKind>().unwrap(), AggregatorKind::KernelAttention);
        assert_eq!("ExpHawkes".parse::<AggregatorKind>().unwrap(), AggregatorKind::ExpHawkes);
        assert!("median".parse::<AggregatorKind>().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in AggregatorKind::ALL {
            let agg = Aggregator::init(kind, 3, 2.5, &mut rng).unwrap();
            let c = agg.to_checkpoint(0, "x");
            let back = Aggregator::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), 3).unwrap();
            assert_eq!(back.kind(), kind);
            assert_eq!(back.tau(), agg.tau());
            assert_eq!(back.to_checkpoint(0, "x"), c);
        }
    }
}
