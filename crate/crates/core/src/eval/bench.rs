use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::context::{ContextProvider, ContextSource};
use super::local::{eval_local, FineTuneMode, LocalEvalConfig};
use crate::aggregation::{train_aggregator, Aggregator, AggregatorKind};
use crate::data::{FeatureSpec, LabeledDataset, Split};
use crate::encoder::{pretrain, ColesConfig, EncoderConfig, GruEncoder};
use crate::error::{Error, Result};
use crate::store::{AsOfIndex, ContextAggregator};

pub const STAGES: [&str; 6] = [
    "Pretrain CoLES SSL",
    "Pretrain Pool SSL",
    "Fine-tune freeze",
    "Fine-tune unfreeze",
    "CoLES inference",
    "Inference with aggregations",
];

pub const BENCH_METHODS: [AggregatorKind; 3] = [
    AggregatorKind::Mean,
    AggregatorKind::ExpHawkes,
    AggregatorKind::KernelAttention,
];

/// Wall-clock seconds per stage (rows) and method (columns); `None` where a
/// stage does not apply.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTimings {
    pub methods: Vec<AggregatorKind>,
    pub seconds: Vec<Vec<Option<f64>>>,
}

impl StageTimings {
    pub fn get(&self, stage: &str, method: AggregatorKind) -> Option<f64> {
        let r = STAGES.iter().position(|s| *s == stage)?;
        let c = self.methods.iter().position(|m| *m == method)?;
        self.seconds[r][c]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["stage".to_string()];
        header.extend(self.methods.iter().map(|m| m.name().to_string()));
        w.write_record(&header)?;
        for (stage, row) in STAGES.iter().zip(&self.seconds) {
            let mut rec = vec![stage.to_string()];
            rec.extend(row.iter().map(|c| c.map_or("-".to_string(), |s| format!("{s:.4}"))));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Final state of every user's events up to `t`, as `(users, m × n)`.
pub fn infer_plain(encoder: &GruEncoder, dataset: &LabeledDataset, t: f64) -> Result<(Vec<String>, Array2<f64>)> {
    let encoded: Vec<Option<(String, ndarray::Array1<f64>)>> = dataset
        .sequences
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|s| {
            let n = s.events.partition_point(|e| e.t <= t);
            if n == 0 {
                return Ok(None);
            }
            Ok(Some((s.user_id.clone(), encoder.encode_last(&s.events[..n])?)))
        })
        .collect::<Result<_>>()?;
    let encoded: Vec<_> = encoded.into_iter().flatten().collect();
    let mut h = Array2::zeros((encoder.hidden(), encoded.len()));
    for (j, (_, v)) in encoded.iter().enumerate() {
        h.column_mut(j).assign(v);
    }
    Ok((encoded.into_iter().map(|(u, _)| u).collect(), h))
}

/// [`infer_plain`] followed by `g` for every user against the snapshot the
/// fresh states form, restricted to `context`. Returns `(users, H, G)`.
pub fn infer_with_context(
    encoder: &GruEncoder,
    dataset: &LabeledDataset,
    aggregator: &Aggregator,
    context: &[String],
    t: f64,
) -> Result<(Vec<String>, Array2<f64>, Array2<f64>)> {
    let (users, h) = infer_plain(encoder, dataset, t)?;
    let cols: Vec<usize> = context
        .iter()
        .filter_map(|c| users.binary_search(c).ok())
        .collect();
    if cols.is_empty() {
        return Err(Error::EmptyContext(t));
    }
    let snap = h.select(ndarray::Axis(1), &cols);
    let last_times: Vec<f64> = cols
        .iter()
        .map(|&j| {
            let s = &dataset.sequences[&users[j]];
            s.events[s.events.partition_point(|e| e.t <= t) - 1].t
        })
        .collect();
    let g = if aggregator.query_dependent() {
        aggregator.aggregate_many(snap.view(), h.view(), &last_times, t)?
    } else {
        aggregator.aggregate_many(snap.view(), h.slice(ndarray::s![.., ..1]), &last_times, t)?
            .column(0)
            .insert_axis(ndarray::Axis(1))
            .broadcast(h.raw_dim())
            .expect("column")
            .to_owned()
    };
    Ok((users, h, g))
}

/// Inputs shared by every stage of the benchmark.
pub struct BenchSetup<'a> {
    pub dataset: &'a LabeledDataset,
    pub spec: FeatureSpec,
    pub encoder: EncoderConfig,
    pub coles: ColesConfig,
    pub aggregator_coles: ColesConfig,
    pub local: LocalEvalConfig,
    pub context: &'a [String],
    pub methods: Vec<AggregatorKind>,
    pub seed: u64,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Times the six training and inference stages for each method.
pub fn bench_stages(setup: &BenchSetup<'_>) -> Result<StageTimings> {
    let BenchSetup {
        dataset,
        ref spec,
        encoder,
        ref coles,
        ref aggregator_coles,
        local,
        context,
        ref methods,
        seed,
    } = *setup;
    let (pre, t_pretrain) = timed(|| pretrain(dataset, spec.clone(), encoder, coles, seed))?;
    let enc = pre.encoder;
    let trajectories: Vec<_> = dataset
        .sequences
        .values()
        .map(|s| enc.forward(s))
        .collect::<Result<_>>()?;
    let index = AsOfIndex::from_trajectories(enc.hidden(), &trajectories)?;
    let tau = dataset
        .median_inter_event_time(Split::Train)
        .ok_or_else(|| Error::invalid("train split has no inter-event gaps"))?;
    let t_end = dataset
        .sequences
        .values()
        .map(|s| s.last_time())
        .fold(f64::NEG_INFINITY, f64::max);
    let (_, t_plain) = timed(|| infer_plain(&enc, dataset, t_end))?;

    let mut seconds = vec![vec![None; methods.len()]; STAGES.len()];
    for (c, &kind) in methods.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Aggregator::init(kind, enc.hidden(), tau, &mut rng)?;
        let agg = if kind.is_learnable() {
            let (trained, secs) =
                timed(|| train_aggregator(init, &enc, &index, context, dataset, aggregator_coles, seed))?;
            seconds[1][c] = Some(secs);
            trained.aggregator
        } else {
            init
        };
        let provider = ContextProvider::new(&index, context, ContextSource::Aggregated(&agg))?;
        for (row, mode) in [(2, FineTuneMode::Freeze), (3, FineTuneMode::Unfreeze)] {
            let cfg = LocalEvalConfig { mode, ..local };
            let (_, secs) = timed(|| eval_local(&enc, &provider, dataset, &cfg, seed))?;
            seconds[row][c] = Some(secs);
        }
        let (_, secs) = timed(|| infer_with_context(&enc, dataset, &agg, context, t_end))?;
        seconds[0][c] = Some(t_pretrain);
        seconds[4][c] = Some(t_plain);
        seconds[5][c] = Some(secs);
    }
    Ok(StageTimings {
        methods: methods.clone(),
        seconds,
    })
}
