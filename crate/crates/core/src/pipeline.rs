//! Experiment configuration and the command pipeline behind the `ctxagg`
//! binary. Every command reads one JSON config, writes its artifacts under
//! the output directory and records them in `manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::aggregation::{attention_matrix, train_aggregator, write_attention_csv, Aggregator, AggregatorKind};
use crate::data::{fit_normalizer, load_jsonl, split_by_user, write_jsonl, write_labels_csv, LabeledDataset, Split};
use crate::encoder::{pretrain, write_embeddings_csv, ColesConfig, EncoderConfig, GruEncoder};
use crate::error::{Error, Result};
use crate::eval::{
    bench_stages, eval_global, eval_local, nested_subsets, read_metrics_csv, sweep_context_size, write_metrics_csv,
    write_summaries, write_sweep_csv, BenchSetup, ContextProvider, ContextSource, GlobalEvalConfig, LocalEvalConfig,
    MetricsRow, BENCH_METHODS, TASK_GLOBAL, TASK_LOCAL,
};
use crate::store::{refresh_external, AsOfIndex, RefreshPolicy};
use crate::synth::{simulate, GroupedSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Grouped generator used by `synth`.
    pub synthetic: Option<GroupedSpec>,
    /// Event JSONL; defaults to the `synth` output in the run directory.
    pub events: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(GroupedSpec::default()),
            events: None,
            labels: None,
            test_fraction: 0.3,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden: usize,
    pub d_cat: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { hidden: 32, d_cat: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSection {
    /// Context users, capped at the number available.
    pub size: usize,
    pub seed: u64,
}

impl Default for ContextSection {
    fn default() -> Self {
        Self { size: 300, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefreshSection {
    pub interval: f64,
    pub exclude_self: bool,
}

impl Default for RefreshSection {
    fn default() -> Self {
        Self {
            interval: 1.0,
            exclude_self: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub sizes: Vec<usize>,
    pub methods: Vec<AggregatorKind>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            sizes: vec![10, 100, 500],
            methods: vec![AggregatorKind::Mean, AggregatorKind::KernelAttention],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Vec<AggregatorKind>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            methods: BENCH_METHODS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub kind: AggregatorKind,
    /// Leading context users included in the matrix.
    pub users: usize,
    /// Snapshot time; the latest event time when unset.
    pub time: Option<f64>,
}

impl Default for ExportSection {
    fn default() -> Self {
        Self {
            kind: AggregatorKind::Attention,
            users: 50,
            time: None,
        }
    }
}

fn desk_coles() -> ColesConfig {
    ColesConfig {
        batch_size: 32,
        epochs: 10,
        ..ColesConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderSection,
    pub pretrain: ColesConfig,
    /// Methods compared against the no-context baseline.
    pub aggregators: Vec<AggregatorKind>,
    pub aggregator_training: ColesConfig,
    pub context: ContextSection,
    pub refresh: RefreshSection,
    pub global: GlobalEvalConfig,
    pub local: LocalEvalConfig,
    pub sweep: SweepSection,
    pub bench: BenchSection,
    pub export: ExportSection,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            encoder: EncoderSection::default(),
            pretrain: desk_coles(),
            aggregators: vec![AggregatorKind::Mean, AggregatorKind::KernelAttention],
            aggregator_training: desk_coles(),
            context: ContextSection::default(),
            refresh: RefreshSection::default(),
            global: GlobalEvalConfig::default(),
            local: LocalEvalConfig::default(),
            sweep: SweepSection::default(),
            bench: BenchSection::default(),
            export: ExportSection::default(),
            seeds: vec![0, 1, 2],
            out: PathBuf::from("runs/default"),
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn scoped(field: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { field: inner, message } if !inner.contains('.') => Error::Config {
            field: format!("{field}.{inner}"),
            message,
        },
        Error::Config { .. } => e,
        other => config_err(field, other.to_string()),
    })
}

impl ExperimentConfig {
    /// Reads a config file; absent sections take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        Self::from_value(value, "config")
    }

    fn from_value(value: Value, field: &str) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| config_err(field, e.to_string()))
    }

    /// Applies `a.b.c=value` overrides; the value is parsed as JSON and
    /// taken as a string when that fails.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(&self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| config_err(item, "override must look like key=value"))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut value;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| config_err(key, format!("`{}` is not a section", parts[..i].join("."))))?;
                if !obj.contains_key(*part) {
                    return Err(config_err(key, "unknown field"));
                }
                node = obj.get_mut(*part).expect("checked");
            }
            *node = parsed;
            Self::from_value(value.clone(), key)?;
        }
        Self::from_value(value, "config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "must not be empty"));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(config_err("data.test_fraction", "must lie in (0, 1)"));
        }
        if self.data.synthetic.is_none() && self.data.events.is_none() {
            return Err(config_err("data", "set either `synthetic` or `events`"));
        }
        for (field, path) in [("data.events", &self.data.events), ("data.labels", &self.data.labels)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(config_err(field, format!("{} does not exist", p.display())));
                }
            }
        }
        if self.encoder.hidden == 0 || self.encoder.d_cat == 0 {
            return Err(config_err("encoder", "hidden and d_cat must be positive"));
        }
        scoped("pretrain", self.pretrain.validate())?;
        scoped("aggregator_training", self.aggregator_training.validate())?;
        scoped("global.gbdt", self.global.gbdt.validate())?;
        self.local.validate()?;
        if self.context.size == 0 {
            return Err(config_err("context.size", "must be positive"));
        }
        if !(self.refresh.interval > 0.0 && self.refresh.interval.is_finite()) {
            return Err(config_err("refresh.interval", "must be positive and finite"));
        }
        if self.sweep.sizes.is_empty() || self.sweep.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("sweep.sizes", "must be non-empty and strictly ascending"));
        }
        if self.export.users == 0 {
            return Err(config_err("export.users", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Pretrain,
    Embed,
    TrainAgg,
    EvalGlobal,
    EvalLocal,
    Sweep,
    Bench,
    ExportAttn,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Self::Synth,
        Self::Pretrain,
        Self::Embed,
        Self::TrainAgg,
        Self::EvalGlobal,
        Self::EvalLocal,
        Self::Sweep,
        Self::Bench,
        Self::ExportAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Pretrain => "pretrain",
            Self::Embed => "embed",
            Self::TrainAgg => "train-agg",
            Self::EvalGlobal => "eval-global",
            Self::EvalLocal => "eval-local",
            Self::Sweep => "sweep",
            Self::Bench => "bench",
            Self::ExportAttn => "export-attn",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown command `{s}`")))
    }
}

/// Module versions recorded in every manifest.
pub const MODULES: [&str; 7] = [
    "event-data",
    "synthetic-hawkes",
    "encoder",
    "embedding-store",
    "aggregation",
    "evaluation",
    "cli",
];

fn write_manifest(dir: &Path, cfg: &ExperimentConfig, command: Command, artifacts: &[PathBuf]) -> Result<()> {
    let path = dir.join("manifest.json");
    let mut manifest: Value = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => Value::Object(Default::default()),
    };
    let modules: BTreeMap<&str, &str> = MODULES.iter().map(|m| (*m, env!("CARGO_PKG_VERSION"))).collect();
    manifest["config_hash"] = Value::from(cfg.hash());
    manifest["seeds"] = serde_json::to_value(&cfg.seeds)?;
    manifest["modules"] = serde_json::to_value(modules)?;
    if !manifest["commands"].is_object() {
        manifest["commands"] = Value::Object(Default::default());
    }
    let names: Vec<String> = artifacts
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
        .collect();
    manifest["commands"][command.name()] = serde_json::json!({ "artifacts": names });
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Shared state for one run directory.
struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
}

impl Run<'_> {
    fn seed_dir(&self, seed: u64) -> Result<PathBuf> {
        let dir = self.out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn events_path(&self) -> PathBuf {
        self.cfg.data.events.clone().unwrap_or_else(|| self.out.join("events.jsonl"))
    }

    fn dataset(&self) -> Result<LabeledDataset> {
        let events = self.events_path();
        if !events.exists() {
            return Err(Error::MissingArtifact(format!(
                "dataset {}: run `synth` first or set data.events",
                events.display()
            )));
        }
        let labels = match &self.cfg.data.labels {
            Some(p) => Some(p.clone()),
            None if self.cfg.data.events.is_none() => Some(self.out.join("labels.csv")),
            None => None,
        };
        let raw = load_jsonl(&events, labels.as_deref())?;
        split_by_user(&raw, self.cfg.data.test_fraction, self.cfg.data.split_seed)
    }

    fn context(&self, dataset: &LabeledDataset) -> Result<Vec<String>> {
        let pool: Vec<String> = dataset.sequences.keys().cloned().collect();
        let size = self.cfg.context.size.min(pool.len());
        let mut users = nested_subsets(&pool, &[size], self.cfg.context.seed)?.remove(0);
        users.sort();
        Ok(users)
    }

    fn encoder_path(&self, seed: u64) -> Result<PathBuf> {
        let path = self.out.join(format!("seed-{seed}")).join("encoder.bin");
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "encoder checkpoint {}: run `pretrain` first",
                path.display()
            )));
        }
        Ok(path)
    }

    /// Fails before any data is loaded when a seed has no encoder.
    fn require_encoders(&self, seeds: &[u64]) -> Result<()> {
        seeds.iter().try_for_each(|&s| self.encoder_path(s).map(|_| ()))
    }

    fn encoder(&self, seed: u64) -> Result<GruEncoder> {
        GruEncoder::load(&self.encoder_path(seed)?)
    }

    fn index(&self, seed: u64) -> Result<AsOfIndex> {
        let path = self.out.join(format!("seed-{seed}")).join("index.bin");
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "embedding index {}: run `embed` first",
                path.display()
            )));
        }
        AsOfIndex::load(&path)
    }

    fn aggregator(&self, kind: AggregatorKind, seed: u64, m: usize, dataset: &LabeledDataset) -> Result<Aggregator> {
        if kind.is_learnable() {
            let path = self.out.join(format!("seed-{seed}")).join(format!("agg-{}.bin", kind.name()));
            if !path.exists() {
                return Err(Error::MissingArtifact(format!(
                    "{kind} checkpoint {}: run `train-agg` first",
                    path.display()
                )));
            }
            return Aggregator::load(&path, m);
        }
        Aggregator::init(kind, m, tau(dataset)?, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

fn tau(dataset: &LabeledDataset) -> Result<f64> {
    dataset
        .median_inter_event_time(Split::Train)
        .ok_or_else(|| Error::invalid("train split has no inter-event gaps to set the time scale"))
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn merge_metrics(out: &Path) -> Result<PathBuf> {
    let mut rows = Vec::new();
    for part in ["metrics_global.csv", "metrics_local.csv"] {
        let p = out.join(part);
        if p.exists() {
            rows.extend(read_metrics_csv(&p)?);
        }
    }
    let path = out.join("metrics.csv");
    write_metrics_csv(&path, &rows)?;
    write_summaries(out, &rows)?;
    Ok(path)
}

/// Runs one command; returns the one-line summary printed by the binary.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let out = cfg.out.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&config_path, e))?;
    let run = Run { cfg, out };
    let mut artifacts = vec![config_path];
    let summary = match command {
        Command::Synth => synth(&run, &mut artifacts)?,
        Command::Pretrain => pretrain_cmd(&run, &mut artifacts)?,
        Command::Embed => embed(&run, &mut artifacts)?,
        Command::TrainAgg => train_agg(&run, &mut artifacts)?,
        Command::EvalGlobal => evaluate(&run, TASK_GLOBAL, &mut artifacts)?,
        Command::EvalLocal => evaluate(&run, TASK_LOCAL, &mut artifacts)?,
        Command::Sweep => sweep(&run, &mut artifacts)?,
        Command::Bench => bench(&run, &mut artifacts)?,
        Command::ExportAttn => export_attn(&run, &mut artifacts)?,
    };
    for seed in &cfg.seeds {
        let dir = out.join(format!("seed-{seed}"));
        if dir.is_dir() {
            let inside: Vec<PathBuf> = artifacts.iter().filter(|p| p.starts_with(&dir)).cloned().collect();
            if !inside.is_empty() {
                write_manifest(&dir, cfg, command, &inside)?;
            }
        }
    }
    write_manifest(out, cfg, command, &artifacts)?;
    Ok(summary)
}

fn synth(run: &Run<'_>, artifacts: &mut Vec<PathBuf>) -> Result<String> {
    let spec = run
        .cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| config_err("data.synthetic", "`synth` needs a generator section"))?;
    let config = spec.build()?;
    let data = simulate(&config, spec.seed)?;
    let events = run.out.join("events.jsonl");
    let labels = run.out.join("labels.csv");
    let hash = run.out.join("config_hash.txt");
    let hawkes = run.out.join("hawkes_config.json");
    write_jsonl(&data.dataset, &events)?;
    write_labels_csv(&data.dataset, &labels)?;
    fs::write(&hash, format!("{}\n", data.config_hash)).map_err(|e| Error::io(&hash, e))?;
    fs::write(&hawkes, serde_json::to_string(&config)?).map_err(|e| Error::io(&hawkes, e))?;
    artifacts.extend([events, labels, hash, hawkes]);
    Ok(format!(
        "synth: {} users, {} events, config hash {}",
        data.dataset.n_users(),
        data.dataset.n_events(),
        &data.config_hash[..12]
    ))
}

fn pretrain_cmd(run: &Run<'_>, artifacts: &mut Vec<PathBuf>) -> Result<String> {
    let ds = run.dataset()?;
    let spec = fit_normalizer(&ds, run.cfg.encoder.d_cat)?;
    let enc_cfg = EncoderConfig {
        hidden: run.cfg.encoder.hidden,
    };
    let mut last = Vec::new();
    for &seed in &run.cfg.seeds {
        let pre = pretrain(&ds, spec.clone(), enc_cfg, &run.cfg.pretrain, seed)?;
        let dir = run.seed_dir(seed)?;
        let ckpt = dir.join("encoder.bin");
        pre.encoder.save(&ckpt, seed, &run.cfg.hash())?;
        let loss = dir.join("pretrain_loss.csv");
        write_loss_csv(&loss, &pre.loss_curve)?;
        last.push(format!("{:.3}", pre.loss_curve.last().copied().unwrap_or(f64::NAN)));
        artifacts.extend([ckpt, loss]);
    }
    Ok(format!(
        "pretrain: {} encoder(s), final loss {}",
        run.cfg.seeds.len(),
        last.join("/")
    ))
}

fn embed(run: &Run<'_>, artifacts: &mut Vec<PathBuf>) -> Result<String> {
    run.require_encoders(&run.cfg.seeds)?;
    let ds = run.dataset()?;
    let context = run.context(&ds)?;
    let context_path = run.out.join("context.txt");
    fs::write(&context_path, context.join("\n") + "\n").map_err(|e| Error::io(&context_path, e))?;
    artifacts.push(context_path);
    let (t_start, t_end) = ds.sequences.values().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| {
        (a.min(s.events[0].t), b.max(s.last_time()))
    });
    let policy = RefreshPolicy {
        interval: run.cfg.refresh.interval,
        exclude_self: run.cfg.refresh.exclude_self,
    };
    let mut entries = 0;
    for &seed in &run.cfg.seeds {
        let enc = run.encoder(seed)?;
        let seqs: Vec<_> = ds.sequences.values().collect();
        let trajectories: Vec<_> = seqs.par_iter().map(|s| enc.forward(s)).collect::<Result<_>>()?;
        let index = AsOfIndex::from_trajectories(enc.hidden(), &trajectories)?;
        let dir = run.seed_dir(seed)?;
        let index_path = dir.join("index.bin");
        index.persist(&index_path)?;
        let csv_path = dir.join("embeddings.csv");
        write_embeddings_csv(&csv_path, &trajectories)?;
        let store = refresh_external(&index, &Aggregator::Mean, &context, &policy, t_start, t_end)?;
        let log_path = dir.join("refresh_log.csv");
        store.write_log_csv(&log_path)?;
        entries = index.n_entries();
        artifacts.extend([index_path, csv_path, log_path]);
    }
    Ok(format!(
        "embed: {} users, {} states per index, {} context users",
        ds.n_users(),
        entries,
        context.len()
    ))
}

fn train_agg(run: &Run<'_>, artifacts: &mut Vec<PathBuf>) -> Result<String> {
    run.require_encoders(&run.cfg.seeds)?;
    let ds = run.dataset()?;
    let context = run.context(&ds)?;
    let tau = tau(&ds)?;
    let kinds: Vec<AggregatorKind> = run.cfg.aggregators.iter().copied().filter(|k| k.is_learnable()).collect();
    for &seed in &run.cfg.seeds {
        let enc = run.encoder(seed)?;
        let index = run.index(seed)?;
        let dir = run.seed_dir(seed)?;
        for &kind in &kinds {
            let init = Aggregator::init(kind, enc.hidden(), tau, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let trained = train_aggregator(init, &enc, &index, &context, &ds, &run.cfg.aggregator_training, seed)?;
            let ckpt = dir.join(format!("agg-{}.bin", kind.name()));
            trained.aggregator.save(&ckpt, seed, &run.cfg.hash())?;
            let loss = dir.join(format!("agg-{}-loss.csv", kind.name()));
            write_loss_csv(&loss, &trained.loss_curve)?;
            artifacts.extend([ckpt, loss]);
        }
    }
    Ok(format!(
        "train-agg: {} learnable aggregator(s) x {} seed(s)",
        kinds.len(),
        run.cfg.seeds.len()
    ))
}

fn evaluate(run: &Run<'_>, task: &str, artifacts: &mut Vec<PathBuf>) -> Result<String> {
    run.require_encoders(&run.cfg.seeds)?;
    let ds = run.dataset()?;
    let context = run.context(&ds)?;
    let mut rows = Vec::new();
    for &seed in &run.cfg.seeds {
        let enc = run.encoder(seed)?;
        let index = run.index(seed)?;
        let aggs: Vec<Aggregator> = run
            .cfg
            .aggregators
            .iter()
            .map(|&k| run.aggregator(k, seed, enc.hidden(), &ds))
            .collect::<Result<_>>()?;
        let sources = std::iter::once(ContextSource::None).chain(aggs.iter().map(ContextSource::Aggregated));
        for source in sources {
            let provider = ContextProvider::new(&index, &context, source)?;
            let (auc, mode) = if task == TASK_GLOBAL {
                (eval_global(&index, &provider, &ds, &run.cfg.global, seed)?, "-".to_string())
            } else {
                let r = eval_local(&enc, &provider, &ds, &run.cfg.local, seed)?;
                (r.auc, run.cfg.local.mode.name().to_string())
            };
            let n_context = if matches!(source, ContextSource::None) { 0 } else { context.len() };
            log::info!("seed {seed} {task} {}: {auc:.4}", source.label());
            rows.push(MetricsRow {
                method: source.label(),
                task: task.to_string(),
                seed,
                auc,
                n_context,
                mode,
            });
        }
    }
    let part = run.out.join(format!("metrics_{task}.csv"));
    write_metrics_csv(&part, &rows)?;
    let merged = merge_metrics(run.out)?;
    artifacts.extend([
        part,
        merged,
        run.out.join("summary.csv"),
        run.out.join("rank_summary.csv"),
    ]);
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_method.entry(r.method.as_str()).or_default().push(r.auc);
    }
    let parts: Vec<String> = by_method
        .iter()
        .map(|(m, v)| format!("{m} {:.4}", v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    Ok(format!("eval-{task}: mean AUC {}", parts.join(", ")))
}

fn sweep(run: &Run<'_>, artifacts: &mut Vec<PathBuf>) -> Result<String> {
    run.require_encoders(&run.cfg.seeds)?;
    let ds = run.dataset()?;
    let pool: Vec<String> = ds.sequences.keys().cloned().collect();
    let sizes = clip_sizes(&run.cfg.sweep.sizes, pool.len());
    let mut rows = Vec::new();
    for &seed in &run.cfg.seeds {
        let enc = run.encoder(seed)?;
        let index = run.index(seed)?;
        for &kind in &run.cfg.sweep.methods {
            let agg = run.aggregator(kind, seed, enc.hidden(), &ds)?;
            rows.extend(sweep_context_size(
                &enc,
                &index,
                &ds,
                &agg,
                &pool,
                &sizes,
                &run.cfg.global,
                &run.cfg.local,
                seed,
            )?);
        }
    }
    let path = run.out.join("sweep.csv");
    write_sweep_csv(&path, &rows)?;
    artifacts.push(path);
    Ok(format!("sweep: {} rows over sizes {sizes:?}", rows.len()))
}

/// Drops sizes above the pool; the pool itself stands in for them.
fn clip_sizes(sizes: &[usize], pool: usize) -> Vec<usize> {
    let mut out: Vec<usize> = sizes.iter().copied().filter(|&s| s <= pool).collect();
    if out.len() < sizes.len() {
        log::warn!("only {pool} users available; sweeping {sizes:?} clipped to the pool size");
        if out.last() != Some(&pool) {
            out.push(pool);
        }
    }
    out
}

fn bench(run: &Run<'_>, artifacts: &mut Vec<PathBuf>) -> Result<String> {
    let ds = run.dataset()?;
    let context = run.context(&ds)?;
    let seed = run.cfg.seeds[0];
    let timings = bench_stages(&BenchSetup {
        dataset: &ds,
        spec: fit_normalizer(&ds, run.cfg.encoder.d_cat)?,
        encoder: EncoderConfig {
            hidden: run.cfg.encoder.hidden,
        },
        coles: run.cfg.pretrain,
        aggregator_coles: run.cfg.aggregator_training,
        local: run.cfg.local,
        context: &context,
        methods: run.cfg.bench.methods.clone(),
        seed,
    })?;
    let path = run.out.join("bench_stages.csv");
    timings.write_csv(&path)?;
    artifacts.push(path);
    let plain = timings.seconds[4].iter().flatten().next().copied().unwrap_or(f64::NAN);
    Ok(format!("bench: plain inference {plain:.3}s, table in bench_stages.csv"))
}

fn export_attn(run: &Run<'_>, artifacts: &mut Vec<PathBuf>) -> Result<String> {
    run.require_encoders(&run.cfg.seeds[..1])?;
    let ds = run.dataset()?;
    let context = run.context(&ds)?;
    let seed = run.cfg.seeds[0];
    let enc = run.encoder(seed)?;
    let index = run.index(seed)?;
    let kind = run.cfg.export.kind;
    let agg = run.aggregator(kind, seed, enc.hidden(), &ds)?;
    let t = run
        .cfg
        .export
        .time
        .unwrap_or_else(|| ds.sequences.values().map(|s| s.last_time()).fold(f64::NEG_INFINITY, f64::max));
    let users: Vec<String> = context.iter().take(run.cfg.export.users).cloned().collect();
    let snap = index.snapshot(&users, t)?;
    let matrix = attention_matrix(&agg, snap.h.view())?;
    let path = run.out.join(format!("attention_{}.csv", kind.name()));
    write_attention_csv(&path, &snap.users, &matrix)?;
    artifacts.push(path);
    let diag = (0..matrix.nrows())
        .filter(|&i| {
            let row = matrix.row(i);
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row[i] == best
        })
        .count();
    Ok(format!(
        "export-attn: {kind} {}x{} at t={t:.3}, diagonal argmax in {diag} rows",
        matrix.nrows(),
        matrix.ncols()
    ))
}
