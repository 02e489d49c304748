//! Event-sequence data model: loading, splitting, normalization and the
//! rare-code filter used by next-event-type validation.
//!
//! Events live on disk as JSON lines (`{"user","t","type","amount"}`) with
//! an optional `user,label` CSV alongside. In memory a [`LabeledDataset`]
//! maps each user to one time-ordered [`EventSequence`] and a split tag.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the events file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user: String,
    pub t: f64,
    #[serde(rename = "type")]
    pub event_type: u32,
    pub amount: f64,
}

/// A single event of a known user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub event_type: u32,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub user_id: String,
    pub events: Vec<Event>,
    pub label: Option<i64>,
}

impl EventSequence {
    /// Builds a sequence, stably sorting events by time.
    pub fn new(user_id: impl Into<String>, mut events: Vec<Event>, label: Option<i64>) -> Result<Self> {
        let user_id = user_id.into();
        if events.is_empty() {
            return Err(Error::invalid(format!("user {user_id} has no events")));
        }
        if let Some(e) = events.iter().find(|e| !e.t.is_finite()) {
            return Err(Error::NonFinite(format!("timestamp {} of user {user_id}", e.t)));
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self {
            user_id,
            events,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.iter().map(|e| e.t)
    }

    pub fn last_time(&self) -> f64 {
        self.events.last().map(|e| e.t).unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Input schema and the normalization statistics of the continuous feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub vocab_size: usize,
    pub d_cat: usize,
    pub d_cont: usize,
    pub cont_mean: f64,
    pub cont_std: f64,
}

impl FeatureSpec {
    pub fn input_width(&self) -> usize {
        self.d_cat + self.d_cont
    }

    pub fn normalize(&self, amount: f64) -> f64 {
        (amount - self.cont_mean) / self.cont_std
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub sequences: BTreeMap<String, EventSequence>,
    pub split: BTreeMap<String, Split>,
}

impl LabeledDataset {
    /// Every sequence is assigned to the train split.
    pub fn from_sequences(seqs: impl IntoIterator<Item = EventSequence>) -> Self {
        let mut ds = LabeledDataset::default();
        for s in seqs {
            ds.split.insert(s.user_id.clone(), Split::Train);
            ds.sequences.insert(s.user_id.clone(), s);
        }
        ds
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_events(&self) -> usize {
        self.sequences.values().map(|s| s.len()).sum()
    }

    pub fn users(&self, split: Split) -> Vec<&str> {
        self.split
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(u, _)| u.as_str())
            .collect()
    }

    pub fn sequences_in(&self, split: Split) -> impl Iterator<Item = &EventSequence> + '_ {
        self.sequences
            .values()
            .filter(move |s| self.split.get(&s.user_id) == Some(&split))
    }

    pub fn label_histogram(&self) -> BTreeMap<i64, usize> {
        let mut hist = BTreeMap::new();
        for s in self.sequences.values() {
            if let Some(l) = s.label {
                *hist.entry(l).or_insert(0) += 1;
            }
        }
        hist
    }

    /// Largest event code plus one over every split.
    pub fn vocab_size(&self) -> usize {
        self.sequences
            .values()
            .flat_map(|s| s.events.iter())
            .map(|e| e.event_type as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Median gap between consecutive events of the same user, over `split`.
    pub fn median_inter_event_time(&self, split: Split) -> Option<f64> {
        let mut gaps: Vec<f64> = self
            .sequences_in(split)
            .flat_map(|s| s.events.windows(2).map(|w| w[1].t - w[0].t))
            .collect();
        if gaps.is_empty() {
            return None;
        }
        gaps.sort_by(f64::total_cmp);
        let mid = gaps.len() / 2;
        Some(if gaps.len() % 2 == 0 {
            0.5 * (gaps[mid - 1] + gaps[mid])
        } else {
            gaps[mid]
        })
    }

    /// A view keeping only events whose code is in `codes`. Users left with
    /// no events are dropped.
    pub fn filter_codes(&self, codes: &BTreeSet<u32>) -> LabeledDataset {
        let mut out = LabeledDataset::default();
        for (user, seq) in &self.sequences {
            let events: Vec<Event> = seq
                .events
                .iter()
                .filter(|e| codes.contains(&e.event_type))
                .copied()
                .collect();
            if events.is_empty() {
                continue;
            }
            out.sequences.insert(
                user.clone(),
                EventSequence {
                    user_id: user.clone(),
                    events,
                    label: seq.label,
                },
            );
            if let Some(s) = self.split.get(user) {
                out.split.insert(user.clone(), *s);
            }
        }
        out
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Loads an events file and, optionally, a `user,label` CSV.
pub fn load_jsonl(path: impl AsRef<Path>, labels_path: Option<&Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut grouped: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !rec.t.is_finite() || !rec.amount.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "non-finite t or amount".into(),
            });
        }
        grouped.entry(rec.user).or_default().push(Event {
            t: rec.t,
            event_type: rec.event_type,
            amount: rec.amount,
        });
    }

    let labels = match labels_path {
        Some(p) => load_labels_csv(p)?,
        None => BTreeMap::new(),
    };
    for user in labels.keys() {
        if !grouped.contains_key(user) {
            warn!("label for unknown user {user} ignored");
        }
    }

    let seqs = grouped
        .into_iter()
        .map(|(user, events)| {
            let label = labels.get(&user).copied();
            EventSequence::new(user, events, label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset::from_sequences(seqs))
}

pub fn load_labels_csv(path: &Path) -> Result<BTreeMap<String, i64>> {
    #[derive(Deserialize)]
    struct Row {
        user: String,
        label: i64,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        out.insert(row.user, row.label);
    }
    Ok(out)
}

/// Writes events in user order, each user's events in time order.
pub fn write_jsonl(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for seq in dataset.sequences.values() {
        for e in &seq.events {
            let rec = EventRecord {
                user: seq.user_id.clone(),
                t: e.t,
                event_type: e.event_type,
                amount: e.amount,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn write_labels_csv(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["user", "label"])?;
    for seq in dataset.sequences.values() {
        if let Some(l) = seq.label {
            w.write_record([seq.user_id.as_str(), &l.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// User-level train/test split, stratified by label when labels exist.
///
/// Each stratum sends `round(size * test_fraction)` users to test.
pub fn split_by_user(dataset: &LabeledDataset, test_fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test_fraction {test_fraction} outside (0, 1)")));
    }
    if dataset.n_users() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 users to split, got {}",
            dataset.n_users()
        )));
    }

    let mut strata: BTreeMap<Option<i64>, Vec<&str>> = BTreeMap::new();
    for seq in dataset.sequences.values() {
        strata.entry(seq.label).or_default().push(&seq.user_id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = BTreeMap::new();
    for users in strata.values_mut() {
        users.shuffle(&mut rng);
        let n_test = (users.len() as f64 * test_fraction).round() as usize;
        for (i, u) in users.iter().enumerate() {
            let s = if i < n_test { Split::Test } else { Split::Train };
            split.insert(u.to_string(), s);
        }
    }

    let n_test = split.values().filter(|s| **s == Split::Test).count();
    if n_test == 0 || n_test == split.len() {
        return Err(Error::invalid(format!(
            "{} users cannot fill both splits at test_fraction {test_fraction}",
            dataset.n_users()
        )));
    }
    Ok(LabeledDataset {
        sequences: dataset.sequences.clone(),
        split,
    })
}

/// Fits amount normalization on the train split. The vocabulary is taken
/// from every split since codes are schema, not statistics.
pub fn fit_normalizer(dataset: &LabeledDataset, d_cat: usize) -> Result<FeatureSpec> {
    if d_cat == 0 {
        return Err(Error::invalid("d_cat must be at least 1"));
    }
    let amounts: Vec<f64> = dataset
        .sequences_in(Split::Train)
        .flat_map(|s| s.events.iter().map(|e| e.amount))
        .collect();
    if amounts.is_empty() {
        return Err(Error::invalid("train split has no events"));
    }
    let n = amounts.len() as f64;
    let mean = amounts.iter().sum::<f64>() / n;
    let var = amounts.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let mut std = var.sqrt();
    if !(std > 0.0) {
        warn!("amount has zero variance on the train split; std clamped to 1");
        std = 1.0;
    }
    Ok(FeatureSpec {
        vocab_size: dataset.vocab_size(),
        d_cat,
        d_cont: 1,
        cont_mean: mean,
        cont_std: std,
    })
}

/// The `k` most frequent codes on the train split, ties to the smaller code.
pub fn top_k_event_types(dataset: &LabeledDataset, k: usize) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in dataset.sequences_in(Split::Train) {
        for e in &s.events {
            *counts.entry(e.event_type).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(c, _)| c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, c: u32, a: f64) -> Event {
        Event {
            t,
            event_type: c,
            amount: a,
        }
    }

    fn labeled(users: &[(&str, i64)]) -> LabeledDataset {
        LabeledDataset::from_sequences(
            users
                .iter()
                .map(|(u, l)| EventSequence::new(*u, vec![ev(1.0, 0, 1.0)], Some(*l)).unwrap()),
        )
    }

    #[test]
    fn sorts_events_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(
            &p,
            "{\"user\":\"a\",\"t\":5,\"type\":1,\"amount\":1}\n\
             {\"user\":\"a\",\"t\":1,\"type\":2,\"amount\":1}\n\
             {\"user\":\"a\",\"t\":9,\"type\":3,\"amount\":1}\n",
        )
        .unwrap();
        let ds = load_jsonl(&p, None).unwrap();
        assert_eq!(ds.n_users(), 1);
        let times: Vec<f64> = ds.sequences["a"].times().collect();
        assert_eq!(times, vec![1.0, 5.0, 9.0]);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        let ds = load_jsonl(&p, None).unwrap();
        assert_eq!(ds.n_users(), 0);
        assert_eq!(ds.n_events(), 0);
    }

    #[test]
    fn labels_attach_and_unknown_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        let l = dir.path().join("l.csv");
        std::fs::write(
            &p,
            "{\"user\":\"a\",\"t\":1,\"type\":0,\"amount\":1}\n{\"user\":\"b\",\"t\":2,\"type\":0,\"amount\":3}\n",
        )
        .unwrap();
        std::fs::write(&l, "user,label\na,1\nb,0\nzz,1\n").unwrap();
        let ds = load_jsonl(&p, Some(&l)).unwrap();
        assert_eq!(ds.sequences["a"].label, Some(1));
        let hist = ds.label_histogram();
        assert_eq!(hist, BTreeMap::from([(0, 1), (1, 1)]));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "{\"user\":\"a\",\"t\":1,\"type\":0,\"amount\":1}\n{oops}\n").unwrap();
        match load_jsonl(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn stable_order_for_ties() {
        let s = EventSequence::new("u", vec![ev(1.0, 7, 0.0), ev(0.5, 1, 0.0), ev(1.0, 3, 0.0)], None).unwrap();
        let codes: Vec<u32> = s.events.iter().map(|e| e.event_type).collect();
        assert_eq!(codes, vec![1, 7, 3]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = LabeledDataset::from_sequences(
            (0..10).map(|i| EventSequence::new(format!("u{i}"), vec![ev(1.0, 0, 0.0)], None).unwrap()),
        );
        let a = split_by_user(&ds, 0.3, 7).unwrap();
        let b = split_by_user(&ds, 0.3, 7).unwrap();
        assert_eq!(a.users(Split::Train).len(), 7);
        assert_eq!(a.users(Split::Test).len(), 3);
        assert_eq!(a.split, b.split);
    }

    #[test]
    fn split_is_stratified() {
        let ds = labeled(&[("a", 0), ("b", 0), ("c", 1), ("d", 1)]);
        let s = split_by_user(&ds, 0.5, 3).unwrap();
        for split in [Split::Train, Split::Test] {
            let mut labels: Vec<i64> = s
                .users(split)
                .iter()
                .map(|u| s.sequences[*u].label.unwrap())
                .collect();
            labels.sort();
            assert_eq!(labels, vec![0, 1]);
        }
    }

    #[test]
    fn split_rejects_single_user() {
        let ds = labeled(&[("a", 0)]);
        assert!(split_by_user(&ds, 0.5, 0).is_err());
    }

    #[test]
    fn normalizer_population_std() {
        let ds = LabeledDataset::from_sequences([
            EventSequence::new("a", vec![ev(0.0, 0, 1.0), ev(1.0, 0, 3.0)], None).unwrap()
        ]);
        let spec = fit_normalizer(&ds, 4).unwrap();
        assert_eq!(spec.cont_mean, 2.0);
        assert_eq!(spec.cont_std, 1.0);
        assert_eq!(spec.normalize(4.0), 2.0);
    }

    #[test]
    fn normalizer_clamps_zero_variance() {
        let ds = LabeledDataset::from_sequences([EventSequence::new(
            "a",
            vec![ev(0.0, 0, 5.0), ev(1.0, 0, 5.0), ev(2.0, 0, 5.0)],
            None,
        )
        .unwrap()]);
        let spec = fit_normalizer(&ds, 4).unwrap();
        assert_eq!(spec.cont_mean, 5.0);
        assert_eq!(spec.cont_std, 1.0);
    }

    fn with_counts(counts: &[(u32, usize)]) -> LabeledDataset {
        let mut events = Vec::new();
        let mut t = 0.0;
        for &(c, n) in counts {
            for _ in 0..n {
                events.push(ev(t, c, 0.0));
                t += 1.0;
            }
        }
        LabeledDataset::from_sequences([EventSequence::new("u", events, None).unwrap()])
    }

    #[test]
    fn top_k_and_filter() {
        let ds = with_counts(&[(7, 5), (2, 3), (9, 1)]);
        let top = top_k_event_types(&ds, 2).unwrap();
        assert_eq!(top, vec![7, 2]);
        let view = ds.filter_codes(&top.iter().copied().collect());
        assert!(view.sequences["u"].events.iter().all(|e| e.event_type != 9));
        assert_eq!(view.n_events(), 8);
    }

    #[test]
    fn top_k_tie_prefers_smaller_code() {
        let ds = with_counts(&[(2, 4), (1, 4)]);
        assert_eq!(top_k_event_types(&ds, 1).unwrap(), vec![1]);
    }

    #[test]
    fn top_k_clamps_to_vocabulary() {
        let counts: Vec<(u32, usize)> = (0..10).map(|c| (c, 1)).collect();
        let ds = with_counts(&counts);
        assert_eq!(top_k_event_types(&ds, 100).unwrap().len(), 10);
    }
}
