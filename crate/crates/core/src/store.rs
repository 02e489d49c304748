//! Time-indexed embedding store: as-of lookups, context snapshots, periodic
//! refresh of external context vectors, and a binary index file.
//!
//! Embeddings are held as `f32`, the same width they are written with, so a
//! persisted index loads back bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingTrajectory;
use crate::error::{Error, Result};

pub const INDEX_FORMAT: &str = "ctxagg-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
struct Track {
    times: Vec<f64>,
    values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsOfIndex {
    m: usize,
    tracks: BTreeMap<String, Track>,
}

/// Latest stored state of a user at or before a query time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsOfEntry<'a> {
    pub t: f64,
    pub values: &'a [f32],
}

impl AsOfEntry<'_> {
    pub fn to_array(&self) -> Array1<f64> {
        self.values.iter().map(|v| *v as f64).collect()
    }
}

impl AsOfIndex {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            tracks: BTreeMap::new(),
        }
    }

    pub fn from_trajectories<'a>(m: usize, trajs: impl IntoIterator<Item = &'a EmbeddingTrajectory>) -> Result<Self> {
        let mut idx = Self::new(m);
        for traj in trajs {
            idx.insert_trajectory(traj)?;
        }
        Ok(idx)
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn n_users(&self) -> usize {
        self.tracks.len()
    }

    pub fn n_entries(&self) -> usize {
        self.tracks.values().map(|t| t.times.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> + '_ {
        self.tracks.keys().map(String::as_str)
    }

    pub fn contains(&self, user: &str) -> bool {
        self.tracks.contains_key(user)
    }

    /// Stored times of a user.
    pub fn times(&self, user: &str) -> Option<&[f64]> {
        self.tracks.get(user).map(|t| t.times.as_slice())
    }

    /// Appends one entry; `t` must exceed the user's last stored time.
    pub fn insert(&mut self, user: &str, t: f64, embedding: ArrayView1<f64>) -> Result<()> {
        if embedding.len() != self.m {
            return Err(Error::shape(self.m, embedding.len()));
        }
        if !t.is_finite() || embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry of user {user} at t={t}")));
        }
        let track = self.tracks.entry(user.to_string()).or_default();
        if let Some(&last) = track.times.last() {
            if t <= last {
                return Err(Error::invalid(format!(
                    "user {user}: time {t} not after last stored time {last}"
                )));
            }
        }
        track.times.push(t);
        track.values.extend(embedding.iter().map(|v| *v as f32));
        Ok(())
    }

    /// Inserts a whole trajectory. Events sharing a timestamp collapse to the
    /// state after the last of them, which is what an as-of read would see.
    pub fn insert_trajectory(&mut self, traj: &EmbeddingTrajectory) -> Result<()> {
        let n = traj.times.len();
        for j in 0..n {
            if j + 1 < n && traj.times[j + 1] == traj.times[j] {
                continue;
            }
            self.insert(&traj.user_id, traj.times[j], traj.states.row(j))?;
        }
        Ok(())
    }

    /// Position of the as-of entry within the user's stored entries.
    pub fn asof_position(&self, user: &str, t: f64) -> Option<usize> {
        let track = self.tracks.get(user)?;
        track.times.partition_point(|&x| x <= t).checked_sub(1)
    }

    /// All stored states of a user as an `m × len` matrix.
    pub fn states(&self, user: &str) -> Option<Array2<f64>> {
        let track = self.tracks.get(user)?;
        let len = track.times.len();
        Some(Array2::from_shape_fn((self.m, len), |(k, j)| track.values[j * self.m + k] as f64))
    }

    pub fn asof(&self, user: &str, t: f64) -> Option<AsOfEntry<'_>> {
        let track = self.tracks.get(user)?;
        let idx = track.times.partition_point(|&x| x <= t);
        (idx > 0).then(|| AsOfEntry {
            t: track.times[idx - 1],
            values: &track.values[(idx - 1) * self.m..idx * self.m],
        })
    }

    /// Context matrix at `t` over `users`, in input order.
    pub fn snapshot<S: AsRef<str>>(&self, users: &[S], t: f64) -> Result<Snapshot> {
        if users.is_empty() {
            return Err(Error::invalid("snapshot needs at least one context user"));
        }
        let mut cols = Vec::with_capacity(users.len());
        let mut excluded = Vec::new();
        for u in users {
            match self.asof(u.as_ref(), t) {
                Some(e) => cols.push((u.as_ref(), e)),
                None => excluded.push(u.as_ref().to_string()),
            }
        }
        if cols.is_empty() {
            return Err(Error::EmptyContext(t));
        }
        let mut h = Array2::zeros((self.m, cols.len()));
        for (i, (_, e)) in cols.iter().enumerate() {
            for (k, v) in e.values.iter().enumerate() {
                h[[k, i]] = *v as f64;
            }
        }
        Ok(Snapshot {
            users: cols.iter().map(|(u, _)| u.to_string()).collect(),
            last_times: cols.iter().map(|(_, e)| e.t).collect(),
            h,
            excluded,
            t,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = IndexHeader {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            m: self.m,
            users: self.tracks.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, track) in &self.tracks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(track.times.len() as u64).to_le_bytes());
            for t in &track.times {
                out.extend_from_slice(&t.to_le_bytes());
            }
            for v in &track.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let len = r.u32()? as usize;
        let header: IndexHeader = serde_json::from_slice(r.take(len)?)?;
        if header.format != INDEX_FORMAT {
            return Err(Error::Format(format!("expected {INDEX_FORMAT}, found {}", header.format)));
        }
        if header.version != INDEX_VERSION {
            return Err(Error::Format(format!(
                "index version {} (supported: {INDEX_VERSION})",
                header.version
            )));
        }
        let mut idx = Self::new(header.m);
        for _ in 0..header.users {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("user id is not UTF-8".into()))?;
            let count = r.u64()? as usize;
            let times = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let values = r
                .take(count * header.m * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            idx.tracks.insert(name, Track { times, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in index", bytes.len() - r.pos)));
        }
        Ok(idx)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    m: usize,
    users: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format("index file truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Context users' latest states at query time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub users: Vec<String>,
    /// `m × n`, column `i` belongs to `users[i]`.
    pub h: Array2<f64>,
    /// Time of each column's stored state.
    pub last_times: Vec<f64>,
    /// Requested users with nothing stored at or before `t`.
    pub excluded: Vec<String>,
    pub t: f64,
}

impl Snapshot {
    pub fn n(&self) -> usize {
        self.users.len()
    }

    pub fn width(&self) -> usize {
        self.h.nrows()
    }

    /// Copy without `user`'s column; `None` when it was the only column.
    pub fn without(&self, user: &str) -> Option<Snapshot> {
        let Some(pos) = self.users.iter().position(|u| u == user) else {
            return Some(self.clone());
        };
        if self.n() == 1 {
            return None;
        }
        let keep: Vec<usize> = (0..self.n()).filter(|i| *i != pos).collect();
        let mut excluded = self.excluded.clone();
        excluded.push(user.to_string());
        Some(Snapshot {
            users: keep.iter().map(|i| self.users[*i].clone()).collect(),
            h: self.h.select(ndarray::Axis(1), &keep),
            last_times: keep.iter().map(|i| self.last_times[*i]).collect(),
            excluded,
            t: self.t,
        })
    }
}

/// Anything that maps a snapshot (and optionally the query user's own state)
/// to an external context vector.
pub trait ContextAggregator: Sync {
    /// `false` when the output ignores the query state.
    fn query_dependent(&self) -> bool;
    fn aggregate(&self, snapshot: &Snapshot, query: Option<ArrayView1<f64>>) -> Result<Array1<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefreshPolicy {
    /// Time between refresh ticks.
    pub interval: f64,
    /// Drop the served user's own column from its snapshot.
    #[serde(default)]
    pub exclude_self: bool,
}

impl RefreshPolicy {
    pub fn new(interval: f64) -> Result<Self> {
        if !(interval > 0.0) || !interval.is_finite() {
            return Err(Error::Config {
                field: "refresh.interval".into(),
                message: format!("must be positive and finite, got {interval}"),
            });
        }
        Ok(Self {
            interval,
            exclude_self: false,
        })
    }

    /// Ticks `t_start, t_start + Δ, …` up to and including `t_end`.
    pub fn ticks(&self, t_start: f64, t_end: f64) -> Vec<f64> {
        let span = (t_end - t_start) / self.interval;
        let k_max = (span + 1e-9).floor() as usize;
        (0..=k_max).map(|k| t_start + k as f64 * self.interval).collect()
    }
}

/// External vectors computed at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickContext {
    pub t: f64,
    pub users: Vec<String>,
    /// `users.len() × m`.
    pub g: Array2<f64>,
}

impl TickContext {
    pub fn get(&self, user: &str) -> Option<ArrayView1<'_, f64>> {
        self.users
            .binary_search_by(|u| u.as_str().cmp(user))
            .ok()
            .map(|i| self.g.row(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshLogRow {
    pub tick_time: f64,
    pub users: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExternalStore {
    pub ticks: Vec<TickContext>,
    pub log: Vec<RefreshLogRow>,
    /// Tick times whose computation failed.
    pub skipped: Vec<f64>,
}

impl ExternalStore {
    /// The `g` served at `q`: the one from the latest tick at or before `q`.
    pub fn serve(&self, user: &str, q: f64) -> Option<(f64, ArrayView1<'_, f64>)> {
        let i = self.ticks.partition_point(|tc| tc.t <= q);
        let tick = self.ticks.get(i.checked_sub(1)?)?;
        tick.get(user).map(|g| (tick.t, g))
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Computes `g` for every indexed user at one tick.
pub fn compute_tick(
    index: &AsOfIndex,
    aggregator: &dyn ContextAggregator,
    context: &[String],
    exclude_self: bool,
    t: f64,
) -> Result<TickContext> {
    let snap = index.snapshot(context, t)?;
    let users: Vec<String> = index.users().map(str::to_string).collect();
    let m = index.width();
    let rows: Vec<Option<Array1<f64>>> = if !aggregator.query_dependent() && !exclude_self {
        let g = aggregator.aggregate(&snap, None)?;
        users.iter().map(|_| Some(g.clone())).collect()
    } else {
        users
            .par_iter()
            .map(|u| {
                let query = index.asof(u, t).map(|e| e.to_array());
                if aggregator.query_dependent() && query.is_none() {
                    return Ok(None);
                }
                let own;
                let s = if exclude_self {
                    match snap.without(u) {
                        Some(s) => {
                            own = s;
                            &own
                        }
                        None => return Ok(None),
                    }
                } else {
                    &snap
                };
                aggregator.aggregate(s, query.as_ref().map(|q| q.view())).map(Some)
            })
            .collect::<Result<_>>()?
    };
    let served: Vec<(String, Array1<f64>)> = users
        .into_iter()
        .zip(rows)
        .filter_map(|(u, g)| g.map(|g| (u, g)))
        .collect();
    let mut g = Array2::zeros((served.len(), m));
    for (i, (_, row)) in served.iter().enumerate() {
        g.row_mut(i).assign(row);
    }
    Ok(TickContext {
        t,
        users: served.into_iter().map(|(u, _)| u).collect(),
        g,
    })
}

/// Recomputes every user's external vector at each policy tick in
/// `[t_start, t_end]`. A failing tick is logged and skipped.
pub fn refresh_external(
    index: &AsOfIndex,
    aggregator: &dyn ContextAggregator,
    context: &[String],
    policy: &RefreshPolicy,
    t_start: f64,
    t_end: f64,
) -> Result<ExternalStore> {
    if t_end < t_start {
        return Err(Error::invalid(format!("t_end {t_end} before t_start {t_start}")));
    }
    let mut out = ExternalStore::default();
    for t in policy.ticks(t_start, t_end) {
        let start = Instant::now();
        match compute_tick(index, aggregator, context, policy.exclude_self, t) {
            Ok(tick) => {
                out.log.push(RefreshLogRow {
                    tick_time: t,
                    users: tick.users.len(),
                    millis: start.elapsed().as_secs_f64() * 1e3,
                });
                out.ticks.push(tick);
            }
            Err(e) => {
                log::warn!("refresh tick at t={t} skipped: {e}");
                out.log.push(RefreshLogRow {
                    tick_time: t,
                    users: 0,
                    millis: start.elapsed().as_secs_f64() * 1e3,
                });
                out.skipped.push(t);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn idx() -> AsOfIndex {
        let mut i = AsOfIndex::new(2);
        for (t, v) in [(1.0, 10.0), (5.0, 50.0), (9.0, 90.0)] {
            i.insert("a", t, array![v, -v].view()).unwrap();
        }
        i.insert("b", 3.0, array![3.0, 3.0].view()).unwrap();
        i.insert("c", 20.0, array![7.0, 7.0].view()).unwrap();
        i
    }

    #[test]
    fn insert_contract() {
        let mut i = AsOfIndex::new(2);
        i.insert("u", 1.0, array![0.0, 0.0].view()).unwrap();
        i.insert("u", 2.0, array![0.0, 0.0].view()).unwrap();
        assert_eq!(i.times("u").unwrap().len(), 2);
        assert!(i.insert("u", 2.0, array![0.0, 0.0].view()).is_err());
        assert!(matches!(i.insert("v", 3.0, array![0.0, 0.0, 0.0].view()), Err(Error::Shape { .. })));
    }

    #[test]
    fn asof_examples() {
        let i = idx();
        assert_eq!(i.asof("a", 7.0).unwrap().values, &[50.0, -50.0]);
        assert_eq!(i.asof("a", 9.0).unwrap().t, 9.0);
        assert!(i.asof("a", 0.5).is_none());
        assert!(i.asof("zzz", 5.0).is_none());
    }

    #[test]
    fn snapshot_excludes_users_without_history() {
        let i = idx();
        let s = i.snapshot(&["a", "c", "b"], 6.0).unwrap();
        assert_eq!(s.users, vec!["a", "b"]);
        assert_eq!(s.excluded, vec!["c"]);
        assert_eq!(s.h.column(0).to_vec(), vec![50.0, -50.0]);
        assert_eq!(s.last_times, vec![5.0, 3.0]);
        assert!(matches!(i.snapshot(&["c"], 6.0), Err(Error::EmptyContext(_))));
        let late = i.snapshot(&["a", "b", "c"], 100.0).unwrap();
        assert_eq!(late.h.column(2).to_vec(), vec![7.0, 7.0]);
    }

    #[test]
    fn round_trip_and_truncation() {
        let i = idx();
        let bytes = i.to_bytes().unwrap();
        assert_eq!(AsOfIndex::from_bytes(&bytes).unwrap(), i);
        assert!(AsOfIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let empty = AsOfIndex::new(4);
        assert_eq!(AsOfIndex::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let bytes = idx().to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[4..4 + len].to_vec()).unwrap();
        let bumped = json.replace("\"version\":1", "\"version\":2");
        let mut patched = (bumped.len() as u32).to_le_bytes().to_vec();
        patched.extend_from_slice(bumped.as_bytes());
        patched.extend_from_slice(&bytes[4 + len..]);
        assert!(matches!(AsOfIndex::from_bytes(&patched), Err(Error::Format(_))));
    }

    #[test]
    fn tick_schedule() {
        let p = RefreshPolicy::new(4.0).unwrap();
        assert_eq!(p.ticks(1.0, 5.0), vec![1.0, 5.0]);
        assert_eq!(p.ticks(0.0, 9.0), vec![0.0, 4.0, 8.0]);
        assert_eq!(RefreshPolicy::new(0.1).unwrap().ticks(0.0, 0.3).len(), 4);
        assert!(RefreshPolicy::new(0.0).is_err());
    }

    struct ColumnSum;

    impl ContextAggregator for ColumnSum {
        fn query_dependent(&self) -> bool {
            false
        }

        fn aggregate(&self, s: &Snapshot, _: Option<ArrayView1<f64>>) -> Result<Array1<f64>> {
            Ok(s.h.sum_axis(ndarray::Axis(1)))
        }
    }

    #[test]
    fn refresh_skips_failing_ticks() {
        let i = idx();
        let ctx = vec!["c".to_string()];
        let out = refresh_external(&i, &ColumnSum, &ctx, &RefreshPolicy::new(10.0).unwrap(), 0.0, 20.0).unwrap();
        assert_eq!(out.skipped, vec![0.0, 10.0]);
        assert_eq!(out.ticks.len(), 1);
        assert_eq!(out.log.len(), 3);
        assert!(out.serve("a", 15.0).is_none());
        assert_eq!(out.serve("a", 25.0).unwrap().1.to_vec(), vec![7.0, 7.0]);
    }
}
