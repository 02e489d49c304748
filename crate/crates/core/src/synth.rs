//! Multivariate Hawkes generator for mutually-exciting users.
//!
//! The intensity of user `u` is
//! `μ_u + Σ_v Σ_{e ∈ H_v(t)} b_uv · exp(-β (t - t_e))`, so the branching
//! ratio of the kernel is `b / β`. Sampling uses Ogata thinning: between
//! events the total intensity only decays, so its value at the current time
//! bounds it until the next acceptance.
//!
//! Marks carry the cross-user signal. With probability `contagion` an
//! event copies the type of a recent event among the users exciting it,
//! picked in proportion to that event's current excitation; otherwise the
//! type comes from the user's own categorical profile. With a zero coupling
//! matrix nothing is ever copied and users are independent.

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Event, EventSequence, LabeledDataset};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_EVENTS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkModel {
    /// Per-user categorical distribution over event types.
    pub type_probs: Vec<Vec<f64>>,
    /// Log-normal location of the amount, per event type.
    pub amount_log_mean: Vec<f64>,
    pub amount_log_std: f64,
    pub contagion: f64,
}

impl MarkModel {
    pub fn vocab_size(&self) -> usize {
        self.amount_log_mean.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesConfig {
    pub users: Vec<String>,
    pub base_rates: Vec<f64>,
    /// `coupling[u][v]`: excitation of user `u` by each event of user `v`.
    pub coupling: Vec<Vec<f64>>,
    pub decay: f64,
    pub marks: MarkModel,
    pub horizon: f64,
    pub groups: Vec<usize>,
    pub max_events: usize,
}

impl HawkesConfig {
    pub fn n_users(&self) -> usize {
        self.base_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_users();
        let v = self.marks.vocab_size();
        if self.users.len() != n || self.groups.len() != n || self.coupling.len() != n {
            return Err(Error::invalid("users, groups, base_rates and coupling disagree in length"));
        }
        if self.marks.type_probs.len() != n {
            return Err(Error::invalid("mark model needs one type distribution per user"));
        }
        if !(self.decay > 0.0) {
            return Err(Error::invalid(format!("decay must be positive, got {}", self.decay)));
        }
        if !(self.horizon >= 0.0) {
            return Err(Error::invalid(format!("horizon must be non-negative, got {}", self.horizon)));
        }
        if !(0.0..=1.0).contains(&self.marks.contagion) {
            return Err(Error::invalid("contagion must lie in [0, 1]"));
        }
        if !(self.marks.amount_log_std >= 0.0) {
            return Err(Error::invalid("amount_log_std must be non-negative"));
        }
        for (u, &mu) in self.base_rates.iter().enumerate() {
            if !(mu > 0.0) {
                return Err(Error::invalid(format!("base rate of user {u} must be positive")));
            }
        }
        for (u, row) in self.coupling.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape(format!("coupling row of width {n}"), row.len()));
            }
            if row.iter().any(|b| !(*b >= 0.0)) {
                return Err(Error::invalid(format!("coupling row {u} has a negative or NaN entry")));
            }
        }
        for (u, p) in self.marks.type_probs.iter().enumerate() {
            if p.len() != v {
                return Err(Error::shape(format!("type distribution of width {v}"), p.len()));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 || p.iter().any(|x| *x < 0.0) {
                return Err(Error::invalid(format!("type distribution of user {u} sums to {s}")));
            }
        }
        let rho = spectral_radius(&self.scaled_coupling());
        if !(rho < 1.0) {
            return Err(Error::invalid(format!(
                "spectral radius of coupling / decay is {rho:.6}; stationarity needs < 1"
            )));
        }
        Ok(())
    }

    /// `B / β`, the mean offspring matrix.
    pub fn scaled_coupling(&self) -> Vec<Vec<f64>> {
        self.coupling
            .iter()
            .map(|row| row.iter().map(|b| b / self.decay).collect())
            .collect()
    }

    /// Expected events on `[0, horizon]` at the stationary rate, which bounds
    /// the count of a process started empty.
    pub fn expected_events(&self) -> f64 {
        let n = self.n_users();
        let k = DMatrix::from_fn(n, n, |u, v| self.coupling[u][v] / self.decay);
        let a = DMatrix::identity(n, n) - k;
        let mu = DVector::from_vec(self.base_rates.clone());
        match a.lu().solve(&mu) {
            Some(rates) => rates.sum() * self.horizon,
            None => f64::INFINITY,
        }
    }

    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Perron root of a nonnegative matrix by power iteration on `M + I`,
/// returning the Collatz–Wielandt upper bound once it meets the lower one.
pub fn spectral_radius(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n == 0 {
        return 0.0;
    }
    let mut x = vec![1.0; n];
    let mut upper = f64::INFINITY;
    for _ in 0..20_000 {
        let y: Vec<f64> = (0..n)
            .map(|i| x[i] + m[i].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let r = y[i] / x[i];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        upper = hi - 1.0;
        let scale = y.iter().cloned().fold(0.0, f64::max);
        x = y.into_iter().map(|v| v / scale).collect();
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
    }
    upper
}

/// A past event as seen by [`intensity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PastEvent {
    pub user: usize,
    pub t: f64,
}

/// Conditional intensity of user `u` at time `t` given every earlier event.
pub fn intensity(config: &HawkesConfig, u: usize, t: f64, history: &[PastEvent]) -> Result<f64> {
    if u >= config.n_users() {
        return Err(Error::invalid(format!("user index {u} out of range")));
    }
    let mut lambda = config.base_rates[u];
    for e in history {
        if e.t > t {
            return Err(Error::invalid(format!(
                "history event at {} is later than query time {t}",
                e.t
            )));
        }
        lambda += config.coupling[u][e.user] * (-config.decay * (t - e.t)).exp();
    }
    Ok(lambda)
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: LabeledDataset,
    pub config_hash: String,
    pub seed: u64,
}

fn sample_categorical<R: Rng>(rng: &mut R, weights: &[f64], total: f64) -> usize {
    let mut target = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return i;
        }
        target -= w;
    }
    // floating-point slack: fall back to the last positive weight
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Draws one realization on `[0, horizon]`. Labels are the latent groups.
pub fn simulate(config: &HawkesConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let expected = config.expected_events();
    if expected > config.max_events as f64 {
        return Err(Error::invalid(format!(
            "expected {expected:.0} events exceeds the safety cap of {}; shorten the horizon or weaken coupling",
            config.max_events
        )));
    }

    let n = config.n_users();
    let vocab = config.marks.vocab_size();
    let beta = config.decay;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu_total: f64 = config.base_rates.iter().sum();
    let col_sum: Vec<f64> = (0..n).map(|v| (0..n).map(|u| config.coupling[u][v]).sum()).collect();
    let amount_noise = Normal::new(0.0, config.marks.amount_log_std.max(0.0))
        .map_err(|e| Error::invalid(e.to_string()))?;

    // Excitation per (target user, type), stored relative to `t_ref`.
    let mut exc = vec![0.0f64; n * vocab];
    let mut exc_row = vec![0.0f64; n];
    let mut exc_total = 0.0f64;
    let mut t_ref = 0.0f64;
    let mut t = 0.0f64;
    let mut events: Vec<Vec<Event>> = vec![Vec::new(); n];
    let mut count = 0usize;
    let mut weights = vec![0.0f64; n];

    loop {
        let bound = mu_total + exc_total * (-beta * (t - t_ref)).exp();
        let wait = Exp::new(bound).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut rng);
        let s = t + wait;
        if s > config.horizon {
            break;
        }
        t = s;
        let lambda = mu_total + exc_total * (-beta * (t - t_ref)).exp();
        if rng.random::<f64>() * bound > lambda {
            continue;
        }

        if beta * (t - t_ref) > 30.0 {
            let f = (-beta * (t - t_ref)).exp();
            exc.iter_mut().for_each(|x| *x *= f);
            exc_row.iter_mut().for_each(|x| *x *= f);
            t_ref = t;
        }
        let f = (-beta * (t - t_ref)).exp();

        let mut total = 0.0;
        for u in 0..n {
            weights[u] = config.base_rates[u] + f * exc_row[u];
            total += weights[u];
        }
        let u = sample_categorical(&mut rng, &weights, total);

        let own = &exc[u * vocab..(u + 1) * vocab];
        let code = if config.marks.contagion > 0.0
            && exc_row[u] > 0.0
            && rng.random::<f64>() < config.marks.contagion
        {
            sample_categorical(&mut rng, own, exc_row[u])
        } else {
            sample_categorical(&mut rng, &config.marks.type_probs[u], 1.0)
        };
        let amount = (config.marks.amount_log_mean[code] + amount_noise.sample(&mut rng)).exp();

        let mut time = t;
        if let Some(last) = events[u].last() {
            if time <= last.t {
                time = last.t + 1e-9;
            }
        }
        events[u].push(Event {
            t: time,
            event_type: code as u32,
            amount,
        });
        count += 1;
        if count > config.max_events {
            return Err(Error::invalid(format!(
                "simulation exceeded the safety cap of {} events",
                config.max_events
            )));
        }

        if col_sum[u] > 0.0 {
            let inv = 1.0 / f;
            for target in 0..n {
                let b = config.coupling[target][u];
                if b > 0.0 {
                    exc[target * vocab + code] += b * inv;
                    exc_row[target] += b * inv;
                }
            }
            exc_total = exc_row.iter().sum();
        }
    }
    debug!("simulated {count} events for {n} users");

    let seqs = events
        .into_iter()
        .enumerate()
        .filter(|(_, ev)| !ev.is_empty())
        .map(|(u, ev)| EventSequence::new(config.users[u].clone(), ev, Some(config.groups[u] as i64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        dataset: LabeledDataset::from_sequences(seqs),
        config_hash: config.config_hash(),
        seed,
    })
}

/// Parameters of the grouped testbed. `within_coupling` and
/// `cross_coupling` are branching ratios: the expected number of direct
/// offspring one event triggers inside its own group and across all other
/// groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupedSpec {
    pub n_users: usize,
    pub n_groups: usize,
    pub within_coupling: f64,
    pub cross_coupling: f64,
    pub seed: u64,
    pub base_rate: f64,
    pub decay: f64,
    /// Horizon is chosen so a user sees about this many events.
    pub events_per_user: f64,
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub group_mark_separation: f64,
    pub user_mark_noise: f64,
    pub contagion: f64,
    pub amount_log_std: f64,
    pub max_events: usize,
}

impl Default for GroupedSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_groups: 2,
            within_coupling: 0.4,
            cross_coupling: 0.05,
            seed: 0,
            base_rate: 1.0,
            decay: 1.0,
            events_per_user: 300.0,
            vocab_size: 16,
            zipf_exponent: 0.5,
            group_mark_separation: 1.0,
            user_mark_noise: 1.0,
            contagion: 0.9,
            amount_log_std: 0.5,
            max_events: DEFAULT_MAX_EVENTS,
        }
    }
}

impl GroupedSpec {
    pub fn build(&self) -> Result<HawkesConfig> {
        make_grouped(self)
    }
}

/// Grouped configuration with defaults for everything but the coupling.
pub fn make_grouped_config(
    n_users: usize,
    n_groups: usize,
    within_coupling: f64,
    cross_coupling: f64,
    seed: u64,
) -> Result<HawkesConfig> {
    GroupedSpec {
        n_users,
        n_groups,
        within_coupling,
        cross_coupling,
        seed,
        ..GroupedSpec::default()
    }
    .build()
}

fn make_grouped(spec: &GroupedSpec) -> Result<HawkesConfig> {
    let n = spec.n_users;
    let g = spec.n_groups;
    if n == 0 || g == 0 || g > n {
        return Err(Error::invalid(format!("cannot split {n} users into {g} groups")));
    }
    if !(spec.within_coupling >= spec.cross_coupling && spec.cross_coupling >= 0.0) {
        return Err(Error::invalid("need within_coupling >= cross_coupling >= 0"));
    }
    if spec.vocab_size == 0 {
        return Err(Error::invalid("vocab_size must be positive"));
    }

    let groups: Vec<usize> = (0..n).map(|i| i * g / n).collect();
    let mut sizes = vec![0usize; g];
    for &gr in &groups {
        sizes[gr] += 1;
    }
    let beta = spec.decay;
    let coupling: Vec<Vec<f64>> = (0..n)
        .map(|u| {
            let gu = groups[u];
            let outside = n - sizes[gu];
            (0..n)
                .map(|v| {
                    if groups[v] == gu {
                        beta * spec.within_coupling / sizes[gu] as f64
                    } else if outside > 0 {
                        beta * spec.cross_coupling / outside as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let scaled: Vec<Vec<f64>> = coupling.iter().map(|r| r.iter().map(|b| b / beta).collect()).collect();
    let rho = spectral_radius(&scaled);
    if !(rho < 1.0) {
        return Err(Error::invalid(format!(
            "spectral radius of coupling / decay is {rho:.6} (within {} + cross {}); must be < 1",
            spec.within_coupling, spec.cross_coupling
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v = spec.vocab_size;
    let base: Vec<f64> = (0..v).map(|c| 1.0 / ((c + 1) as f64).powf(spec.zipf_exponent)).collect();
    let group_profiles: Vec<Vec<f64>> = (0..g)
        .map(|_| {
            let logits: Vec<f64> = base
                .iter()
                .map(|p| p.ln() + spec.group_mark_separation * std_normal.sample(&mut rng))
                .collect();
            softmax_vec(&logits)
        })
        .collect();
    let type_probs: Vec<Vec<f64>> = groups
        .iter()
        .map(|&gr| {
            let logits: Vec<f64> = group_profiles[gr]
                .iter()
                .map(|p| p.ln() + spec.user_mark_noise * std_normal.sample(&mut rng))
                .collect();
            softmax_vec(&logits)
        })
        .collect();
    let amount_log_mean: Vec<f64> = (0..v).map(|c| 2.0 + 0.25 * c as f64).collect();

    let width = (n.max(2) - 1).to_string().len();
    let users: Vec<String> = (0..n).map(|i| format!("u{i:0width$}")).collect();
    let stationary_rate = spec.base_rate / (1.0 - rho);
    let horizon = spec.events_per_user / stationary_rate;

    let config = HawkesConfig {
        users,
        base_rates: vec![spec.base_rate; n],
        coupling,
        decay: beta,
        marks: MarkModel {
            type_probs,
            amount_log_mean,
            amount_log_std: spec.amount_log_std,
            contagion: spec.contagion,
        },
        horizon,
        groups,
        max_events: spec.max_events,
    };
    config.validate()?;
    Ok(config)
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Event counts per user index, in config order.
pub fn event_counts(config: &HawkesConfig, data: &LabeledDataset) -> Vec<usize> {
    let by_user: BTreeMap<&str, usize> = data
        .sequences
        .values()
        .map(|s| (s.user_id.as_str(), s.len()))
        .collect();
    config
        .users
        .iter()
        .map(|u| by_user.get(u.as_str()).copied().unwrap_or(0))
        .collect()
}
