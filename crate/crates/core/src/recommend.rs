//! Dose recommendation from estimated survival curves.
//!
//! The recommender value of switching a patient from dose `a` to `a'` is
//! `r = log psibar(a') - log psibar(a)`, where `psibar` is the time-averaged
//! survival curve. Random search maximises `r` over sampled grid doses;
//! the RL recommender learns a tabular Q-function over (state bin, grid dose)
//! by TD updates inside policy iteration.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::stats;

/// Floor applied to `psibar` before taking logs.
pub const PSI_FLOOR: f64 = 1e-9;

pub const FLAG_PSI_FLOOR: &str = "psi-floor";
pub const FLAG_DOSE_CLAMPED: &str = "dose-clamped";
pub const FLAG_NOT_CONVERGED: &str = "not-converged";

/// Evenly spaced doses between two percentiles of the observed doses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    pub levels: Vec<f64>,
    pub lo_percentile: f64,
    pub hi_percentile: f64,
}

impl ActionGrid {
    pub fn from_doses(doses: &[f64], lo_percentile: f64, hi_percentile: f64, n_levels: usize) -> Result<Self> {
        if doses.is_empty() {
            return Err(Error::InvalidInput("no doses to build the action grid".into()));
        }
        if !(0.0..=100.0).contains(&lo_percentile) || !(0.0..=100.0).contains(&hi_percentile) || lo_percentile >= hi_percentile {
            return Err(Error::InvalidConfig(format!("bad grid percentiles {lo_percentile}, {hi_percentile}")));
        }
        let lo = stats::percentile(doses, lo_percentile);
        let hi = stats::percentile(doses, hi_percentile);
        let levels = if n_levels <= 1 || hi <= lo {
            vec![lo]
        } else {
            (0..n_levels).map(|k| lo + (hi - lo) * k as f64 / (n_levels - 1) as f64).collect()
        };
        Ok(Self { levels, lo_percentile, hi_percentile })
    }

    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("grid levels must be nonempty and strictly increasing".into()));
        }
        Ok(Self { levels, lo_percentile: f64::NAN, hi_percentile: f64::NAN })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.levels[0]
    }

    pub fn hi(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    pub fn clamp(&self, a: f64) -> f64 {
        a.clamp(self.lo(), self.hi())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RValue {
    pub r: f64,
    pub floored: bool,
}

/// `log psibar(a') - log psibar(a)` from two precomputed `psibar` values.
pub fn log_ratio(psi_a: f64, psi_a_prime: f64) -> RValue {
    let floored = !(psi_a >= PSI_FLOOR && psi_a_prime >= PSI_FLOOR);
    let lp = |p: f64| if p >= PSI_FLOOR { p.ln() } else { PSI_FLOOR.ln() };
    RValue { r: lp(psi_a_prime) - lp(psi_a), floored }
}

/// Recommender value for one patient; `psibar` maps a dose to that patient's
/// time-averaged survival.
pub fn recommender_value<F>(psibar: F, a: f64, a_prime: f64) -> Result<RValue>
where
    F: Fn(f64) -> Result<f64>,
{
    Ok(log_ratio(psibar(a)?, psibar(a_prime)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rs,
    Rl,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Rs => "rs",
            Method::Rl => "rl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub patient_id: usize,
    pub method: Method,
    pub original_dose: f64,
    pub recommended_dose: f64,
    pub r_value: f64,
    pub flags: Vec<String>,
}

/// Index of the best candidate by `r`, ties to the dose closest to `a_obs`,
/// then to the smaller dose.
fn best_candidate(cands: &[(f64, RValue)], a_obs: f64) -> usize {
    let mut best = 0;
    for (k, (a, v)) in cands.iter().enumerate().skip(1) {
        let (ba, bv) = cands[best];
        let better = v.r > bv.r
            || (v.r == bv.r
                && ((a - a_obs).abs() < (ba - a_obs).abs()
                    || ((a - a_obs).abs() == (ba - a_obs).abs() && *a < ba)));
        if better {
            best = k;
        }
    }
    best
}

/// Random search: `n_draws` grid doses drawn uniformly with replacement, plus
/// the observed dose clamped into the grid, scored by `r(a_obs, a')`.
pub fn recommend_rs<F>(
    patient_id: usize,
    psibar: F,
    a_obs: f64,
    grid: &ActionGrid,
    n_draws: usize,
    seed: u64,
) -> Result<Recommendation>
where
    F: Fn(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty action grid".into()));
    }
    let mut rng = rng::stream(rng::derive(seed, patient_id as u64), streams::SEARCH);
    let mut doses = vec![grid.clamp(a_obs)];
    doses.extend((0..n_draws).map(|_| grid.levels[rng.random_range(0..grid.len())]));
    doses.sort_by(f64::total_cmp);
    doses.dedup();
    let psi_obs = psibar(a_obs)?;
    let cands: Vec<(f64, RValue)> =
        doses.iter().map(|&d| Ok((d, log_ratio(psi_obs, if d == a_obs { psi_obs } else { psibar(d)? })))).collect::<Result<_>>()?;
    let k = best_candidate(&cands, a_obs);
    let mut flags = Vec::new();
    if cands.iter().any(|(_, v)| v.floored) {
        flags.push(FLAG_PSI_FLOOR.to_string());
    }
    if grid.clamp(a_obs) != a_obs {
        flags.push(FLAG_DOSE_CLAMPED.to_string());
    }
    Ok(Recommendation {
        patient_id,
        method: Method::Rs,
        original_dose: a_obs,
        recommended_dose: cands[k].0,
        r_value: cands[k].1.r,
        flags,
    })
}

/// Tabular Q-function over `(state, action)` with quantile state binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub q: Vec<f64>,
    /// Interior quantile edges of the state summary; `edges.len() + 1` bins.
    pub edges: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, alpha: f64, gamma: f64) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidConfig("Q-table needs at least one state and action".into()));
        }
        if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("alpha and gamma must lie in [0, 1], got {alpha}, {gamma}")));
        }
        Ok(Self { n_states, n_actions, q: vec![0.0; n_states * n_actions], edges: Vec::new(), alpha, gamma })
    }

    /// Table whose states are quantile bins of `summaries`.
    pub fn with_bins(summaries: &[f64], n_bins: usize, n_actions: usize, alpha: f64, gamma: f64) -> Result<Self> {
        let n_bins = n_bins.max(1);
        let mut edges: Vec<f64> = (1..n_bins).map(|k| stats::quantile(summaries, k as f64 / n_bins as f64)).collect();
        edges.dedup();
        let mut t = Self::new(edges.len() + 1, n_actions, alpha, gamma)?;
        t.edges = edges;
        Ok(t)
    }

    pub fn state_of(&self, summary: f64) -> usize {
        self.edges.partition_point(|&e| e <= summary).min(self.n_states - 1)
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// `Q(s,a) += alpha (r + gamma Q(s',a') - Q(s,a))`; a terminal transition
    /// passes `None` and bootstraps from zero.
    pub fn td_update(&mut self, s: usize, a: usize, r: f64, next: Option<(usize, usize)>) {
        let boot = next.map_or(0.0, |(s2, a2)| self.get(s2, a2));
        let k = s * self.n_actions + a;
        self.q[k] += self.alpha * (r + self.gamma * boot - self.q[k]);
    }

    /// Greedy action per state, ties to the smaller action index.
    pub fn greedy(&self) -> Vec<usize> {
        (0..self.n_states)
            .map(|s| {
                let row = self.row(s);
                (1..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b })
            })
            .collect()
    }
}

/// One transition source for the pseudo-environment: a start state, the
/// reward of every action, and the state reached afterwards (`None` when the
/// episode ends).
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub state: usize,
    pub rewards: Vec<f64>,
    pub next_state: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlPolicy {
    pub policy: Vec<usize>,
    pub q: QTable,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub iters: usize,
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self { alpha: 0.05, gamma: 0.99, iters: 20, sweeps: 20, seed: 0 }
    }
}

/// Policy iteration from a random policy. Each evaluation phase runs `sweeps`
/// passes over the shuffled episodes, taking a uniformly random action in the
/// start state and bootstrapping from the current policy's action in the next
/// state. Stops once the greedy policy no longer changes.
pub fn fit_rl_policy(episodes: &[Episode], q: QTable, cfg: &RlConfig) -> Result<RlPolicy> {
    let mut q = q;
    if episodes.is_empty() {
        return Err(Error::InvalidInput("no episodes".into()));
    }
    for e in episodes {
        if e.state >= q.n_states || e.next_state.is_some_and(|s| s >= q.n_states) || e.rewards.len() != q.n_actions {
            return Err(Error::Shape("episode does not fit the Q-table".into()));
        }
    }
    let mut rng = rng::stream(cfg.seed, streams::POLICY);
    let mut policy: Vec<usize> = (0..q.n_states).map(|_| rng.random_range(0..q.n_actions)).collect();
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    for it in 1..=cfg.iters.max(1) {
        for _ in 0..cfg.sweeps.max(1) {
            order.shuffle(&mut rng);
            for &i in &order {
                let e = &episodes[i];
                let a = rng.random_range(0..q.n_actions);
                q.td_update(e.state, a, e.rewards[a], e.next_state.map(|s| (s, policy[s])));
            }
        }
        let next = q.greedy();
        if next == policy {
            return Ok(RlPolicy { policy, q, converged: true, iterations: it });
        }
        policy = next;
    }
    Ok(RlPolicy { policy, q, converged: false, iterations: cfg.iters.max(1) })
}

/// One-step Bellman value `V(x) = sum_a' g(a', x) Q(a', x)` with `g`
/// renormalised to sum to one over the grid. Falls back to uniform weights
/// when every `g` is zero.
pub fn policy_value(q_values: &[f64], g: &[f64]) -> Result<f64> {
    if q_values.len() != g.len() || g.is_empty() {
        return Err(Error::Shape("Q values and GPS weights must align".into()));
    }
    if g.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidInput("GPS weights must be nonnegative".into()));
    }
    let total: f64 = g.iter().sum();
    if total <= 0.0 {
        return Ok(stats::mean(q_values));
    }
    Ok(q_values.iter().zip(g).map(|(q, w)| q * w / total).sum())
}

/// Recommendations CSV: `patient_id,method,original_dose,recommended_dose,r_value,flags`.
pub fn write_recommendations_csv<W: std::io::Write>(recs: &[Recommendation], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["patient_id", "method", "original_dose", "recommended_dose", "r_value", "flags"])?;
    for r in recs {
        out.write_record([
            r.patient_id.to_string(),
            r.method.to_string(),
            r.original_dose.to_string(),
            r.recommended_dose.to_string(),
            r.r_value.to_string(),
            r.flags.join(";"),
        ])?;
    }
    out.flush()?;
    Ok(())
}
