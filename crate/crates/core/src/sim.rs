//! Synthetic longitudinal cohorts with known dose-response ground truth.
//!
//! Covariates start as `N(0, V)` draws and decay as `X(t) = X(t-1) / sqrt(t)`.
//! The dose at every step is exponential with mean
//! `clamp(eta * mean_d X(t) + (1 - eta) * 0.5, 1e-3, inf)`. Per-step hazards
//! are `N(a + s * exp(-a * s), 1)` with `s = sum_d X(t)_d`, clamped to `[0, 1]`,
//! and event and censoring times come from first crossings of a single
//! uniform draw per patient.

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Floor on the exponential mean parameter.
pub const DOSE_MEAN_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n_patients: usize,
    pub dim_d: usize,
    pub variance_v: f64,
    pub overlap_eta: f64,
    pub max_followup: usize,
    pub censor_lambda: f64,
    pub history_h: usize,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_patients: 3000,
            dim_d: 8,
            variance_v: 0.5,
            overlap_eta: 0.5,
            max_followup: 12,
            censor_lambda: 30.0,
            history_h: 1,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_patients < 1 {
            return bad("n_patients must be >= 1");
        }
        if self.dim_d < 1 {
            return bad("dim_d must be >= 1");
        }
        if !(self.variance_v >= 0.0) || !self.variance_v.is_finite() {
            return bad("variance_v must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.overlap_eta) {
            return bad("overlap_eta must lie in [0, 1]");
        }
        if self.max_followup < 1 {
            return bad("max_followup must be >= 1");
        }
        if !(self.censor_lambda > 0.0) {
            return bad("censor_lambda must be > 0");
        }
        if self.history_h < 1 {
            return bad("history_h must be >= 1");
        }
        Ok(())
    }

    /// Number of simulated steps, `t = 0..=max_followup`.
    pub fn steps(&self) -> usize {
        self.max_followup + 1
    }
}

/// Covariate tensor laid out `[patient][time][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub n: usize,
    pub steps: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Covariates {
    pub fn at(&self, patient: usize, t: usize) -> &[f64] {
        let start = (patient * self.steps + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn sum_at(&self, patient: usize, t: usize) -> f64 {
        self.at(patient, t).iter().sum()
    }

    pub fn mean_at(&self, patient: usize, t: usize) -> f64 {
        self.sum_at(patient, t) / self.dim as f64
    }

    /// Per-step covariate sums of one patient.
    pub fn sums(&self, patient: usize) -> Vec<f64> {
        (0..self.steps).map(|t| self.sum_at(patient, t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub event_time: Vec<usize>,
    pub censor_time: Vec<usize>,
    pub event_flag: Vec<bool>,
}

/// One simulated (or loaded) cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientPanel {
    pub max_followup: usize,
    pub covariates: Covariates,
    /// Dose per `[patient][time]`.
    pub treatment: Vec<f64>,
    pub event_time: Vec<usize>,
    pub censor_time: Vec<usize>,
    pub event_flag: Vec<bool>,
}

impl PatientPanel {
    pub fn n_patients(&self) -> usize {
        self.covariates.n
    }

    pub fn steps(&self) -> usize {
        self.covariates.steps
    }

    pub fn dim(&self) -> usize {
        self.covariates.dim
    }

    pub fn dose(&self, patient: usize, t: usize) -> f64 {
        self.treatment[patient * self.steps() + t]
    }

    pub fn doses(&self, patient: usize) -> &[f64] {
        let s = self.steps();
        &self.treatment[patient * s..(patient + 1) * s]
    }

    pub fn observed_time(&self, patient: usize) -> usize {
        self.event_time[patient].min(self.censor_time[patient])
    }

    /// Last step whose covariates and dose were observed.
    pub fn last_observed_step(&self, patient: usize) -> usize {
        self.observed_time(patient).min(self.max_followup)
    }

    /// Doses at all observed steps, pooled over patients.
    pub fn observed_doses(&self) -> Vec<f64> {
        (0..self.n_patients())
            .flat_map(|i| self.doses(i)[..=self.last_observed_step(i)].to_vec())
            .collect()
    }

    /// Doses received at follow-up commencement.
    pub fn initial_doses(&self) -> Vec<f64> {
        (0..self.n_patients()).map(|i| self.dose(i, 0)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_patients();
        let steps = self.steps();
        if steps != self.max_followup + 1 {
            return Err(Error::Shape(format!(
                "panel has {steps} steps, expected {}",
                self.max_followup + 1
            )));
        }
        if self.covariates.data.len() != n * steps * self.dim()
            || self.treatment.len() != n * steps
            || self.event_time.len() != n
            || self.censor_time.len() != n
            || self.event_flag.len() != n
        {
            return Err(Error::Shape("panel arrays are not aligned".into()));
        }
        if self.treatment.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::InvalidInput("negative or NaN dose".into()));
        }
        for i in 0..n {
            if self.censor_time[i] > self.max_followup || self.event_time[i] > self.max_followup + 1 {
                return Err(Error::InvalidInput(format!("patient {i}: time beyond follow-up")));
            }
            if self.event_flag[i] != (self.event_time[i] <= self.censor_time[i]) {
                return Err(Error::InvalidInput(format!(
                    "patient {i}: event_flag disagrees with event/censor times"
                )));
            }
        }
        Ok(())
    }
}

/// `X(0)_d ~ N(0, V)` and `X(t)_d = X(t-1)_d / sqrt(t)`.
pub fn gen_covariates(cfg: &DgpConfig) -> Covariates {
    let mut rng = rng::stream(cfg.seed, streams::COVARIATES);
    let (n, steps, dim) = (cfg.n_patients, cfg.steps(), cfg.dim_d);
    let sd = cfg.variance_v.sqrt();
    let mut data = vec![0.0; n * steps * dim];
    for i in 0..n {
        let base = i * steps * dim;
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data[base + d] = sd * z;
        }
        for t in 1..steps {
            let scale = (t as f64).sqrt();
            for d in 0..dim {
                data[base + t * dim + d] = data[base + (t - 1) * dim + d] / scale;
            }
        }
    }
    Covariates { n, steps, dim, data }
}

/// Mean of the exponential dose distribution for a covariate vector.
pub fn dose_mean(x: &[f64], overlap_eta: f64) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    (overlap_eta * mean + (1.0 - overlap_eta) * 0.5).max(DOSE_MEAN_FLOOR)
}

/// Density of the generating dose distribution, `g(a, x)`.
pub fn true_dose_density(a: f64, x: &[f64], overlap_eta: f64) -> f64 {
    if a < 0.0 {
        return 0.0;
    }
    let m = dose_mean(x, overlap_eta);
    (-a / m).exp() / m
}

pub fn gen_treatment(covariates: &Covariates, overlap_eta: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, streams::TREATMENT);
    let mut out = Vec::with_capacity(covariates.n * covariates.steps);
    for i in 0..covariates.n {
        for t in 0..covariates.steps {
            let mean = dose_mean(covariates.at(i, t), overlap_eta);
            let exp = Exp::new(1.0 / mean).expect("positive rate");
            out.push(exp.sample(&mut rng));
        }
    }
    out
}

/// Conditional hazard mean `a + s * exp(-a * s)` for covariate sum `s`.
pub fn conditional_hazard_mean(a: f64, x_sum: f64) -> f64 {
    a + x_sum * (-a * x_sum).exp()
}

/// Hazard mean with the covariates integrated out under `X_j ~ Exp(1)`:
/// `a + D / (a + 1)^(D + 1)`.
pub fn marginal_hazard_mean(a: f64, dim_d: usize) -> Result<f64> {
    if !(a > -1.0) {
        return Err(Error::InvalidInput(format!(
            "marginal hazard mean has a pole at a <= -1 (got {a})"
        )));
    }
    Ok(a + dim_d as f64 / (a + 1.0).powi(dim_d as i32 + 1))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[clamp(Z, 0, 1)]` for `Z ~ N(mu, 1)`, in closed form:
/// `G(mu) - G(mu - 1)` with `G(y) = y Phi(y) + phi(y)`.
pub fn clamped_normal_mean(mu: f64) -> f64 {
    let g = |y: f64| y * std_normal_cdf(y) + std_normal_pdf(y);
    (g(mu) - g(mu - 1.0)).clamp(0.0, 1.0)
}

/// Monte Carlo estimate of `E[clamp(Z, 0, 1)]`, `Z ~ N(mu, 1)`.
pub fn clamped_normal_mean_mc(mu: f64, draws: usize, rng: &mut rng::Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..draws {
        let z: f64 = StandardNormal.sample(rng);
        acc += (mu + z).clamp(0.0, 1.0);
    }
    acc / draws as f64
}

/// Index of the first step whose survival drops below `u`.
pub fn first_crossing(survival: &[f64], u: f64) -> Option<usize> {
    survival.iter().position(|&s| s < u)
}

/// Censoring survival `C(t) = exp(-log(t) / lambda)`; infinite at `t = 0`.
pub fn censor_survival(t: usize, lambda: f64) -> f64 {
    if t == 0 {
        f64::INFINITY
    } else {
        (-(t as f64).ln() / lambda).exp()
    }
}

pub fn gen_outcomes(covariates: &Covariates, treatment: &[f64], cfg: &DgpConfig) -> Result<Outcomes> {
    let (n, steps) = (covariates.n, covariates.steps);
    if treatment.len() != n * steps {
        return Err(Error::Shape("treatment does not align with covariates".into()));
    }
    let mut ev_rng = rng::stream(cfg.seed, streams::EVENTS);
    let mut c_rng = rng::stream(cfg.seed, streams::CENSORING);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let no_event = cfg.max_followup + 1;
    let mut out = Outcomes {
        event_time: Vec::with_capacity(n),
        censor_time: Vec::with_capacity(n),
        event_flag: Vec::with_capacity(n),
    };
    let mut surv = vec![0.0; steps];
    for i in 0..n {
        let u: f64 = ev_rng.random();
        let mut s = 1.0;
        for (t, slot) in surv.iter_mut().enumerate() {
            let mu = conditional_hazard_mean(treatment[i * steps + t], covariates.sum_at(i, t));
            let h = (mu + noise.sample(&mut ev_rng)).clamp(0.0, 1.0);
            s *= 1.0 - h;
            *slot = s;
        }
        let event = first_crossing(&surv, u).unwrap_or(no_event);

        let uc: f64 = c_rng.random();
        let censor = (1..=cfg.max_followup)
            .find(|&t| censor_survival(t, cfg.censor_lambda) < uc)
            .unwrap_or(cfg.max_followup);

        out.event_time.push(event);
        out.censor_time.push(censor);
        out.event_flag.push(event <= censor);
    }
    Ok(out)
}

pub fn simulate(cfg: &DgpConfig) -> Result<PatientPanel> {
    cfg.validate()?;
    let covariates = gen_covariates(cfg);
    let treatment = gen_treatment(&covariates, cfg.overlap_eta, cfg.seed);
    let outcomes = gen_outcomes(&covariates, &treatment, cfg)?;
    Ok(PatientPanel {
        max_followup: cfg.max_followup,
        covariates,
        treatment,
        event_time: outcomes.event_time,
        censor_time: outcomes.censor_time,
        event_flag: outcomes.event_flag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    /// Population curve under `X_j ~ Exp(1)` using the integrated hazard mean.
    AnalyticExponentialX,
    /// Conditional curve, clamped hazard expectation by Monte Carlo.
    MonteCarloNormalX,
    /// Conditional curve, clamped hazard expectation in closed form.
    ExactClamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthOracle {
    pub mode: OracleMode,
    pub mc_draws: usize,
    pub seed: u64,
    /// Covariate dimension, used by the analytic mode only.
    pub dim_d: usize,
}

impl Default for TruthOracle {
    fn default() -> Self {
        Self { mode: OracleMode::ExactClamped, mc_draws: 100_000, seed: 0, dim_d: 8 }
    }
}

impl TruthOracle {
    pub fn validate(&self) -> Result<()> {
        if self.mode == OracleMode::MonteCarloNormalX && self.mc_draws < 1000 {
            return Err(Error::InvalidConfig("monte-carlo oracle needs mc_draws >= 1000".into()));
        }
        Ok(())
    }

    /// Survival under a dose held at `a` for steps `0..x_sums.len()`,
    /// `psi(t) = prod_{j <= t} (1 - E[clamp(h(j, a))])`.
    pub fn curve(&self, a: f64, x_sums: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let mut rng = rng::stream(self.seed, streams::ORACLE);
        let mut s = 1.0;
        let mut out = Vec::with_capacity(x_sums.len());
        for &sum in x_sums {
            let h = match self.mode {
                OracleMode::AnalyticExponentialX => marginal_hazard_mean(a, self.dim_d)?.clamp(0.0, 1.0),
                OracleMode::MonteCarloNormalX => {
                    clamped_normal_mean_mc(conditional_hazard_mean(a, sum), self.mc_draws, &mut rng)
                }
                OracleMode::ExactClamped => clamped_normal_mean(conditional_hazard_mean(a, sum)),
            };
            s *= 1.0 - h;
            out.push(s);
        }
        Ok(out)
    }
}

/// True CADR at step `t` for a dose held at `a` along covariate sums `x_sums`.
pub fn true_cadr(t: usize, a: f64, x_sums: &[f64], oracle: &TruthOracle) -> Result<f64> {
    if t >= x_sums.len() {
        return Err(Error::InvalidInput(format!("t = {t} is past the covariate trajectory")));
    }
    Ok(oracle.curve(a, &x_sums[..=t])?[t])
}

/// Static covariates `X_j ~ Exp(1)`, laid out `[patient][d]`.
pub fn gen_exponential_covariates(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, streams::COVARIATES);
    let exp = Exp::new(1.0).expect("unit rate");
    (0..n * dim).map(|_| exp.sample(&mut rng)).collect()
}

/// Continuous outcomes `Y(a) | X ~ N(a + s exp(-a s), 1)` for static covariates
/// laid out `[patient][d]`.
pub fn gen_continuous_outcome(covariates: &[f64], dim: usize, treatment: &[f64], seed: u64) -> Result<Vec<f64>> {
    if dim == 0 || covariates.len() != treatment.len() * dim {
        return Err(Error::Shape("covariates do not align with treatment".into()));
    }
    let mut rng = rng::stream(seed, streams::CONTINUOUS_OUTCOME);
    Ok(treatment
        .iter()
        .zip(covariates.chunks(dim))
        .map(|(&a, x)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            conditional_hazard_mean(a, x.iter().sum()) + z
        })
        .collect())
}
