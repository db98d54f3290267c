//! Benchmark experiments and evaluation metrics.
//!
//! A replication simulates a training and a test cohort, fits the GPS, the
//! deepsdrf outcome ensemble and the SNN baseline on the training cohort, and
//! scores CADR curves of test patients against the truth oracle over dose
//! bands. Replications run in parallel; their metrics are summarised by the
//! mean and the 2.5/97.5 percentiles across replications.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gps::{self, covariate_window, BasisKind, BasisSpec, GpsEnsemble};
use crate::nn::{Body, LossKind, NetConfig, Network, Optimizer, OutputHead, Sample, StepMask, Target};
use crate::recommend::{self, ActionGrid, Episode, Method, QTable, RlConfig};
use crate::rng::{self, streams};
use crate::sim::{self, DgpConfig, PatientPanel, TruthOracle};
use crate::stats;
use crate::survival::{self, CadrQuery, OutcomeEnsemble, OutcomeKind, Standardizer};

/// Truth values below this magnitude are left out of the bias.
pub const BIAS_EXCLUDE_BELOW: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasValue {
    pub value: f64,
    pub excluded: usize,
}

/// Mean absolute relative error `mean |(psi_hat - psi) / psi|`.
pub fn metric_bias(psi_hat: &[f64], psi_true: &[f64]) -> Result<BiasValue> {
    if psi_hat.len() != psi_true.len() {
        return Err(Error::Shape("estimate and truth lengths differ".into()));
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    for (h, t) in psi_hat.iter().zip(psi_true) {
        if t.abs() < BIAS_EXCLUDE_BELOW {
            continue;
        }
        acc += ((h - t) / t).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidInput("every truth value is below the bias exclusion threshold".into()));
    }
    Ok(BiasValue { value: acc / used as f64, excluded: psi_true.len() - used })
}

/// Share of units with `|psi_hat - psi|` within the half-width of the band.
pub fn metric_coverage(psi_hat: &[f64], ci_lo: &[f64], ci_hi: &[f64], psi_true: &[f64]) -> Result<f64> {
    let n = psi_hat.len();
    if ci_lo.len() != n || ci_hi.len() != n || psi_true.len() != n {
        return Err(Error::Shape("coverage inputs must align".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("no units".into()));
    }
    let hits = (0..n).filter(|&k| (psi_hat[k] - psi_true[k]).abs() <= (ci_hi[k] - ci_lo[k]) / 2.0).count();
    Ok(hits as f64 / n as f64)
}

/// `mean (psi_hat - psi)^2`; reported under the name "rmse" without a root.
pub fn metric_rmse(psi_hat: &[f64], psi_true: &[f64]) -> Result<f64> {
    if psi_hat.len() != psi_true.len() || psi_hat.is_empty() {
        return Err(Error::Shape("rmse needs aligned, non-empty inputs".into()));
    }
    Ok(psi_hat.iter().zip(psi_true).map(|(h, t)| (h - t) * (h - t)).sum::<f64>() / psi_hat.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileBand {
    pub lo: f64,
    pub hi: f64,
}

impl PercentileBand {
    fn validate(&self, name: &str) -> Result<()> {
        if !(0.0..=100.0).contains(&self.lo) || !(0.0..=100.0).contains(&self.hi) || self.lo >= self.hi {
            return Err(Error::InvalidConfig(format!("{name}: need 0 <= lo < hi <= 100, got [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    /// `n` evenly spaced doses between the band's percentiles of `doses`.
    pub fn doses(&self, doses: &[f64], n: usize) -> Vec<f64> {
        let lo = stats::percentile(doses, self.lo);
        let hi = stats::percentile(doses, self.hi);
        if n <= 1 {
            return vec![(lo + hi) / 2.0];
        }
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }
}

/// Network hyperparameters shared by every member of one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSettings {
    pub dense_layers: usize,
    /// `None` means `max(4, D)`.
    pub dense_units: Option<usize>,
    pub recurrent_units: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub clip_norm: Option<f64>,
}

impl Default for NetSettings {
    fn default() -> Self {
        Self {
            dense_layers: 2,
            dense_units: None,
            recurrent_units: 8,
            batch_size: 128,
            learning_rate: 0.005,
            epochs: 50,
            optimizer: Optimizer::adam(),
            clip_norm: None,
        }
    }
}

impl NetSettings {
    pub fn build(&self, input_dim: usize, dim_d: usize, history_u: usize, head: OutputHead, seed: u64) -> NetConfig {
        NetConfig {
            input_dim,
            history_u,
            body: Body::Gru,
            dense_layers: self.dense_layers,
            dense_units: self.dense_units.unwrap_or(dim_d.max(4)),
            recurrent_units: self.recurrent_units,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            output_head: head,
            optimizer: self.optimizer,
            clip_norm: self.clip_norm,
        }
    }

    /// Single affine layer with the same optimiser settings.
    pub fn build_linear(&self, input_dim: usize, head: OutputHead, seed: u64) -> NetConfig {
        NetConfig { body: Body::Linear, dense_layers: 0, ..self.build(input_dim, 1, 1, head, seed) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpsSettings {
    pub basis: BasisKind,
    pub num_basis_j: usize,
    /// Share of samples held out to choose the number of basis terms.
    pub holdout: f64,
    pub net: NetSettings,
}

impl Default for GpsSettings {
    fn default() -> Self {
        Self { basis: BasisKind::Cosine, num_basis_j: 45, holdout: gps::DEFAULT_HOLDOUT, net: NetSettings::default() }
    }
}

/// Values swept one at a time around the base scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioGrid {
    pub variance_v: Vec<f64>,
    pub dim_d: Vec<usize>,
    pub overlap_eta: Vec<f64>,
    pub n_patients: Vec<usize>,
    pub history_h: Vec<usize>,
}

impl Default for ScenarioGrid {
    fn default() -> Self {
        Self {
            variance_v: vec![0.5, 1.0, 2.0],
            dim_d: vec![4, 8, 20, 40],
            overlap_eta: vec![0.1, 0.5, 1.0],
            n_patients: vec![1000, 3000, 5000, 10000],
            history_h: vec![1, 3, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommendSettings {
    pub lo_percentile: f64,
    pub hi_percentile: f64,
    pub n_levels: usize,
    pub n_draws: usize,
    pub state_bins: usize,
    pub rl: RlConfig,
    /// Survival times reported for recommended policies; clipped to the
    /// follow-up window.
    pub report_times: Vec<usize>,
}

impl Default for RecommendSettings {
    fn default() -> Self {
        Self {
            lo_percentile: 10.0,
            hi_percentile: 90.0,
            n_levels: 20,
            n_draws: 50,
            state_bins: 10,
            rl: RlConfig::default(),
            report_times: vec![1, 6, 12],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuousSettings {
    pub n_patients: usize,
    pub dim_d: usize,
    pub replications: usize,
    pub eval_doses: usize,
    pub eval_patients: usize,
    pub band: PercentileBand,
    pub num_basis_j: usize,
    pub holdout: f64,
    pub net: NetSettings,
    /// Coefficient on the true GPS in the correctly specified outcome.
    pub gps_coef: f64,
    pub seed: u64,
}

impl Default for ContinuousSettings {
    fn default() -> Self {
        Self {
            n_patients: 10_000,
            dim_d: 6,
            replications: 3,
            eval_doses: 8,
            eval_patients: 2000,
            band: PercentileBand { lo: 15.0, hi: 85.0 },
            num_basis_j: 45,
            holdout: gps::DEFAULT_HOLDOUT,
            net: NetSettings { epochs: 30, ..NetSettings::default() },
            gps_coef: 2.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub replications: usize,
    pub ensemble_m: usize,
    pub eval_percentile_band: PercentileBand,
    pub lower_tail_band: PercentileBand,
    pub upper_tail_band: PercentileBand,
    /// Query doses per band.
    pub eval_doses: usize,
    /// Test patients scored per replication (leading patients of the cohort).
    pub eval_patients: usize,
    /// A scenario fails when more than this share of replications fail.
    pub max_failure_rate: f64,
    pub dgp: DgpConfig,
    pub grid: ScenarioGrid,
    pub gps: GpsSettings,
    pub outcome: NetSettings,
    pub truth: TruthOracle,
    pub recommend: RecommendSettings,
    pub continuous: ContinuousSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            replications: 10,
            ensemble_m: 5,
            eval_percentile_band: PercentileBand { lo: 15.0, hi: 85.0 },
            lower_tail_band: PercentileBand { lo: 1.0, hi: 14.0 },
            upper_tail_band: PercentileBand { lo: 86.0, hi: 99.0 },
            eval_doses: 8,
            eval_patients: 300,
            max_failure_rate: 0.2,
            dgp: DgpConfig::default(),
            grid: ScenarioGrid::default(),
            gps: GpsSettings::default(),
            outcome: NetSettings::default(),
            truth: TruthOracle::default(),
            recommend: RecommendSettings::default(),
            continuous: ContinuousSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 || self.ensemble_m == 0 {
            return Err(Error::InvalidConfig("replications and ensemble_m must be >= 1".into()));
        }
        if self.eval_doses == 0 || self.eval_patients == 0 {
            return Err(Error::InvalidConfig("eval_doses and eval_patients must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::InvalidConfig("max_failure_rate must lie in [0, 1]".into()));
        }
        self.eval_percentile_band.validate("eval_percentile_band")?;
        self.lower_tail_band.validate("lower_tail_band")?;
        self.upper_tail_band.validate("upper_tail_band")?;
        self.dgp.validate()?;
        self.truth.validate()?;
        if self.gps.num_basis_j == 0 {
            return Err(Error::InvalidConfig("gps.num_basis_j must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.gps.holdout) || !(0.0..1.0).contains(&self.continuous.holdout) {
            return Err(Error::InvalidConfig("gps.holdout and continuous.holdout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The base scenario followed by one-at-a-time variations from the grid.
    pub fn scenarios(&self) -> Vec<DgpConfig> {
        let base = self.dgp.clone();
        let mut out = vec![base.clone()];
        let mut push = |c: DgpConfig| {
            if !out.contains(&c) {
                out.push(c);
            }
        };
        for &v in &self.grid.variance_v {
            push(DgpConfig { variance_v: v, ..base.clone() });
        }
        for &d in &self.grid.dim_d {
            push(DgpConfig { dim_d: d, ..base.clone() });
        }
        for &e in &self.grid.overlap_eta {
            push(DgpConfig { overlap_eta: e, ..base.clone() });
        }
        for &n in &self.grid.n_patients {
            push(DgpConfig { n_patients: n, ..base.clone() });
        }
        for &h in &self.grid.history_h {
            push(DgpConfig { history_h: h, ..base.clone() });
        }
        out
    }

    /// Short SHA-256 digest of the configuration together with a scenario.
    pub fn config_hash(&self, scenario: &DgpConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serialises"));
        h.update(serde_json::to_vec(scenario).expect("scenario serialises"));
        hex::encode(&h.finalize()[..8])
    }
}

pub fn scenario_label(s: &DgpConfig) -> String {
    format!("V={},D={},eta={},N={},H={}", s.variance_v, s.dim_d, s.overlap_eta, s.n_patients, s.history_h)
}

/// Everything fitted in one replication.
pub struct FittedReplication {
    pub replication: usize,
    pub seed: u64,
    pub train: PatientPanel,
    pub test: PatientPanel,
    pub gps: GpsEnsemble<f64>,
    pub deepsdrf: OutcomeEnsemble,
    pub snn: OutcomeEnsemble,
}

impl FittedReplication {
    pub fn model(&self, kind: OutcomeKind) -> &OutcomeEnsemble {
        match kind {
            OutcomeKind::Deepsdrf => &self.deepsdrf,
            OutcomeKind::Snn => &self.snn,
        }
    }

    pub fn query(&self, kind: OutcomeKind, patient: usize) -> Result<CadrQuery<'_>> {
        CadrQuery::new(self.model(kind), Some(&self.gps), &self.test, patient)
    }

    pub fn eval_patients(&self, cfg: &ExperimentConfig) -> usize {
        cfg.eval_patients.min(self.test.n_patients())
    }
}

pub fn replication_seed(cfg: &ExperimentConfig, replication: usize) -> u64 {
    rng::derive(cfg.seed, replication as u64)
}

/// Simulates the cohorts of one replication and fits every model on the
/// training cohort.
pub fn fit_replication(cfg: &ExperimentConfig, scenario: &DgpConfig, replication: usize) -> Result<FittedReplication> {
    let seed = replication_seed(cfg, replication);
    let train = sim::simulate(&DgpConfig { seed: rng::derive(seed, 0), ..scenario.clone() })?;
    let test = sim::simulate(&DgpConfig { seed: rng::derive(seed, 1), ..scenario.clone() })?;
    let h = scenario.history_h;
    let d = scenario.dim_d;
    let gps_cfg = cfg.gps.net.build(d, d, h, OutputHead::Vector(cfg.gps.num_basis_j), rng::derive(seed, 2));
    let (gps, _) = gps::fit_gps(&train, cfg.gps.basis, cfg.gps.num_basis_j, &gps_cfg, cfg.ensemble_m, cfg.gps.holdout)?;
    let out_cfg = cfg.outcome.build(2, d, h, OutputHead::PerStepSigmoid, rng::derive(seed, 3));
    let (deepsdrf, _) = survival::fit_outcome(&train, Some(&gps), &out_cfg, cfg.ensemble_m, OutcomeKind::Deepsdrf)?;
    let (snn, _) = survival::fit_outcome(&train, None, &out_cfg, cfg.ensemble_m, OutcomeKind::Snn)?;
    log::info!("replication {replication} fitted ({})", scenario_label(scenario));
    Ok(FittedReplication { replication, seed, train, test, gps, deepsdrf, snn })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Band {
    Central,
    LowerTail,
    UpperTail,
    /// Both tails pooled.
    Tails,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::Central, Band::LowerTail, Band::UpperTail, Band::Tails];

    pub fn name(self) -> &'static str {
        match self {
            Band::Central => "central",
            Band::LowerTail => "lower-tail",
            Band::UpperTail => "upper-tail",
            Band::Tails => "tails",
        }
    }
}

pub fn model_name(kind: OutcomeKind) -> &'static str {
    match kind {
        OutcomeKind::Deepsdrf => "deepsdrf",
        OutcomeKind::Snn => "snn",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub model: OutcomeKind,
    pub band: Band,
    pub units: usize,
    pub bias: f64,
    pub bias_excluded: usize,
    pub coverage: f64,
    pub rmse: f64,
    pub rmse_sqrt: f64,
}

#[derive(Default)]
struct Units {
    hat: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    truth: Vec<f64>,
}

impl Units {
    fn extend(&mut self, other: &Units) {
        self.hat.extend_from_slice(&other.hat);
        self.lo.extend_from_slice(&other.lo);
        self.hi.extend_from_slice(&other.hi);
        self.truth.extend_from_slice(&other.truth);
    }

    fn metrics(&self, model: OutcomeKind, band: Band) -> Result<BandMetrics> {
        let bias = metric_bias(&self.hat, &self.truth)?;
        let rmse = metric_rmse(&self.hat, &self.truth)?;
        Ok(BandMetrics {
            model,
            band,
            units: self.hat.len(),
            bias: bias.value,
            bias_excluded: bias.excluded,
            coverage: metric_coverage(&self.hat, &self.lo, &self.hi, &self.truth)?,
            rmse,
            rmse_sqrt: rmse.sqrt(),
        })
    }
}

/// Query doses of each primary band, from the training cohort's observed doses.
pub fn band_doses(cfg: &ExperimentConfig, train: &PatientPanel) -> [(Band, Vec<f64>); 3] {
    let doses = train.observed_doses();
    [
        (Band::Central, cfg.eval_percentile_band.doses(&doses, cfg.eval_doses)),
        (Band::LowerTail, cfg.lower_tail_band.doses(&doses, cfg.eval_doses)),
        (Band::UpperTail, cfg.upper_tail_band.doses(&doses, cfg.eval_doses)),
    ]
}

/// Scores both models on units `(test patient, band dose, t = 1..Theta)`.
pub fn evaluate_bands(cfg: &ExperimentConfig, fit: &FittedReplication) -> Result<Vec<BandMetrics>> {
    let bands = band_doses(cfg, &fit.train);
    let n_eval = fit.eval_patients(cfg);
    let mut out = Vec::new();
    for kind in [OutcomeKind::Deepsdrf, OutcomeKind::Snn] {
        let per_patient: Vec<[Units; 3]> = (0..n_eval)
            .into_par_iter()
            .map(|i| {
                let q = fit.query(kind, i)?;
                let sums = fit.test.covariates.sums(i);
                let mut units: [Units; 3] = Default::default();
                for (slot, (_, doses)) in units.iter_mut().zip(&bands) {
                    for &a in doses {
                        let est = q.estimate(a)?;
                        let truth = cfg.truth.curve(a, &sums)?;
                        slot.hat.extend_from_slice(&est.survival_mean);
                        slot.lo.extend_from_slice(&est.ci_lo);
                        slot.hi.extend_from_slice(&est.ci_hi);
                        slot.truth.extend_from_slice(&truth[1..]);
                    }
                }
                Ok(units)
            })
            .collect::<Result<_>>()?;
        let mut pooled: [Units; 3] = Default::default();
        for p in &per_patient {
            for (acc, u) in pooled.iter_mut().zip(p) {
                acc.extend(u);
            }
        }
        let mut tails = Units::default();
        tails.extend(&pooled[1]);
        tails.extend(&pooled[2]);
        for ((band, _), units) in bands.iter().zip(&pooled) {
            out.push(units.metrics(kind, *band)?);
        }
        out.push(tails.metrics(kind, Band::Tails)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, ci_lo, ci_hi) = stats::mean_ci(xs);
        Self { mean, ci_lo, ci_hi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: OutcomeKind,
    pub band: Band,
    pub bias: Summary,
    pub coverage: Summary,
    pub rmse: Summary,
    pub rmse_sqrt: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub metrics: Vec<BandMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub label: String,
    pub config_hash: String,
    pub scenario: DgpConfig,
    pub replications_ok: usize,
    pub replications_failed: usize,
    pub failures: Vec<String>,
    pub failed: bool,
    pub rows: Vec<MetricRow>,
    pub replications: Vec<ReplicationRecord>,
    pub recommendation: Option<RecommendationReport>,
    pub runtime_seconds: f64,
}

impl ScenarioReport {
    pub fn row(&self, model: OutcomeKind, band: Band) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model && r.band == band)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub scenarios: Vec<ScenarioReport>,
    pub runtime_seconds: f64,
}

impl MetricsReport {
    pub fn failed(&self) -> bool {
        self.scenarios.iter().any(|s| s.failed)
    }
}

fn summarise_rows(records: &[ReplicationRecord]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for model in [OutcomeKind::Deepsdrf, OutcomeKind::Snn] {
        for band in Band::ALL {
            let ms: Vec<&BandMetrics> =
                records.iter().flat_map(|r| &r.metrics).filter(|m| m.model == model && m.band == band).collect();
            if ms.is_empty() {
                continue;
            }
            let col = |f: fn(&BandMetrics) -> f64| Summary::of(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
            rows.push(MetricRow {
                model,
                band,
                bias: col(|m| m.bias),
                coverage: col(|m| m.coverage),
                rmse: col(|m| m.rmse),
                rmse_sqrt: col(|m| m.rmse_sqrt),
            });
        }
    }
    rows
}

/// Fits and scores every replication of a scenario, optionally with the
/// recommendation evaluation on the same fitted models.
pub fn run_scenario_with(cfg: &ExperimentConfig, scenario: &DgpConfig, recommendations: bool) -> Result<ScenarioReport> {
    cfg.validate()?;
    scenario.validate()?;
    let start = Instant::now();
    let results: Vec<Result<(ReplicationRecord, Option<RecommendationReplication>)>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let fit = fit_replication(cfg, scenario, r)?;
            let metrics = evaluate_bands(cfg, &fit)?;
            let rec = if recommendations { Some(evaluate_recommendations(cfg, &fit)?) } else { None };
            Ok((ReplicationRecord { replication: r, seed: fit.seed, metrics }, rec))
        })
        .collect();
    let mut records = Vec::new();
    let mut recs = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok((rec, rr)) => {
                records.push(rec);
                recs.extend(rr);
            }
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push(format!("replication {r}: {e}"));
            }
        }
    }
    let failed = failures.len() as f64 > cfg.max_failure_rate * cfg.replications as f64 || records.is_empty();
    Ok(ScenarioReport {
        label: scenario_label(scenario),
        config_hash: cfg.config_hash(scenario),
        scenario: scenario.clone(),
        replications_ok: records.len(),
        replications_failed: failures.len(),
        failures,
        failed,
        rows: summarise_rows(&records),
        replications: records,
        recommendation: if recommendations && !recs.is_empty() { Some(summarise_recommendations(cfg, &recs)) } else { None },
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_scenario(cfg: &ExperimentConfig, scenario: &DgpConfig) -> Result<ScenarioReport> {
    run_scenario_with(cfg, scenario, false)
}

pub fn run_recommendation_eval(cfg: &ExperimentConfig, scenario: &DgpConfig) -> Result<ScenarioReport> {
    run_scenario_with(cfg, scenario, true)
}

/// Every scenario of the grid; the base scenario also runs the
/// recommendation evaluation.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let start = Instant::now();
    let scenarios = cfg.scenarios();
    let mut reports = Vec::with_capacity(scenarios.len());
    for (k, s) in scenarios.iter().enumerate() {
        log::info!("scenario {}/{}: {}", k + 1, scenarios.len(), scenario_label(s));
        reports.push(run_scenario_with(cfg, s, k == 0)?);
    }
    Ok(MetricsReport {
        config_hash: cfg.config_hash(&cfg.dgp),
        scenarios: reports,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Long-format metrics CSV: `scenario,config_hash,model,band,metric,mean,ci_lo,ci_hi`.
pub fn write_metrics_csv<W: std::io::Write>(report: &MetricsReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "config_hash", "model", "band", "metric", "mean", "ci_lo", "ci_hi"])?;
    for s in &report.scenarios {
        for r in &s.rows {
            for (name, v) in [("bias", r.bias), ("coverage", r.coverage), ("rmse", r.rmse), ("rmse_sqrt", r.rmse_sqrt)] {
                out.write_record([
                    s.label.clone(),
                    s.config_hash.clone(),
                    model_name(r.model).to_string(),
                    r.band.name().to_string(),
                    name.to_string(),
                    v.mean.to_string(),
                    v.ci_lo.to_string(),
                    v.ci_hi.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// A dosing policy evaluated in a replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Original,
    DeepsdrfRs,
    DeepsdrfRl,
    SnnRs,
    SnnRl,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Original, Policy::DeepsdrfRs, Policy::DeepsdrfRl, Policy::SnnRs, Policy::SnnRl];

    pub fn of(kind: OutcomeKind, method: Method) -> Self {
        match (kind, method) {
            (OutcomeKind::Deepsdrf, Method::Rs) => Policy::DeepsdrfRs,
            (OutcomeKind::Deepsdrf, Method::Rl) => Policy::DeepsdrfRl,
            (OutcomeKind::Snn, Method::Rs) => Policy::SnnRs,
            (OutcomeKind::Snn, Method::Rl) => Policy::SnnRl,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Original => "original",
            Policy::DeepsdrfRs => "deepsdrf-rs",
            Policy::DeepsdrfRl => "deepsdrf-rl",
            Policy::SnnRs => "snn-rs",
            Policy::SnnRl => "snn-rl",
        }
    }
}

/// One policy's doses and oracle survival in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub policy: Policy,
    pub doses: Vec<f64>,
    /// Mean oracle survival over patients at steps `0..=Theta`.
    pub true_curve: Vec<f64>,
    /// Mean over patients of the oracle `psibar`.
    pub true_psi_bar: f64,
    pub mean_r: f64,
    pub policy_value: Option<f64>,
    pub converged: Option<bool>,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationReplication {
    pub replication: usize,
    pub policies: Vec<PolicyOutcome>,
    pub recommendations: Vec<recommend::Recommendation>,
}

/// Per-patient `psibar` on the action grid plus at the observed dose.
struct PsiTable {
    grid: Vec<f64>,
    obs: f64,
}

fn psi_table(q: &CadrQuery<'_>, grid: &ActionGrid, a_obs: f64) -> Result<PsiTable> {
    Ok(PsiTable {
        grid: grid.levels.iter().map(|&a| Ok(q.estimate(a)?.mean_over_time)).collect::<Result<_>>()?,
        obs: q.estimate(a_obs)?.mean_over_time,
    })
}

fn psi_lookup<'a>(t: &'a PsiTable, grid: &'a ActionGrid, a_obs: f64) -> impl Fn(f64) -> Result<f64> + 'a {
    move |a| {
        if a == a_obs {
            return Ok(t.obs);
        }
        grid.levels
            .iter()
            .position(|&l| l == a)
            .map(|k| t.grid[k])
            .ok_or_else(|| Error::InvalidInput(format!("dose {a} is not on the action grid")))
    }
}

/// Commencement state summary: mean standardised covariate over the history
/// window ending at step 0.
pub fn state_summary(panel: &PatientPanel, scaler: &Standardizer, patient: usize, history_h: usize) -> f64 {
    let w = covariate_window(panel, patient, 0, history_h);
    let d = panel.dim();
    let z: Vec<f64> = w.chunks_exact(d).flat_map(|x| scaler.apply(x)).collect();
    stats::mean(&z)
}

fn policy_outcome(
    cfg: &ExperimentConfig,
    fit: &FittedReplication,
    policy: Policy,
    doses: Vec<f64>,
    r: &[f64],
    policy_value: Option<f64>,
    converged: Option<bool>,
    flagged: usize,
) -> Result<PolicyOutcome> {
    let steps = fit.test.steps();
    let curves: Vec<Vec<f64>> = doses
        .par_iter()
        .enumerate()
        .map(|(i, &a)| cfg.truth.curve(a, &fit.test.covariates.sums(i)))
        .collect::<Result<_>>()?;
    let true_curve: Vec<f64> = (0..steps).map(|t| stats::mean(&curves.iter().map(|c| c[t]).collect::<Vec<_>>())).collect();
    let true_psi_bar = stats::mean(&curves.iter().map(|c| stats::mean(&c[1..])).collect::<Vec<_>>());
    Ok(PolicyOutcome {
        policy,
        doses,
        true_curve,
        true_psi_bar,
        mean_r: if r.is_empty() { 0.0 } else { stats::mean(r) },
        policy_value,
        converged,
        flagged,
    })
}

/// RS and RL recommendations at commencement for one outcome model.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortRecommendations {
    pub rs: Vec<recommend::Recommendation>,
    pub rl: Vec<recommend::Recommendation>,
    /// One-step Bellman value per patient under the RS rewards and the RL Q-table.
    pub rs_value: Vec<f64>,
    pub rl_value: Vec<f64>,
    pub rl_converged: bool,
}

/// Recommends doses for the first `n` patients of `panel`. States for RL are
/// quantile bins of the commencement summary standardised with `scaler`.
#[allow(clippy::too_many_arguments)]
pub fn recommend_cohort(
    settings: &RecommendSettings,
    grid: &ActionGrid,
    scaler: &Standardizer,
    gps: &GpsEnsemble<f64>,
    out: &OutcomeEnsemble,
    panel: &PatientPanel,
    n: usize,
    seed: u64,
) -> Result<CohortRecommendations> {
    let n = n.min(panel.n_patients());
    if n == 0 {
        return Err(Error::InvalidInput("no patients to recommend for".into()));
    }
    let history = gps.history_u();
    let a_obs: Vec<f64> = (0..n).map(|i| panel.dose(i, 0)).collect();
    let summaries: Vec<f64> = (0..n).map(|i| state_summary(panel, scaler, i, history)).collect();
    let gps_on_grid: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ds = gps.member_densities(&covariate_window(panel, i, 0, history))?;
            Ok(grid.levels.iter().map(|&a| ds.iter().map(|d| d.eval(&gps.basis, a)).sum::<f64>() / ds.len() as f64).collect())
        })
        .collect::<Result<_>>()?;
    let tables: Vec<PsiTable> = (0..n)
        .into_par_iter()
        .map(|i| psi_table(&CadrQuery::new(out, Some(gps), panel, i)?, grid, a_obs[i]))
        .collect::<Result<_>>()?;

    let rs: Vec<recommend::Recommendation> = (0..n)
        .into_par_iter()
        .map(|i| recommend::recommend_rs(i, psi_lookup(&tables[i], grid, a_obs[i]), a_obs[i], grid, settings.n_draws, seed))
        .collect::<Result<_>>()?;
    let rewards: Vec<Vec<recommend::RValue>> =
        tables.iter().map(|t| t.grid.iter().map(|&p| recommend::log_ratio(t.obs, p)).collect()).collect();
    let rs_value: Vec<f64> = (0..n)
        .map(|i| {
            let qv: Vec<f64> = rewards[i].iter().map(|v| tables[i].obs + v.r).collect();
            recommend::policy_value(&qv, &gps_on_grid[i])
        })
        .collect::<Result<_>>()?;

    let q0 = QTable::with_bins(&summaries, settings.state_bins, grid.len(), settings.rl.alpha, settings.rl.gamma)?;
    let states: Vec<usize> = summaries.iter().map(|&s| q0.state_of(s)).collect();
    let episodes: Vec<Episode> = (0..n)
        .map(|i| Episode { state: states[i], rewards: rewards[i].iter().map(|v| v.r).collect(), next_state: None })
        .collect();
    let fitted = recommend::fit_rl_policy(&episodes, q0, &RlConfig { seed: rng::derive(seed, 5), ..settings.rl.clone() })?;
    let mut rl = Vec::with_capacity(n);
    let mut rl_value = Vec::with_capacity(n);
    for i in 0..n {
        let k = fitted.policy[states[i]];
        let mut flags = Vec::new();
        if rewards[i].iter().any(|v| v.floored) {
            flags.push(recommend::FLAG_PSI_FLOOR.to_string());
        }
        if !fitted.converged {
            flags.push(recommend::FLAG_NOT_CONVERGED.to_string());
        }
        rl.push(recommend::Recommendation {
            patient_id: i,
            method: Method::Rl,
            original_dose: a_obs[i],
            recommended_dose: grid.levels[k],
            r_value: rewards[i][k].r,
            flags,
        });
        let qv: Vec<f64> = fitted.q.row(states[i]).iter().map(|&qsa| tables[i].obs + qsa).collect();
        rl_value.push(recommend::policy_value(&qv, &gps_on_grid[i])?);
    }
    Ok(CohortRecommendations { rs, rl, rs_value, rl_value, rl_converged: fitted.converged })
}

/// Covariate standardiser fitted on every row of a panel.
pub fn covariate_scaler(panel: &PatientPanel) -> Result<Standardizer> {
    Ok(survival::standardize(panel)?.1)
}

/// RS and RL recommendations at commencement for both models, scored by the
/// truth oracle with each recommended dose held over the whole follow-up.
pub fn evaluate_recommendations(cfg: &ExperimentConfig, fit: &FittedReplication) -> Result<RecommendationReplication> {
    let rs = &cfg.recommend;
    let grid = ActionGrid::from_doses(&fit.train.observed_doses(), rs.lo_percentile, rs.hi_percentile, rs.n_levels)?;
    let n = fit.eval_patients(cfg);
    let a_obs: Vec<f64> = (0..n).map(|i| fit.test.dose(i, 0)).collect();
    let scaler = covariate_scaler(&fit.train)?;

    let mut policies = vec![policy_outcome(cfg, fit, Policy::Original, a_obs, &[], None, None, 0)?];
    let mut recommendations = Vec::new();
    for kind in [OutcomeKind::Deepsdrf, OutcomeKind::Snn] {
        let recs = recommend_cohort(rs, &grid, &scaler, &fit.gps, fit.model(kind), &fit.test, n, fit.seed)?;
        if !recs.rl_converged {
            log::warn!("replication {}: {} RL policy did not converge", fit.replication, model_name(kind));
        }
        for (method, list, value) in [(Method::Rs, &recs.rs, &recs.rs_value), (Method::Rl, &recs.rl, &recs.rl_value)] {
            policies.push(policy_outcome(
                cfg,
                fit,
                Policy::of(kind, method),
                list.iter().map(|r| r.recommended_dose).collect(),
                &list.iter().map(|r| r.r_value).collect::<Vec<_>>(),
                Some(stats::mean(value)),
                (method == Method::Rl).then_some(recs.rl_converged),
                list.iter().filter(|r| !r.flags.is_empty()).count(),
            )?);
        }
        if fit.replication == 0 {
            recommendations.extend(recs.rs);
            recommendations.extend(recs.rl);
        }
    }
    Ok(RecommendationReplication { replication: fit.replication, policies, recommendations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: Policy,
    /// Replication mean dose, with CI across replications.
    pub mean_dose: Summary,
    /// 5% and 95% quantiles of doses pooled over replications.
    pub dose_q05: f64,
    pub dose_q95: f64,
    /// Oracle survival at the report times.
    pub survival_at: Vec<(usize, Summary)>,
    pub true_psi_bar: Summary,
    /// `true_psi_bar` minus that of the original doses.
    pub gain: Summary,
    pub policy_value: Option<Summary>,
    pub converged_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationReport {
    pub policies: Vec<PolicySummary>,
    /// Mean oracle survival curves averaged over replications, steps `0..=Theta`.
    pub curves: Vec<(Policy, Vec<f64>)>,
    /// Recommendations of the first replication.
    pub recommendations: Vec<recommend::Recommendation>,
}

impl RecommendationReport {
    pub fn policy(&self, p: Policy) -> Option<&PolicySummary> {
        self.policies.iter().find(|s| s.policy == p)
    }
}

pub fn summarise_recommendations(cfg: &ExperimentConfig, reps: &[RecommendationReplication]) -> RecommendationReport {
    let get = |r: &RecommendationReplication, p: Policy| r.policies.iter().find(|o| o.policy == p).cloned();
    let mut policies = Vec::new();
    let mut curves = Vec::new();
    for p in Policy::ALL {
        let outs: Vec<(PolicyOutcome, PolicyOutcome)> =
            reps.iter().filter_map(|r| Some((get(r, p)?, get(r, Policy::Original)?))).collect();
        if outs.is_empty() {
            continue;
        }
        let steps = outs[0].0.true_curve.len();
        let pooled: Vec<f64> = outs.iter().flat_map(|(o, _)| o.doses.iter().copied()).collect();
        let survival_at = cfg
            .recommend
            .report_times
            .iter()
            .map(|&t| t.min(steps - 1))
            .map(|t| (t, Summary::of(&outs.iter().map(|(o, _)| o.true_curve[t]).collect::<Vec<_>>())))
            .collect();
        let values: Vec<f64> = outs.iter().filter_map(|(o, _)| o.policy_value).collect();
        let conv: Vec<bool> = outs.iter().filter_map(|(o, _)| o.converged).collect();
        policies.push(PolicySummary {
            policy: p,
            mean_dose: Summary::of(&outs.iter().map(|(o, _)| stats::mean(&o.doses)).collect::<Vec<_>>()),
            dose_q05: stats::percentile(&pooled, 5.0),
            dose_q95: stats::percentile(&pooled, 95.0),
            survival_at,
            true_psi_bar: Summary::of(&outs.iter().map(|(o, _)| o.true_psi_bar).collect::<Vec<_>>()),
            gain: Summary::of(&outs.iter().map(|(o, b)| o.true_psi_bar - b.true_psi_bar).collect::<Vec<_>>()),
            policy_value: (!values.is_empty()).then(|| Summary::of(&values)),
            converged_share: (!conv.is_empty()).then(|| conv.iter().filter(|&&c| c).count() as f64 / conv.len() as f64),
        });
        curves.push((p, (0..steps).map(|t| stats::mean(&outs.iter().map(|(o, _)| o.true_curve[t]).collect::<Vec<_>>())).collect()));
    }
    let recommendations = reps.iter().find(|r| r.replication == 0).or(reps.first()).map(|r| r.recommendations.clone()).unwrap_or_default();
    RecommendationReport { policies, curves, recommendations }
}

/// Long-format survival curves `policy,t,survival`.
pub fn write_curves_csv<W: std::io::Write>(report: &RecommendationReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "t", "survival"])?;
    for (p, c) in &report.curves {
        for (t, s) in c.iter().enumerate() {
            out.write_record([p.name().to_string(), t.to_string(), s.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuousWorld {
    /// Gaussian dose linear in `x`; outcome linear in dose and true GPS.
    CorrectLinear,
    /// Exponential covariates and dose; outcome `a + s exp(-a s) + N(0, 1)`.
    Misspecified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuousModel {
    /// Basis-expansion GPS and recurrent outcome regressor.
    Nonparametric,
    /// Basis-expansion GPS and single-linear-layer outcome.
    NonparametricGpsLinearOutcome,
    /// Gaussian GPS with a single-linear-layer mean and single-linear-layer outcome.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousRow {
    pub world: ContinuousWorld,
    pub model: ContinuousModel,
    pub bias: Summary,
    pub rmse: Summary,
    pub per_replication_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousReport {
    pub rows: Vec<ContinuousRow>,
    pub runtime_seconds: f64,
}

impl ContinuousReport {
    pub fn row(&self, world: ContinuousWorld, model: ContinuousModel) -> Option<&ContinuousRow> {
        self.rows.iter().find(|r| r.world == world && r.model == model)
    }
}

/// Static-covariate cohort with a scalar outcome.
pub struct ContinuousCohort {
    pub dim: usize,
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
}

const LINEAR_DOSE_MEAN: f64 = 2.0;
const LINEAR_DOSE_SLOPE: f64 = 0.25;
const LINEAR_DOSE_SD: f64 = 0.5;

fn linear_world_density(a: f64, x: &[f64]) -> f64 {
    let mu = LINEAR_DOSE_MEAN + LINEAR_DOSE_SLOPE * x.iter().sum::<f64>();
    let z = (a - mu) / LINEAR_DOSE_SD;
    (-0.5 * z * z).exp() / (LINEAR_DOSE_SD * (2.0 * std::f64::consts::PI).sqrt())
}

pub fn gen_continuous_cohort(world: ContinuousWorld, n: usize, dim: usize, gps_coef: f64, seed: u64) -> Result<ContinuousCohort> {
    let mut rng = rng::stream(seed, streams::TREATMENT);
    match world {
        ContinuousWorld::CorrectLinear => {
            let mut xr = rng::stream(seed, streams::COVARIATES);
            let x: Vec<f64> = (0..n * dim).map(|_| xr.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let noise = Normal::new(0.0, LINEAR_DOSE_SD).expect("positive sd");
            let a: Vec<f64> = x
                .chunks_exact(dim)
                .map(|xi| LINEAR_DOSE_MEAN + LINEAR_DOSE_SLOPE * xi.iter().sum::<f64>() + noise.sample(&mut rng))
                .collect();
            let mut yr = rng::stream(seed, streams::CONTINUOUS_OUTCOME);
            let y = a
                .iter()
                .zip(x.chunks_exact(dim))
                .map(|(&ai, xi)| ai + gps_coef * linear_world_density(ai, xi) + yr.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            Ok(ContinuousCohort { dim, x, a, y })
        }
        ContinuousWorld::Misspecified => {
            let x = sim::gen_exponential_covariates(n, dim, seed);
            let a: Vec<f64> = x
                .chunks_exact(dim)
                .map(|xi| Exp::new(1.0 / sim::dose_mean(xi, 0.5)).expect("positive rate").sample(&mut rng))
                .collect();
            let y = sim::gen_continuous_outcome(&x, dim, &a, seed)?;
            Ok(ContinuousCohort { dim, x, a, y })
        }
    }
}

/// Population dose response of a world at dose `a`, averaged over `x` where
/// it depends on the sample.
fn continuous_truth(world: ContinuousWorld, a: f64, cohort: &ContinuousCohort, n_eval: usize, gps_coef: f64) -> Result<f64> {
    match world {
        ContinuousWorld::Misspecified => sim::marginal_hazard_mean(a, cohort.dim),
        ContinuousWorld::CorrectLinear => {
            let g: Vec<f64> = cohort.x.chunks_exact(cohort.dim).take(n_eval).map(|x| linear_world_density(a, x)).collect();
            Ok(a + gps_coef * stats::mean(&g))
        }
    }
}

enum GpsModel {
    Basis(GpsEnsemble<f64>),
    Gaussian { net: Network<f64>, sd: f64 },
}

impl GpsModel {
    fn density(&self, a: f64, x: &[f64]) -> Result<f64> {
        match self {
            GpsModel::Basis(e) => e.estimate(a, x),
            GpsModel::Gaussian { net, sd } => {
                let mu = net.forward(x, &StepMask::full(1))?[0];
                let z = (a - mu) / sd;
                Ok((-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()))
            }
        }
    }
}

fn fit_outcome_regressor(cohort: &ContinuousCohort, g: &[f64], cfg: NetConfig) -> Result<(Network<f64>, Standardizer)> {
    let rows: Vec<Vec<f64>> = cohort.a.iter().zip(g).map(|(&a, &gi)| vec![a, gi]).collect();
    let scaler = Standardizer::fit(&rows)?;
    let samples: Vec<Sample<f64>> = rows
        .iter()
        .zip(&cohort.y)
        .map(|(r, &y)| Sample { inputs: scaler.apply(r), mask: StepMask::full(1), target: Target::Vector(vec![y]) })
        .collect();
    let mut net = Network::init(cfg)?;
    net.train(&samples, LossKind::Mse)?;
    Ok((net, scaler))
}

fn continuous_replication(s: &ContinuousSettings, world: ContinuousWorld, rep: usize) -> Result<Vec<(ContinuousModel, f64, f64)>> {
    let seed = rng::derive(s.seed, rep as u64);
    let d = s.dim_d;
    let train = gen_continuous_cohort(world, s.n_patients, d, s.gps_coef, rng::derive(seed, 0))?;
    let eval = gen_continuous_cohort(world, s.eval_patients, d, s.gps_coef, rng::derive(seed, 1))?;
    let windows: Vec<Vec<f64>> = train.x.chunks_exact(d).map(<[f64]>::to_vec).collect();

    let spec = BasisSpec::from_doses(BasisKind::Cosine, s.num_basis_j, &train.a)?;
    let np_cfg = s.net.build(d, d, 1, OutputHead::Vector(s.num_basis_j), rng::derive(seed, 2));
    let (np_gps, _) = gps::fit_gps_samples(&windows, &train.a, &spec, &np_cfg, 1, s.holdout)?;
    let np_gps = GpsModel::Basis(np_gps);

    let lin_samples: Vec<Sample<f64>> = windows
        .iter()
        .zip(&train.a)
        .map(|(w, &a)| Sample { inputs: w.clone(), mask: StepMask::full(1), target: Target::Vector(vec![a]) })
        .collect();
    let mut lin_net = Network::init(s.net.build_linear(d, OutputHead::Vector(1), rng::derive(seed, 3)))?;
    lin_net.train(&lin_samples, LossKind::Mse)?;
    let resid: Vec<f64> = windows
        .iter()
        .zip(&train.a)
        .map(|(w, &a)| Ok(a - lin_net.forward(w, &StepMask::full(1))?[0]))
        .collect::<Result<_>>()?;
    let sd = stats::population_sd(&resid).max(1e-6);
    let lin_gps = GpsModel::Gaussian { net: lin_net, sd };

    let grid = s.band.doses(&train.a, s.eval_doses);
    let truth: Vec<f64> = grid.iter().map(|&a| continuous_truth(world, a, &eval, s.eval_patients, s.gps_coef)).collect::<Result<_>>()?;
    let eval_x: Vec<&[f64]> = eval.x.chunks_exact(d).collect();

    let mut out = Vec::new();
    for model in [ContinuousModel::Nonparametric, ContinuousModel::NonparametricGpsLinearOutcome, ContinuousModel::Linear] {
        let gps_model = if model == ContinuousModel::Linear { &lin_gps } else { &np_gps };
        let g_train: Vec<f64> = windows.par_iter().zip(&train.a).map(|(w, &a)| gps_model.density(a, w)).collect::<Result<_>>()?;
        let cfg = if model == ContinuousModel::Nonparametric {
            s.net.build(2, d, 1, OutputHead::Vector(1), rng::derive(seed, 4))
        } else {
            s.net.build_linear(2, OutputHead::Vector(1), rng::derive(seed, 4))
        };
        let (net, scaler) = fit_outcome_regressor(&train, &g_train, cfg)?;
        let est: Vec<f64> = grid
            .iter()
            .map(|&a| {
                let preds: Vec<f64> = eval_x
                    .par_iter()
                    .map(|x| Ok(net.forward(&scaler.apply(&[a, gps_model.density(a, x)?]), &StepMask::full(1))?[0]))
                    .collect::<Result<_>>()?;
                Ok(stats::mean(&preds))
            })
            .collect::<Result<_>>()?;
        out.push((model, metric_bias(&est, &truth)?.value, metric_rmse(&est, &truth)?));
    }
    Ok(out)
}

/// Compares the basis-expansion GPS and recurrent outcome regressor with
/// single-linear-layer variants on population dose-response bias and MSE.
pub fn run_continuous_benchmark(s: &ContinuousSettings) -> Result<ContinuousReport> {
    if s.replications == 0 || s.n_patients == 0 || s.dim_d == 0 || s.eval_patients == 0 {
        return Err(Error::InvalidConfig("continuous benchmark sizes must be >= 1".into()));
    }
    s.band.validate("continuous.band")?;
    let start = Instant::now();
    let mut rows = Vec::new();
    for world in [ContinuousWorld::CorrectLinear, ContinuousWorld::Misspecified] {
        let reps: Vec<Vec<(ContinuousModel, f64, f64)>> =
            (0..s.replications).into_par_iter().map(|r| continuous_replication(s, world, r)).collect::<Result<_>>()?;
        for model in [ContinuousModel::Nonparametric, ContinuousModel::NonparametricGpsLinearOutcome, ContinuousModel::Linear] {
            let vals: Vec<(f64, f64)> =
                reps.iter().flat_map(|r| r.iter().filter(|(m, _, _)| *m == model).map(|&(_, b, e)| (b, e))).collect();
            let bias: Vec<f64> = vals.iter().map(|v| v.0).collect();
            rows.push(ContinuousRow {
                world,
                model,
                bias: Summary::of(&bias),
                rmse: Summary::of(&vals.iter().map(|v| v.1).collect::<Vec<_>>()),
                per_replication_bias: bias,
            });
        }
    }
    Ok(ContinuousReport { rows, runtime_seconds: start.elapsed().as_secs_f64() })
}
