//! Longitudinal labels, ensemble discrete-time hazard models and CADR curves.
//!
//! An outcome network reads one feature row per follow-up step and emits a
//! per-step hazard. Survival is `s(t) = prod_{j <= t} (1 - h(j))`. For the
//! deepsdrf model the step features are the dose and the estimated GPS at
//! that dose; the SNN baseline reads standardised covariates and dose.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gps::{covariate_window, GpsEnsemble, MemberDensity};
use crate::nn::{Checkpoint, LossKind, NetConfig, Network, OutputHead, Sample, StepMask, Target, TrainReport};
use crate::sim::PatientPanel;
use crate::stats;

/// Loss mask `theta` and event indicators `gamma` over steps `0..=q`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    pub theta: Vec<bool>,
    pub gamma: Vec<bool>,
}

impl LabelMatrix {
    pub fn observed(&self) -> usize {
        self.theta.iter().take_while(|&&b| b).count()
    }

    pub fn event_step(&self) -> Option<usize> {
        self.gamma.iter().position(|&g| g)
    }
}

/// Event at `tau`: `theta = 1` for `t <= tau`, `gamma(tau) = 1`.
/// Censored at `tau`: `theta = 1` for `t < tau`, `gamma = 0`.
pub fn build_labels(event_time: usize, censor_time: usize, event_flag: bool, q: usize) -> Result<LabelMatrix> {
    if event_flag != (event_time <= censor_time) {
        return Err(Error::InvalidInput(format!(
            "event_flag = {event_flag} inconsistent with event_time = {event_time}, censor_time = {censor_time}"
        )));
    }
    let tau = event_time.min(censor_time);
    if tau > q {
        return Err(Error::InvalidInput(format!("observed time {tau} exceeds q = {q}")));
    }
    let seen = if event_flag { tau + 1 } else { tau };
    Ok(LabelMatrix {
        theta: (0..=q).map(|t| t < seen).collect(),
        gamma: (0..=q).map(|t| event_flag && t == tau).collect(),
    })
}

pub fn survival_from_hazard(hazards: &[f64]) -> Result<Vec<f64>> {
    if let Some(h) = hazards.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(Error::InvalidInput(format!("hazard {h} outside [0, 1]")));
    }
    let mut s = 1.0;
    Ok(hazards
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect())
}

/// Per-feature z-scoring with stored training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    /// Fits on rows of equal width. Features with zero variance get `sd = 1`.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map(Vec::len).ok_or_else(|| Error::InvalidInput("no rows to standardise".into()))?;
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        let mut means = Vec::with_capacity(width);
        let mut sds = Vec::with_capacity(width);
        for k in 0..width {
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            let sd = stats::population_sd(&col);
            means.push(stats::mean(&col));
            sds.push(if sd > 1e-12 && sd.is_finite() { sd } else { 1.0 });
        }
        Ok(Self { means, sds })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.means.iter().zip(&self.sds)).map(|(x, (m, s))| (x - m) / s).collect()
    }
}

/// Z-scored covariates of a panel using its own statistics, laid out like
/// `panel.covariates.data`.
pub fn standardize(panel: &PatientPanel) -> Result<(Vec<f64>, Standardizer)> {
    let d = panel.dim();
    let rows: Vec<Vec<f64>> = panel.covariates.data.chunks_exact(d).map(<[f64]>::to_vec).collect();
    let scaler = Standardizer::fit(&rows)?;
    Ok((rows.iter().flat_map(|r| scaler.apply(r)).collect(), scaler))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeKind {
    Deepsdrf,
    Snn,
}

#[derive(Debug, Clone)]
pub struct OutcomeEnsemble {
    pub kind: OutcomeKind,
    pub members: Vec<Network<f64>>,
    pub scaler: Standardizer,
}

impl OutcomeEnsemble {
    pub fn ensemble_m(&self) -> usize {
        self.members.len()
    }

    fn feature_dim(&self) -> usize {
        self.scaler.means.len()
    }

    pub fn to_bundle(&self) -> OutcomeBundle {
        OutcomeBundle {
            version: OUTCOME_CHECKPOINT_VERSION,
            kind: self.kind,
            scaler: self.scaler.clone(),
            members: self.members.iter().map(Network::to_checkpoint).collect(),
        }
    }

    pub fn from_bundle(b: &OutcomeBundle) -> Result<Self> {
        if b.version != OUTCOME_CHECKPOINT_VERSION {
            return Err(Error::Version(b.version));
        }
        if b.members.is_empty() {
            return Err(Error::InvalidInput("outcome bundle has no members".into()));
        }
        let members = b.members.iter().map(Network::from_checkpoint).collect::<Result<Vec<_>>>()?;
        if members.iter().any(|m| m.config().input_dim != b.scaler.means.len() || m.config().output_head != OutputHead::PerStepSigmoid) {
            return Err(Error::Shape("outcome members do not match the stored feature scaler".into()));
        }
        Ok(Self { kind: b.kind, members, scaler: b.scaler.clone() })
    }
}

pub const OUTCOME_CHECKPOINT_VERSION: u32 = 1;

/// Serialisable outcome ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBundle {
    pub version: u32,
    pub kind: OutcomeKind,
    pub scaler: Standardizer,
    pub members: Vec<Checkpoint>,
}

fn snn_row(panel: &PatientPanel, i: usize, t: usize, a: f64) -> Vec<f64> {
    let mut row = panel.covariates.at(i, t).to_vec();
    row.push(a);
    row
}

/// Per-step GPS member densities for one patient's observed covariate path.
fn patient_densities(gps: &GpsEnsemble<f64>, panel: &PatientPanel, i: usize, steps: usize) -> Result<Vec<Vec<MemberDensity>>> {
    (0..steps).map(|t| gps.member_densities(&covariate_window(panel, i, t, gps.history_u()))).collect()
}

fn mean_density(ds: &[MemberDensity], gps: &GpsEnsemble<f64>, a: f64) -> f64 {
    ds.iter().map(|d| d.eval(&gps.basis, a)).sum::<f64>() / ds.len() as f64
}

/// Unscaled per-step features for every patient along the observed doses.
/// Rows past the observed window are zero.
fn training_rows(panel: &PatientPanel, gps: Option<&GpsEnsemble<f64>>, kind: OutcomeKind) -> Result<Vec<Vec<Vec<f64>>>> {
    let steps = panel.steps();
    (0..panel.n_patients())
        .into_par_iter()
        .map(|i| {
            let last = panel.last_observed_step(i);
            match kind {
                OutcomeKind::Deepsdrf => {
                    let gps = gps.ok_or_else(|| Error::InvalidInput("deepsdrf needs a fitted GPS".into()))?;
                    let dens = patient_densities(gps, panel, i, last + 1)?;
                    Ok((0..steps)
                        .map(|t| {
                            if t <= last {
                                let a = panel.dose(i, t);
                                vec![a, mean_density(&dens[t], gps, a)]
                            } else {
                                vec![0.0, 0.0]
                            }
                        })
                        .collect())
                }
                OutcomeKind::Snn => Ok((0..steps)
                    .map(|t| if t <= last { snn_row(panel, i, t, panel.dose(i, t)) } else { vec![0.0; panel.dim() + 1] })
                    .collect()),
            }
        })
        .collect()
}

/// Trains `m` per-step hazard networks with masked binary cross-entropy
/// against the label matrices. Member `k` uses seed `cfg.seed + k`.
pub fn fit_outcome(
    panel: &PatientPanel,
    gps: Option<&GpsEnsemble<f64>>,
    cfg: &NetConfig,
    m: usize,
    kind: OutcomeKind,
) -> Result<(OutcomeEnsemble, Vec<TrainReport>)> {
    if m == 0 {
        return Err(Error::InvalidConfig("ensemble size m must be >= 1".into()));
    }
    if panel.n_patients() == 0 {
        return Err(Error::InvalidInput("empty panel".into()));
    }
    let q = panel.max_followup;
    let labels: Vec<LabelMatrix> = (0..panel.n_patients())
        .map(|i| build_labels(panel.event_time[i], panel.censor_time[i], panel.event_flag[i], q))
        .collect::<Result<_>>()?;
    let rows = training_rows(panel, gps, kind)?;
    let observed: Vec<Vec<f64>> = rows
        .iter()
        .zip(&labels)
        .flat_map(|(r, l)| r[..l.observed()].to_vec())
        .collect();
    let scaler = Standardizer::fit(&observed)?;
    let samples: Vec<Sample<f64>> = rows
        .iter()
        .zip(&labels)
        .map(|(r, l)| {
            let n_obs = l.observed();
            Sample {
                inputs: r.iter().enumerate().flat_map(|(t, row)| {
                    if t < n_obs { scaler.apply(row) } else { vec![0.0; row.len()] }
                }).collect(),
                mask: StepMask(l.theta.clone()),
                target: Target::Steps(l.gamma.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect()),
            }
        })
        .collect();
    let cfg = NetConfig { input_dim: scaler.means.len(), output_head: OutputHead::PerStepSigmoid, ..cfg.clone() };
    let fitted: Vec<(Network<f64>, TrainReport)> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut net = Network::init(NetConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() })?;
            let report = net.train(&samples, LossKind::MaskedBinaryCrossentropy)?;
            Ok((net, report))
        })
        .collect::<Result<_>>()?;
    let (members, reports): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    Ok((OutcomeEnsemble { kind, members, scaler }, reports))
}

/// Survival curve with ensemble uncertainty at a fixed dose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadrEstimate {
    pub a: f64,
    pub t: Vec<usize>,
    #[serde(rename = "mean")]
    pub survival_mean: Vec<f64>,
    #[serde(rename = "sd")]
    pub survival_sd: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    #[serde(rename = "psi_bar")]
    pub mean_over_time: f64,
}

impl CadrEstimate {
    /// Summarises survival curves over steps `0..=Theta`; reported times are
    /// `1..=Theta`.
    pub fn from_curves(a: f64, curves: &[Vec<f64>]) -> Result<Self> {
        let steps = curves.first().map(Vec::len).unwrap_or(0);
        if steps < 2 || curves.iter().any(|c| c.len() != steps) {
            return Err(Error::Shape("need equal-length curves with at least two steps".into()));
        }
        let mut est = Self {
            a,
            t: (1..steps).collect(),
            survival_mean: Vec::with_capacity(steps - 1),
            survival_sd: Vec::with_capacity(steps - 1),
            ci_lo: Vec::with_capacity(steps - 1),
            ci_hi: Vec::with_capacity(steps - 1),
            mean_over_time: 0.0,
        };
        for t in 1..steps {
            let col: Vec<f64> = curves.iter().map(|c| c[t]).collect();
            let mean = stats::mean(&col);
            est.survival_mean.push(mean);
            est.survival_sd.push(stats::population_sd(&col));
            est.ci_lo.push(stats::percentile(&col, 2.5).min(mean));
            est.ci_hi.push(stats::percentile(&col, 97.5).max(mean));
        }
        est.mean_over_time = stats::mean(&est.survival_mean);
        Ok(est)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_cadr_csv(std::slice::from_ref(self), w)
    }
}

/// Long-format CSV `a,t,mean,sd,ci_lo,ci_hi` for several curves.
pub fn write_cadr_csv<W: std::io::Write>(curves: &[CadrEstimate], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["a", "t", "mean", "sd", "ci_lo", "ci_hi"])?;
    for c in curves {
        for k in 0..c.t.len() {
            out.serialize((c.a, c.t[k], c.survival_mean[k], c.survival_sd[k], c.ci_lo[k], c.ci_hi[k]))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// A CADR curve tagged with the patient it was computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientCadr {
    pub patient_id: usize,
    #[serde(flatten)]
    pub cadr: CadrEstimate,
}

/// Long-format CSV `patient_id,a,t,mean,sd,ci_lo,ci_hi`.
pub fn write_patient_cadr_csv<W: std::io::Write>(curves: &[PatientCadr], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["patient_id", "a", "t", "mean", "sd", "ci_lo", "ci_hi"])?;
    for p in curves {
        let c = &p.cadr;
        for k in 0..c.t.len() {
            out.serialize((p.patient_id, c.a, c.t[k], c.survival_mean[k], c.survival_sd[k], c.ci_lo[k], c.ci_hi[k]))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-patient query context: cached GPS member densities along the observed
/// covariate path, reused across doses.
pub struct CadrQuery<'a> {
    out: &'a OutcomeEnsemble,
    gps: Option<&'a GpsEnsemble<f64>>,
    panel: &'a PatientPanel,
    patient: usize,
    densities: Vec<Vec<MemberDensity>>,
}

impl<'a> CadrQuery<'a> {
    pub fn new(out: &'a OutcomeEnsemble, gps: Option<&'a GpsEnsemble<f64>>, panel: &'a PatientPanel, patient: usize) -> Result<Self> {
        if patient >= panel.n_patients() {
            return Err(Error::InvalidInput(format!("patient {patient} out of range")));
        }
        let want = match out.kind {
            OutcomeKind::Deepsdrf => 2,
            OutcomeKind::Snn => panel.dim() + 1,
        };
        if out.feature_dim() != want {
            return Err(Error::Shape("panel does not match the outcome model's features".into()));
        }
        let densities = match out.kind {
            OutcomeKind::Deepsdrf => {
                let gps = gps.ok_or_else(|| Error::InvalidInput("deepsdrf needs a fitted GPS".into()))?;
                patient_densities(gps, panel, patient, panel.steps())?
            }
            OutcomeKind::Snn => Vec::new(),
        };
        Ok(Self { out, gps, panel, patient, densities })
    }

    /// All `m x m` (deepsdrf) or `m` (snn) survival curves over steps `0..=Theta`.
    pub fn curves(&self, a: f64) -> Result<Vec<Vec<f64>>> {
        let steps = self.panel.steps();
        let mask = StepMask::full(steps);
        let inputs: Vec<Vec<f64>> = match (self.out.kind, self.gps) {
            (OutcomeKind::Deepsdrf, Some(gps)) => (0..gps.ensemble_m())
                .map(|q| {
                    (0..steps)
                        .flat_map(|t| self.out.scaler.apply(&[a, self.densities[t][q].eval(&gps.basis, a)]))
                        .collect()
                })
                .collect(),
            (OutcomeKind::Deepsdrf, None) => return Err(Error::InvalidInput("deepsdrf needs a fitted GPS".into())),
            (OutcomeKind::Snn, _) => {
                vec![(0..steps).flat_map(|t| self.out.scaler.apply(&snn_row(self.panel, self.patient, t, a))).collect()]
            }
        };
        let mut curves = Vec::with_capacity(self.out.members.len() * inputs.len());
        for net in &self.out.members {
            for x in &inputs {
                let h = net.forward(x, &mask)?;
                curves.push(survival_from_hazard(&h)?);
            }
        }
        Ok(curves)
    }

    pub fn estimate(&self, a: f64) -> Result<CadrEstimate> {
        CadrEstimate::from_curves(a, &self.curves(a)?)
    }
}

/// CADR for one patient with the dose held at `a` over the whole trajectory
/// and the GPS evaluated at `a` along the patient's covariate history.
pub fn estimate_cadr(
    out: &OutcomeEnsemble,
    gps: Option<&GpsEnsemble<f64>>,
    a: f64,
    panel: &PatientPanel,
    patient: usize,
) -> Result<CadrEstimate> {
    CadrQuery::new(out, gps, panel, patient)?.estimate(a)
}
