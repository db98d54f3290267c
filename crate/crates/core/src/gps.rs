//! Generalized propensity score by orthonormal-basis conditional density
//! estimation.
//!
//! Doses are rescaled to `z = (a - lo) / (hi - lo)` on `[0, 1]` and the
//! conditional density is expanded as `f(z | x) = sum_j beta_j(x) phi_j(z)`.
//! A network maps the covariate window `x` to the coefficients `beta(x)` and
//! is trained on the CDE loss
//!
//! ```text
//! L = mean_i [ integral f(z | x_i)^2 dz - 2 f(z_i | x_i) ]
//!   = mean_i [ sum_j beta_j(x_i)^2 - 2 sum_j beta_j(x_i) phi_j(z_i) ]
//! ```
//!
//! where the integral is closed form by orthonormality. The density on the
//! dose scale is `f(z | x) / (hi - lo)`. Each member keeps only the leading
//! basis terms that minimise the CDE loss on a held-out share of the samples;
//! its truncated expansion is clipped at zero and renormalised to integrate to
//! one before members are averaged.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, LossKind, NetConfig, Network, OutputHead, Sample, StepMask, Target, TrainReport};
use crate::rng::{self, streams};
use crate::scalar::Scalar;
use crate::sim::PatientPanel;
use crate::stats;

/// Midpoint nodes used to renormalise clipped densities. The midpoint rule
/// integrates every cosine basis function of index below `2 * QUAD_NODES`
/// exactly.
pub const QUAD_NODES: usize = 1024;

pub const GPS_CHECKPOINT_VERSION: u32 = 1;

/// Default share of GPS samples held out to choose the number of basis terms.
pub const DEFAULT_HOLDOUT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Cosine,
    HaarWavelet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub num_basis_j: usize,
    pub rescale_lo: f64,
    pub rescale_hi: f64,
}

impl BasisSpec {
    pub fn new(kind: BasisKind, num_basis_j: usize, rescale_lo: f64, rescale_hi: f64) -> Result<Self> {
        let spec = Self { kind, num_basis_j, rescale_lo, rescale_hi };
        spec.validate()?;
        Ok(spec)
    }

    /// Bounds from the observed minimum and maximum dose.
    pub fn from_doses(kind: BasisKind, num_basis_j: usize, doses: &[f64]) -> Result<Self> {
        let lo = doses.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = doses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidInput("no finite doses to derive basis bounds".into()));
        }
        let hi = if hi > lo { hi } else { lo + 1.0 };
        Self::new(kind, num_basis_j, lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_basis_j == 0 {
            return Err(Error::InvalidConfig("basis needs at least one function".into()));
        }
        if !(self.rescale_lo < self.rescale_hi) {
            return Err(Error::InvalidConfig(format!(
                "rescale bounds must satisfy lo < hi, got [{}, {}]",
                self.rescale_lo, self.rescale_hi
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.rescale_hi - self.rescale_lo
    }

    /// Rescaled dose and whether it had to be clipped into the support.
    pub fn rescale(&self, a: f64) -> (f64, bool) {
        let z = (a - self.rescale_lo) / self.width();
        if z < 0.0 {
            (0.0, true)
        } else if z > 1.0 {
            (1.0, true)
        } else {
            (z, false)
        }
    }

    pub fn eval_unit<T: Scalar>(&self, z: f64) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_basis_j);
        self.eval_unit_into(z, &mut out);
        out
    }

    fn eval_unit_into<T: Scalar>(&self, z: f64, out: &mut Vec<T>) {
        out.clear();
        match self.kind {
            BasisKind::Cosine => {
                out.push(T::one());
                let s2 = std::f64::consts::SQRT_2;
                for j in 1..self.num_basis_j {
                    out.push(T::of(s2 * (std::f64::consts::PI * j as f64 * z).cos()));
                }
            }
            BasisKind::HaarWavelet => {
                out.push(T::one());
                // treat z = 1 as the left limit so the last interval is closed
                let z = z.min(1.0 - f64::EPSILON);
                let mut level = 0u32;
                while out.len() < self.num_basis_j {
                    let count = 1usize << level;
                    let scale = 2f64.powf(level as f64 / 2.0);
                    let pos = z * count as f64;
                    for m in 0..count {
                        if out.len() == self.num_basis_j {
                            break;
                        }
                        let local = pos - m as f64;
                        let v = if (0.0..0.5).contains(&local) {
                            scale
                        } else if (0.5..1.0).contains(&local) {
                            -scale
                        } else {
                            0.0
                        };
                        out.push(T::of(v));
                    }
                    level += 1;
                }
            }
        }
    }
}

/// Basis values at dose `a`, plus whether `a` was clipped into the support.
pub fn eval_basis<T: Scalar>(spec: &BasisSpec, a: f64) -> (Vec<T>, bool) {
    let (z, clipped) = spec.rescale(a);
    (spec.eval_unit(z), clipped)
}

/// Basis matrix on the midpoint grid, `[node][j]`.
fn quadrature_matrix(spec: &BasisSpec) -> Vec<f64> {
    let mut m = Vec::with_capacity(QUAD_NODES * spec.num_basis_j);
    let mut buf = Vec::new();
    for i in 0..QUAD_NODES {
        spec.eval_unit_into::<f64>((i as f64 + 0.5) / QUAD_NODES as f64, &mut buf);
        m.extend_from_slice(&buf);
    }
    m
}

/// One member's clipped, renormalised density for a fixed covariate window.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberDensity {
    pub coeffs: Vec<f64>,
    /// Integral of the clipped expansion over `[0, 1]`; zero when the whole
    /// expansion is negative, in which case the density falls back to uniform.
    pub norm: f64,
}

impl MemberDensity {
    fn new(coeffs: Vec<f64>, quad: &[f64]) -> Self {
        let j = coeffs.len();
        let mut acc = 0.0;
        for row in quad.chunks_exact(j) {
            let v: f64 = row.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
            acc += v.max(0.0);
        }
        Self { coeffs, norm: acc / (quad.len() / j) as f64 }
    }

    /// Density on the dose scale.
    pub fn eval(&self, spec: &BasisSpec, a: f64) -> f64 {
        let (z, _) = spec.rescale(a);
        self.eval_unit(spec, z) / spec.width()
    }

    /// Density on the rescaled `[0, 1]` scale.
    pub fn eval_unit(&self, spec: &BasisSpec, z: f64) -> f64 {
        if self.norm <= 1e-12 {
            return 1.0;
        }
        let phi: Vec<f64> = spec.eval_unit(z);
        let raw: f64 = phi.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum();
        raw.max(0.0) / self.norm
    }
}

/// Ensemble of coefficient networks sharing one basis.
#[derive(Debug, Clone)]
pub struct GpsEnsemble<T> {
    pub members: Vec<Network<T>>,
    pub basis: BasisSpec,
    /// Leading basis terms kept by each member.
    pub terms: Vec<usize>,
    quad: Vec<f64>,
}

impl<T: Scalar> GpsEnsemble<T> {
    /// Every member keeps the full basis.
    pub fn new(members: Vec<Network<T>>, basis: BasisSpec) -> Result<Self> {
        let terms = vec![basis.num_basis_j; members.len()];
        Self::with_terms(members, basis, terms)
    }

    pub fn with_terms(members: Vec<Network<T>>, basis: BasisSpec, terms: Vec<usize>) -> Result<Self> {
        basis.validate()?;
        if terms.len() != members.len() || terms.iter().any(|&t| t == 0 || t > basis.num_basis_j) {
            return Err(Error::Shape(format!("need one term count in 1..={} per member", basis.num_basis_j)));
        }
        if members.is_empty() {
            return Err(Error::InvalidConfig("GPS ensemble needs at least one member".into()));
        }
        for m in &members {
            if m.config().output_head != OutputHead::Vector(basis.num_basis_j) {
                return Err(Error::Shape("member head does not match the basis size".into()));
            }
        }
        let quad = quadrature_matrix(&basis);
        Ok(Self { members, basis, terms, quad })
    }

    pub fn ensemble_m(&self) -> usize {
        self.members.len()
    }

    pub fn history_u(&self) -> usize {
        self.members[0].config().history_u
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].config().input_dim
    }

    /// Per-member densities for a covariate window (`history_u * input_dim`
    /// values, oldest step first).
    pub fn member_densities(&self, window: &[T]) -> Result<Vec<MemberDensity>> {
        let mask = StepMask::full(self.history_u());
        self.members
            .iter()
            .zip(&self.terms)
            .map(|(net, &keep)| {
                let mut beta: Vec<f64> = net.forward(window, &mask)?.into_iter().map(|v| v.as_f64()).collect();
                beta[keep..].iter_mut().for_each(|b| *b = 0.0);
                Ok(MemberDensity::new(beta, &self.quad))
            })
            .collect()
    }

    /// Ensemble density `g(a, x)`: the mean of the members' clipped and
    /// renormalised densities.
    pub fn estimate(&self, a: f64, window: &[T]) -> Result<f64> {
        let members = self.member_densities(window)?;
        Ok(members.iter().map(|d| d.eval(&self.basis, a)).sum::<f64>() / members.len() as f64)
    }

    pub fn to_bundle(&self) -> GpsBundle {
        GpsBundle {
            manifest: GpsManifest {
                version: GPS_CHECKPOINT_VERSION,
                ensemble_m: self.members.len(),
                basis: self.basis.clone(),
                history_u: self.history_u(),
                input_dim: self.input_dim(),
            },
            members: self.members.iter().map(|m| m.to_checkpoint()).collect(),
            terms: self.terms.clone(),
        }
    }

    pub fn from_bundle(bundle: &GpsBundle) -> Result<Self> {
        if bundle.manifest.version != GPS_CHECKPOINT_VERSION {
            return Err(Error::Version(bundle.manifest.version));
        }
        if bundle.members.len() != bundle.manifest.ensemble_m {
            return Err(Error::Shape("manifest member count disagrees with the bundle".into()));
        }
        let members = bundle.members.iter().map(Network::from_checkpoint).collect::<Result<Vec<_>>>()?;
        if bundle.terms.is_empty() {
            return Self::new(members, bundle.manifest.basis.clone());
        }
        Self::with_terms(members, bundle.manifest.basis.clone(), bundle.terms.clone())
    }
}

/// `g(a, x)` for a fitted ensemble.
pub fn estimate_gps<T: Scalar>(ens: &GpsEnsemble<T>, a: f64, window: &[T]) -> Result<f64> {
    ens.estimate(a, window)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsManifest {
    pub version: u32,
    pub ensemble_m: usize,
    pub basis: BasisSpec,
    pub history_u: usize,
    pub input_dim: usize,
}

/// Single-file GPS checkpoint: manifest plus member networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsBundle {
    pub manifest: GpsManifest,
    pub members: Vec<Checkpoint>,
    /// Basis terms kept per member; empty means all.
    #[serde(default)]
    pub terms: Vec<usize>,
}

/// Covariate window ending at step `t`, oldest first, zero padded before
/// step 0.
pub fn covariate_window(panel: &PatientPanel, patient: usize, t: usize, history_u: usize) -> Vec<f64> {
    let d = panel.dim();
    let mut out = Vec::with_capacity(history_u * d);
    for k in 0..history_u {
        let back = history_u - 1 - k;
        if back > t {
            out.extend(std::iter::repeat_n(0.0, d));
        } else {
            out.extend_from_slice(panel.covariates.at(patient, t - back));
        }
    }
    out
}

/// Number of leading basis terms with the lowest CDE loss of the raw
/// expansion on held-out samples; ties go to fewer terms.
fn select_terms(net: &Network<f64>, held_out: &[&Sample<f64>]) -> Result<usize> {
    let j = net.config().output_dim();
    let mut loss = vec![0.0; j];
    for s in held_out {
        let beta = net.forward(&s.inputs, &s.mask)?;
        let Target::Vector(phi) = &s.target else { unreachable!("GPS samples carry basis targets") };
        let mut acc = 0.0;
        for k in 0..j {
            acc += beta[k] * beta[k] - 2.0 * beta[k] * phi[k];
            loss[k] += acc;
        }
    }
    Ok(1 + (1..j).fold(0, |b, k| if loss[k] < loss[b] { k } else { b }))
}

/// Trains `m` coefficient networks on `(window, dose)` pairs. A `holdout`
/// share of the pairs, drawn from the `cfg.seed` split stream, is kept out of
/// training and used to choose each member's number of basis terms; with
/// `holdout = 0` members keep the full basis. Member `k` uses seed
/// `cfg.seed + k`; members train in parallel.
pub fn fit_gps_samples(
    windows: &[Vec<f64>],
    doses: &[f64],
    spec: &BasisSpec,
    cfg: &NetConfig,
    m: usize,
    holdout: f64,
) -> Result<(GpsEnsemble<f64>, Vec<TrainReport>)> {
    spec.validate()?;
    if windows.is_empty() || windows.len() != doses.len() {
        return Err(Error::InvalidInput("GPS training needs aligned, non-empty windows and doses".into()));
    }
    if m == 0 {
        return Err(Error::InvalidConfig("ensemble size m must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::InvalidConfig(format!("holdout must lie in [0, 1), got {holdout}")));
    }
    let cfg = NetConfig { output_head: OutputHead::Vector(spec.num_basis_j), ..cfg.clone() };
    let mask = StepMask::full(cfg.history_u);
    let samples: Vec<Sample<f64>> = windows
        .iter()
        .zip(doses)
        .map(|(w, &a)| Sample { inputs: w.clone(), mask: mask.clone(), target: Target::Vector(eval_basis(spec, a).0) })
        .collect();
    let n_out = ((holdout * samples.len() as f64).round() as usize).min(samples.len() - 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if n_out > 0 {
        order.shuffle(&mut rng::stream(cfg.seed, streams::SPLIT));
    }
    let (out_idx, train_idx) = order.split_at(n_out);
    let train: Vec<Sample<f64>> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let held_out: Vec<&Sample<f64>> = out_idx.iter().map(|&i| &samples[i]).collect();
    let fitted: Vec<(Network<f64>, TrainReport, usize)> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut net = Network::init(NetConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() })?;
            let report = net.train(&train, LossKind::Cde)?;
            let terms = if held_out.is_empty() { spec.num_basis_j } else { select_terms(&net, &held_out)? };
            Ok((net, report, terms))
        })
        .collect::<Result<_>>()?;
    let mut members = Vec::with_capacity(m);
    let mut reports = Vec::with_capacity(m);
    let mut terms = Vec::with_capacity(m);
    for (net, report, t) in fitted {
        members.push(net);
        reports.push(report);
        terms.push(t);
    }
    Ok((GpsEnsemble::with_terms(members, spec.clone(), terms)?, reports))
}

/// Fits the GPS on every observed `(patient, step)` of a panel, with the basis
/// rescaled to the panel's observed dose range.
pub fn fit_gps(
    panel: &PatientPanel,
    kind: BasisKind,
    num_basis_j: usize,
    cfg: &NetConfig,
    m: usize,
    holdout: f64,
) -> Result<(GpsEnsemble<f64>, Vec<TrainReport>)> {
    if panel.n_patients() == 0 {
        return Err(Error::InvalidInput("empty panel".into()));
    }
    let spec = BasisSpec::from_doses(kind, num_basis_j, &panel.observed_doses())?;
    let cfg = NetConfig { input_dim: panel.dim(), ..cfg.clone() };
    let mut windows = Vec::new();
    let mut doses = Vec::new();
    for i in 0..panel.n_patients() {
        for t in 0..=panel.last_observed_step(i) {
            windows.push(covariate_window(panel, i, t, cfg.history_u));
            doses.push(panel.dose(i, t));
        }
    }
    fit_gps_samples(&windows, &doses, &spec, &cfg, m, holdout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub tertile: usize,
    pub dose_lo: f64,
    pub dose_hi: f64,
    pub median_dose: f64,
    /// Fraction of all patients whose GPS at the median dose is below the threshold.
    pub lack_of_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub threshold: f64,
    pub degenerate: bool,
    pub rows: Vec<OverlapRow>,
}

impl OverlapReport {
    pub fn mean_lack_of_overlap(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.lack_of_overlap).sum::<f64>() / self.rows.len() as f64
    }
}

/// For each quantile group of the commencement dose, evaluates the GPS at the
/// group's median dose for every patient and reports the share with GPS below
/// `threshold`.
pub fn overlap_report(ens: &GpsEnsemble<f64>, panel: &PatientPanel, n_tertiles: usize, threshold: f64) -> Result<OverlapReport> {
    let doses = panel.initial_doses();
    let n_groups = n_tertiles.max(1);
    let edges: Vec<f64> = (0..=n_groups).map(|k| stats::quantile(&doses, k as f64 / n_groups as f64)).collect();
    let degenerate = edges.windows(2).any(|w| w[1] <= w[0]);
    let groups: Vec<(f64, f64)> = if degenerate {
        vec![(edges[0], edges[n_groups])]
    } else {
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    };
    let windows: Vec<Vec<f64>> =
        (0..panel.n_patients()).map(|i| covariate_window(panel, i, 0, ens.history_u())).collect();
    let densities: Vec<Vec<MemberDensity>> =
        windows.par_iter().map(|w| ens.member_densities(w)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(groups.len());
    for (k, &(lo, hi)) in groups.iter().enumerate() {
        let last = k + 1 == groups.len();
        let inside: Vec<f64> =
            doses.iter().copied().filter(|&a| a >= lo && (if last { a <= hi } else { a < hi })).collect();
        let median = stats::quantile(&inside, 0.5);
        let low = densities
            .iter()
            .filter(|ds| ds.iter().map(|d| d.eval(&ens.basis, median)).sum::<f64>() / (ds.len() as f64) < threshold)
            .count();
        rows.push(OverlapRow {
            tertile: k,
            dose_lo: lo,
            dose_hi: hi,
            median_dose: median,
            lack_of_overlap: low as f64 / panel.n_patients() as f64,
        });
    }
    Ok(OverlapReport { threshold, degenerate, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub dose: f64,
    /// `|corr(mean covariate, dose)|` over all patients.
    pub unconditional: f64,
    /// Size-weighted mean of the same correlation within GPS strata.
    pub stratified: f64,
}

/// Covariate balance at commencement: correlation between the mean covariate
/// and the received dose, before and after stratifying on `g(a, X)` at a
/// fixed dose `a`.
pub fn balance_diagnostic(ens: &GpsEnsemble<f64>, panel: &PatientPanel, a: f64, n_strata: usize) -> Result<BalanceReport> {
    let n = panel.n_patients();
    let xbar: Vec<f64> = (0..n).map(|i| panel.covariates.mean_at(i, 0)).collect();
    let doses = panel.initial_doses();
    let g: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| ens.estimate(a, &covariate_window(panel, i, 0, ens.history_u())))
        .collect::<Result<_>>()?;
    let unconditional = stats::correlation(&xbar, &doses).abs();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| g[i].total_cmp(&g[j]));
    let n_strata = n_strata.clamp(1, n);
    let mut weighted = 0.0;
    let mut total = 0usize;
    for k in 0..n_strata {
        let idx = &order[k * n / n_strata..(k + 1) * n / n_strata];
        if idx.len() < 3 {
            continue;
        }
        let xs: Vec<f64> = idx.iter().map(|&i| xbar[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| doses[i]).collect();
        weighted += stats::correlation(&xs, &ys).abs() * idx.len() as f64;
        total += idx.len();
    }
    let stratified = if total == 0 { unconditional } else { weighted / total as f64 };
    Ok(BalanceReport { dose: a, unconditional, stratified })
}
