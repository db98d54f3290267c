use proptest::prelude::*;

use deepsdrf::gps::{self, BasisKind, GpsEnsemble, DEFAULT_HOLDOUT};
use deepsdrf::harness::NetSettings;
use deepsdrf::nn::OutputHead;
use deepsdrf::sim::{self, DgpConfig, PatientPanel};
use deepsdrf::survival::{
    self, build_labels, survival_from_hazard, CadrEstimate, CadrQuery, OutcomeBundle, OutcomeEnsemble, OutcomeKind,
    Standardizer,
};

fn bools(v: &[u8]) -> Vec<bool> {
    v.iter().map(|&b| b == 1).collect()
}

#[test]
fn label_examples() {
    let l = build_labels(2, 4, true, 4).unwrap();
    assert_eq!(l.gamma, bools(&[0, 0, 1, 0, 0]));
    assert_eq!(l.theta, bools(&[1, 1, 1, 0, 0]));
    assert_eq!(l.event_step(), Some(2));

    let l = build_labels(5, 3, false, 4).unwrap();
    assert_eq!(l.gamma, bools(&[0, 0, 0, 0, 0]));
    assert_eq!(l.theta, bools(&[1, 1, 1, 0, 0]));
    assert_eq!(l.observed(), 3);

    let l = build_labels(0, 1, true, 0).unwrap();
    assert_eq!((l.gamma, l.theta), (vec![true], vec![true]));

    assert!(build_labels(5, 2, true, 6).is_err());
    assert!(build_labels(2, 5, false, 6).is_err());
    assert!(build_labels(7, 9, true, 6).is_err());
}

#[test]
fn survival_product_examples() {
    assert_eq!(survival_from_hazard(&[0.0; 4]).unwrap(), vec![1.0; 4]);
    assert_eq!(survival_from_hazard(&[0.5, 0.5]).unwrap(), vec![0.5, 0.25]);
    assert!(survival_from_hazard(&[0.2, 1.01]).is_err());
    assert!(survival_from_hazard(&[-0.1]).is_err());
}

#[test]
fn standardizer_spot_values() {
    let train = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
    let s = Standardizer::fit(&train).unwrap();
    // mean 2, population sd sqrt(2/3); constant column keeps sd 1
    let sd = (2.0f64 / 3.0).sqrt();
    assert_eq!(s.means, vec![2.0, 5.0]);
    assert!((s.sds[0] - sd).abs() < 1e-15 && s.sds[1] == 1.0);
    let z = s.apply(&[4.0, 7.0]);
    assert!((z[0] - 2.0 / sd).abs() < 1e-12);
    assert_eq!(z[1], 2.0);
    assert!(train.iter().all(|r| s.apply(r)[1] == 0.0));

    let id = Standardizer { means: vec![0.0], sds: vec![1.0] };
    assert_eq!(id.apply(&[0.37]), vec![0.37]);
}

#[test]
fn panel_standardisation_centres_every_covariate() {
    let panel = sim::simulate(&DgpConfig { n_patients: 200, seed: 2, ..DgpConfig::default() }).unwrap();
    let (z, scaler) = survival::standardize(&panel).unwrap();
    assert_eq!(z.len(), panel.covariates.data.len());
    let d = panel.dim();
    for k in 0..d {
        let col: Vec<f64> = z.iter().skip(k).step_by(d).copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
    assert_eq!(scaler.means.len(), d);
}

fn hazards(curve: &[f64]) -> Vec<f64> {
    let mut prev = 1.0;
    curve
        .iter()
        .map(|&s| {
            let h = if prev > 0.0 { 1.0 - s / prev } else { 1.0 };
            prev = s;
            h
        })
        .collect()
}

fn with_outcomes(mut panel: PatientPanel, event_time: usize, censor_time: usize, flag: bool) -> PatientPanel {
    panel.event_time.iter_mut().for_each(|t| *t = event_time);
    panel.censor_time.iter_mut().for_each(|t| *t = censor_time);
    panel.event_flag.iter_mut().for_each(|f| *f = flag);
    panel.validate().unwrap();
    panel
}

#[test]
fn degenerate_targets_are_learned() {
    let base = sim::simulate(&DgpConfig { n_patients: 300, max_followup: 6, seed: 4, ..DgpConfig::default() }).unwrap();
    let cfg = NetSettings { epochs: 40, ..NetSettings::default() }.build(2, 8, 1, OutputHead::PerStepSigmoid, 5);
    let doses = base.observed_doses();
    let probe = [deepsdrf::stats::percentile(&doses, 10.0), deepsdrf::stats::percentile(&doses, 50.0), deepsdrf::stats::percentile(&doses, 90.0)];

    let none = with_outcomes(base.clone(), 7, 6, false);
    let (m, _) = survival::fit_outcome(&none, None, &cfg, 1, OutcomeKind::Snn).unwrap();
    for i in 0..20 {
        let q = CadrQuery::new(&m, None, &none, i).unwrap();
        for &a in &probe {
            let h = hazards(&q.curves(a).unwrap()[0]);
            assert!(h.iter().all(|&v| v <= 0.05), "patient {i}, a = {a}: {h:?}");
        }
    }

    let all = with_outcomes(base, 0, 6, true);
    let (m, _) = survival::fit_outcome(&all, None, &cfg, 1, OutcomeKind::Snn).unwrap();
    for i in 0..20 {
        let q = CadrQuery::new(&m, None, &all, i).unwrap();
        for &a in &probe {
            let h0 = hazards(&q.curves(a).unwrap()[0])[0];
            assert!(h0 >= 0.95, "patient {i}, a = {a}: {h0}");
        }
    }
}

struct Fitted {
    test: PatientPanel,
    gps: GpsEnsemble<f64>,
    deepsdrf: OutcomeEnsemble,
    snn: OutcomeEnsemble,
}

fn small_fit(m: usize) -> Fitted {
    let dgp = DgpConfig { n_patients: 200, seed: 8, ..DgpConfig::default() };
    let train = sim::simulate(&dgp).unwrap();
    let test = sim::simulate(&DgpConfig { seed: 9, ..dgp }).unwrap();
    let net = NetSettings { epochs: 5, ..NetSettings::default() };
    let (gps, _) =
        gps::fit_gps(&train, BasisKind::Cosine, 45, &net.build(8, 8, 1, OutputHead::Vector(45), 1), m, DEFAULT_HOLDOUT).unwrap();
    let ocfg = net.build(2, 8, 1, OutputHead::PerStepSigmoid, 2);
    let (deepsdrf, _) = survival::fit_outcome(&train, Some(&gps), &ocfg, m, OutcomeKind::Deepsdrf).unwrap();
    let (snn, _) = survival::fit_outcome(&train, None, &ocfg, m, OutcomeKind::Snn).unwrap();
    Fitted { test, gps, deepsdrf, snn }
}

#[test]
fn identical_members_reduce_to_a_single_model() {
    let f = small_fit(1);
    let twin_gps = GpsEnsemble::with_terms(
        vec![f.gps.members[0].clone(), f.gps.members[0].clone()],
        f.gps.basis.clone(),
        vec![f.gps.terms[0]; 2],
    )
    .unwrap();
    let twin_out = OutcomeEnsemble {
        kind: OutcomeKind::Deepsdrf,
        members: vec![f.deepsdrf.members[0].clone(), f.deepsdrf.members[0].clone()],
        scaler: f.deepsdrf.scaler.clone(),
    };
    for a in [0.05, 0.3, 1.2] {
        let single = survival::estimate_cadr(&f.deepsdrf, Some(&f.gps), a, &f.test, 4).unwrap();
        let twin = survival::estimate_cadr(&twin_out, Some(&twin_gps), a, &f.test, 4).unwrap();
        assert_eq!(CadrQuery::new(&twin_out, Some(&twin_gps), &f.test, 4).unwrap().curves(a).unwrap().len(), 4);
        assert_eq!(single.survival_sd, vec![0.0; single.t.len()]);
        for k in 0..single.t.len() {
            assert!((twin.survival_mean[k] - single.survival_mean[k]).abs() <= 1e-15);
            assert!(twin.survival_sd[k] <= 1e-15);
        }
    }
}

#[test]
fn estimates_are_valid_survival_summaries() {
    let f = small_fit(2);
    for i in 0..10 {
        for (out, g) in [(&f.deepsdrf, Some(&f.gps)), (&f.snn, None)] {
            let q = CadrQuery::new(out, g, &f.test, i).unwrap();
            for a in [0.0, 0.1, 0.6, 3.0] {
                let e = q.estimate(a).unwrap();
                assert_eq!(e.t, (1..f.test.steps()).collect::<Vec<_>>());
                assert!(e.survival_mean.windows(2).all(|w| w[1] <= w[0] + 1e-15));
                for k in 0..e.t.len() {
                    assert!(e.ci_lo[k] <= e.survival_mean[k] && e.survival_mean[k] <= e.ci_hi[k]);
                    assert!((0.0..=1.0).contains(&e.survival_mean[k]));
                }
                let psi = e.survival_mean.iter().sum::<f64>() / e.t.len() as f64;
                assert!((e.mean_over_time - psi).abs() < 1e-15);
            }
        }
    }
    assert!(CadrQuery::new(&f.deepsdrf, None, &f.test, 0).is_err());
    assert!(CadrQuery::new(&f.snn, None, &f.test, f.test.n_patients()).is_err());
}

#[test]
fn outcome_bundle_round_trip() {
    let f = small_fit(2);
    for out in [&f.deepsdrf, &f.snn] {
        let json = serde_json::to_string(&out.to_bundle()).unwrap();
        let back = OutcomeEnsemble::from_bundle(&serde_json::from_str::<OutcomeBundle>(&json).unwrap()).unwrap();
        let g = (out.kind == OutcomeKind::Deepsdrf).then_some(&f.gps);
        assert_eq!(
            survival::estimate_cadr(&back, g, 0.4, &f.test, 1).unwrap(),
            survival::estimate_cadr(out, g, 0.4, &f.test, 1).unwrap()
        );
    }
}

#[test]
fn cadr_summary_of_known_curves() {
    let curves = vec![vec![1.0, 0.8, 0.6], vec![1.0, 0.6, 0.2]];
    let e = CadrEstimate::from_curves(0.5, &curves).unwrap();
    assert_eq!(e.t, vec![1, 2]);
    assert!((e.survival_mean[0] - 0.7).abs() < 1e-15 && (e.survival_mean[1] - 0.4).abs() < 1e-15);
    assert!((e.survival_sd[0] - 0.1).abs() < 1e-15 && (e.survival_sd[1] - 0.2).abs() < 1e-15);
    assert!((e.mean_over_time - 0.55).abs() < 1e-15);
    assert!(CadrEstimate::from_curves(0.5, &[vec![1.0]]).is_err());

    let mut buf = Vec::new();
    e.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
}

proptest! {
    #[test]
    fn labels_follow_the_hand_rules(q in 0usize..6, et in 0usize..8, ct in 0usize..8) {
        let flag = et <= ct;
        let tau = et.min(ct);
        let got = build_labels(et, ct, flag, q);
        if tau > q {
            prop_assert!(got.is_err());
        } else {
            let l = got.unwrap();
            for t in 0..=q {
                prop_assert_eq!(l.theta[t], t < tau || (flag && t == tau));
                prop_assert_eq!(l.gamma[t], flag && t == tau);
            }
            prop_assert!(l.theta.windows(2).all(|w| w[0] || !w[1]));
        }
        prop_assert!(build_labels(et, ct, !flag, q).is_err());
    }

    #[test]
    fn survival_matches_brute_force(h in prop::collection::vec(0.0f64..=1.0, 12)) {
        let s = survival_from_hazard(&h).unwrap();
        for t in 0..h.len() {
            let mut p = 1.0;
            for &v in &h[..=t] {
                p *= 1.0 - v;
            }
            prop_assert_eq!(s[t], p);
        }
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn summaries_of_valid_curves_are_valid(raw in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 6), 1..8)) {
        let curves: Vec<Vec<f64>> = raw.iter().map(|h| survival_from_hazard(h).unwrap()).collect();
        let e = CadrEstimate::from_curves(1.0, &curves).unwrap();
        prop_assert!(e.survival_mean.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        for k in 0..e.t.len() {
            prop_assert!(e.ci_lo[k] <= e.survival_mean[k] && e.survival_mean[k] <= e.ci_hi[k]);
            prop_assert!(e.survival_sd[k] >= 0.0);
        }
    }
}
