use super::*;
use crate::data::{Arm, Destination};
use crate::rng::substream;
use crate::strata::{stratum_proportions, take_up_proportions};

fn confounded(sites: usize) -> DgpSpec {
    DgpSpec {
        confounder: Some(Confounder {
            effect_on_phi: PhiMap {
                intercept: None,
                slope: 6.0,
            },
            effect_on_itt_lc: 0.2,
            effect_on_itt_hc: -0.1,
            distribution: Some(UniformRange { a: 0.0, b: 1.0 }),
        }),
        ..DgpSpec::simple(sites, 0.1, 0.05)
    }
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn homogeneous_sites_without_noise() {
    let sim = generate_simple(&DgpSpec::simple(10, 0.12, 0.03), &mut substream(1, &[])).unwrap();
    for s in &sim.truth.sites {
        assert_eq!(s.itt_lc, 0.12);
        assert_eq!(s.itt_hc, 0.03);
    }
    assert!((sim.truth.itt_lc - 0.12).abs() < 1e-15);
}

#[test]
fn null_effects_give_zero_lates() {
    let mut spec = DgpSpec::simple(20, 0.0, 0.0);
    spec.sigma[2][2] = 0.5;
    let sim = generate_simple(&spec, &mut substream(2, &[])).unwrap();
    assert!(sim.truth.sites.iter().all(|s| s.late == 0.0));
}

#[test]
fn confounder_correlates_phi_and_effects() {
    let mut spec = confounded(10_000);
    spec.site_size = SiteSizeRange { min: 2, max: 3 };
    let sim = generate_simple(&spec, &mut substream(3, &[])).unwrap();
    let phi: Vec<f64> = sim.truth.sites.iter().map(|s| s.phi).collect();
    let lc: Vec<f64> = sim.truth.sites.iter().map(|s| s.itt_lc).collect();
    let hc: Vec<f64> = sim.truth.sites.iter().map(|s| s.itt_hc).collect();
    assert!(corr(&phi, &lc) > 0.5);
    assert!(corr(&phi, &hc) < -0.5);
}

#[test]
fn exclusion_restriction_in_schedule() {
    let mut spec = confounded(30);
    spec.sigma = [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.3]];
    let sim = generate_simple(&spec, &mut substream(4, &[])).unwrap();
    assert!(sim.schedule.exclusion_restriction_holds());
    for (e, r) in sim.schedule.entries.iter().zip(sim.dataset.records()) {
        assert_eq!(e.stratum.destination(r.arm), r.destination);
        assert_eq!(r.outcome, if r.arm == Arm::Treatment { e.y1 } else { e.y0 });
    }
}

#[test]
fn treated_counts_are_exact() {
    let sim = generate_simple(&DgpSpec::simple(5, 0.1, 0.0), &mut substream(5, &[])).unwrap();
    for s in &sim.truth.sites {
        let t = sim
            .dataset
            .site_records(&s.site_id)
            .unwrap()
            .iter()
            .filter(|r| r.arm == Arm::Treatment)
            .count();
        assert_eq!(t, s.n_treated);
        assert_eq!(t, (s.n as f64 * 0.58).round() as usize);
    }
}

#[test]
fn large_sample_recovers_strata() {
    let mut spec = DgpSpec::simple(2, 0.1, 0.05);
    spec.site_size = SiteSizeRange {
        min: 500_000,
        max: 500_000,
    };
    let sim = generate_simple(&spec, &mut substream(6, &[])).unwrap();
    let t = take_up_proportions(sim.dataset.records(), false).unwrap();
    let table = stratum_proportions(&t);
    let n1 = t.n[1].iter().sum::<f64>();
    let n0 = t.n[0].iter().sum::<f64>();
    let var = |p: f64, n: f64| p * (1.0 - p) / n;
    let base = spec.strata_base_distribution;
    let se = [
        var(t.p[0][Destination::Echs.index()], n0).sqrt(),
        var(t.p[1][Destination::LowQuality.index()], n1).sqrt(),
        var(t.p[1][Destination::HighQuality.index()], n1).sqrt(),
        (var(t.p[0][1], n0) + var(t.p[1][1], n1)).sqrt(),
        (var(t.p[0][2], n0) + var(t.p[1][2], n1)).sqrt(),
    ];
    for s in 0..5 {
        assert!((table.pi[s] - base[s]).abs() < 3.0 * se[s], "stratum {s}");
    }
}

#[test]
fn oracle_moments_use_truth() {
    let truth = Truth::new(
        vec![SiteTruth {
            site_id: "a".into(),
            n: 10,
            n_treated: 5,
            pi: [0.2, 0.0, 0.0, 0.4, 0.4],
            phi: 0.5,
            itt_lc: 0.1,
            itt_hc: 0.1,
            late: 0.1,
            covariates: vec![1.0],
        }],
        vec!["x".into()],
    );
    let m = &oracle_moments(&truth)[0];
    assert_eq!((m.phi, m.late), (0.5, 0.1));
    assert!((m.complier_mass - 8.0).abs() < 1e-12);
    assert_eq!(m.w_centered, vec![0.0]);
}

#[test]
fn spec_validation() {
    let mut s = DgpSpec::simple(10, 0.1, 0.0);
    s.strata_base_distribution = [0.5, 0.5, 0.5, 0.0, 0.0];
    assert!(s.validate().is_err());
    let mut s = DgpSpec::simple(10, 0.1, 0.0);
    s.sigma = [[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    assert!(matches!(s.validate(), Err(SimulationError::BadSpec(_))));
    assert!(DgpSpec::simple(1, 0.0, 0.0).validate().is_err());
}

#[test]
fn calibrated_null_has_half_probabilities() {
    let template = synthetic_template(TEMPLATE_SEED);
    let spec = DgpSpec::calibrated(0.0, 0.0);
    let sim = generate_calibrated(&template, &spec, &mut substream(7, &[])).unwrap();
    assert_eq!(sim.truth.sites.len(), TEMPLATE_SITES);
    assert!(sim.truth.sites.iter().all(|s| s.itt_lc.abs() < 1e-15 && s.itt_hc.abs() < 1e-15));
    assert!(sim.schedule.exclusion_restriction_holds());
}

#[test]
fn calibrated_keeps_template_arm_counts() {
    let template = synthetic_template(TEMPLATE_SEED);
    let sim = generate_calibrated(&template, &DgpSpec::calibrated(0.1, 0.0), &mut substream(8, &[]))
        .unwrap();
    for s in &sim.truth.sites {
        let original = s.site_id.split_once('-').unwrap().1;
        let tmpl = template.site_records(original).unwrap();
        let got = sim.dataset.site_records(&s.site_id).unwrap();
        assert_eq!(got.len(), tmpl.len());
        let treated = |v: &[&crate::data::IndividualRecord]| {
            v.iter().filter(|r| r.arm == Arm::Treatment).count()
        };
        assert_eq!(treated(&got), treated(&tmpl));
    }
}

#[test]
fn calibrated_intercepts_hit_targets() {
    let template = synthetic_template(TEMPLATE_SEED);
    let spec = DgpSpec::calibrated(0.1232, 0.0008);
    let cal = calibrate_intercepts(&template, &spec).unwrap();
    assert!((logistic(cal.alpha_lc) - 0.6232).abs() < 1e-12);
    assert!((logistic(cal.alpha_hc) - 0.5008).abs() < 1e-12);

    let spec = DgpSpec {
        confounder: Some(Confounder {
            effect_on_phi: PhiMap {
                intercept: None,
                slope: 4.0,
            },
            effect_on_itt_lc: 1.0,
            effect_on_itt_hc: 0.3,
            distribution: None,
        }),
        ..DgpSpec::calibrated(0.109, 0.021)
    };
    calibrate_intercepts(&template, &spec).unwrap();
    // Expected population effect over many template draws.
    let (mut lc, mut hc) = (0.0, 0.0);
    let reps = 400;
    for r in 0..reps {
        let sim = generate_calibrated(&template, &spec, &mut substream(9, &[r])).unwrap();
        lc += sim.truth.itt_lc / reps as f64;
        hc += sim.truth.itt_hc / reps as f64;
    }
    assert!((lc - 0.109).abs() < 0.005, "{lc}");
    assert!((hc - 0.021).abs() < 0.005, "{hc}");
}

#[test]
fn monte_carlo_is_deterministic_and_consistent() {
    let mut spec = DgpSpec::simple(12, 0.1, 0.02);
    spec.sigma[2][2] = 0.6;
    let cfg = MonteCarloConfig {
        reps: 6,
        seed: 9,
        bootstrap_replicates: 5,
        ..MonteCarloConfig::default()
    };
    let a = run_monte_carlo(&spec, &cfg, None).unwrap();
    let b = run_monte_carlo(&spec, &cfg, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.cells.len(), 18);
    for c in &a.cells {
        assert!((c.rmse.powi(2) - c.bias.powi(2) - c.empirical_se.powi(2)).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&c.coverage));
    }
}

#[test]
fn generate_dispatch_needs_template() {
    let spec = DgpSpec::calibrated(0.0, 0.0);
    assert!(matches!(
        generate(&spec, None, &mut substream(1, &[])),
        Err(SimulationError::BadTemplate(_))
    ));
}
