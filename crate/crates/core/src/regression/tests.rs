use super::*;
use crate::strata::StratumTable;

fn site(id: usize, late: f64, phi: f64, mass: f64, w: &[f64]) -> SiteMoments {
    let share = 0.5;
    SiteMoments {
        site_id: format!("s{id}"),
        late,
        phi,
        itt: late * share,
        pi_lc: share * (1.0 - phi),
        pi_hc: share * phi,
        complier_share: share,
        complier_mass: mass,
        w_site: w.to_vec(),
        w_centered: w.to_vec(),
        n_treated: mass,
        n_control: mass,
        degenerate: false,
        strata: StratumTable {
            pi: [0.5, 0.0, 0.0, share * (1.0 - phi), share * phi],
            raw: [0.5, 0.0, 0.0, share * (1.0 - phi), share * phi],
            clipped: [false; 5],
        },
    }
}

fn panel() -> Vec<SiteMoments> {
    (0..12)
        .map(|i| {
            let phi = 0.05 + 0.07 * i as f64;
            let w = [((i * 7) % 5) as f64 - 2.0, (i as f64).sin()];
            let late = 0.1 * (1.0 - phi) + 0.02 * phi + 0.01 * w[0] + 0.003 * ((i * 13) % 7) as f64;
            site(i, late, phi, 50.0 + 10.0 * i as f64, &w)
        })
        .collect()
}

fn names() -> Vec<String> {
    vec!["w1".into(), "w2".into()]
}

#[test]
fn two_slope_recovers_exact_effects() {
    let m: Vec<_> = (0..5)
        .map(|i| {
            let phi = 0.1 + 0.2 * i as f64;
            site(i, 0.12 * (1.0 - phi) + 0.01 * phi, phi, 100.0, &[0.0])
        })
        .collect();
    let fit = fit_late(&m, &DesignSpec::unadjusted()).unwrap();
    assert!((fit.effects.itt_lc.estimate - 0.12).abs() < 1e-12);
    assert!((fit.effects.itt_hc.estimate - 0.01).abs() < 1e-12);
    assert!((fit.effects.contrast.estimate + 0.11).abs() < 1e-12);
}

#[test]
fn parameterizations_agree() {
    let m = panel();
    for spec in [
        DesignSpec::unadjusted(),
        DesignSpec::adjusted(&names(), &["w1", "w2"]).unwrap(),
        DesignSpec::interaction(&names(), "w1", &["w2"]).unwrap(),
    ] {
        let base = fit_late(&m, &spec).unwrap();
        for p in Parameterization::ALL {
            let refit = fit_late(&m, &spec.clone().with_parameterization(p)).unwrap();
            let mapped = reparameterize(&base, p).unwrap();
            for (a, b) in [
                (base.effects, refit.effects),
                (base.effects, mapped.effects),
            ] {
                for (x, y) in a.as_array().iter().zip(b.as_array()) {
                    assert!((x.estimate - y.estimate).abs() < 1e-10);
                    assert!((x.se - y.se).abs() < 1e-10);
                }
            }
            for (x, y) in refit.coefficients.iter().zip(&mapped.coefficients) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn intercept_phi_slope_is_contrast() {
    let m = panel();
    let a = fit_late(&m, &DesignSpec::unadjusted()).unwrap();
    let b = fit_late(
        &m,
        &DesignSpec::unadjusted().with_parameterization(Parameterization::InterceptPhi),
    )
    .unwrap();
    assert!((b.coefficients[0] - a.coefficients[0]).abs() < 1e-12);
    assert!((b.coefficients[1] - (a.coefficients[1] - a.coefficients[0])).abs() < 1e-12);
}

#[test]
fn constant_phi_is_rejected() {
    let m: Vec<_> = (0..4).map(|i| site(i, 0.1 * i as f64, 0.3, 10.0, &[])).collect();
    assert_eq!(
        fit_late(&m, &DesignSpec::unadjusted()).unwrap_err(),
        RegressionError::NoPhiVariation
    );
}

#[test]
fn all_zero_phi_is_rejected() {
    let m: Vec<_> = (0..4).map(|i| site(i, 0.1 * i as f64, 0.0, 10.0, &[])).collect();
    assert!(fit_late(&m, &DesignSpec::unadjusted()).is_err());
}

#[test]
fn spec_validation() {
    assert!(matches!(
        DesignSpec::adjusted(&names(), &["nope"]),
        Err(RegressionError::UnknownCovariate(_))
    ));
    let bad = DesignSpec::itt().with_parameterization(Parameterization::InterceptPhi);
    assert!(matches!(
        fit_itt(&panel(), &bad),
        Err(RegressionError::IncompatibleSpec(_))
    ));
    assert!(fit_itt(&panel(), &DesignSpec::unadjusted()).is_err());
    assert!(fit_late(&panel(), &DesignSpec::itt()).is_err());
}

#[test]
fn itt_model_recovers_effects() {
    let m: Vec<_> = (0..6)
        .map(|i| {
            let mut s = site(i, 0.0, 0.0, 10.0, &[]);
            s.pi_lc = 0.1 + 0.05 * i as f64;
            s.pi_hc = 0.4 - 0.03 * i as f64;
            s.itt = 0.2 * s.pi_lc - 0.05 * s.pi_hc;
            s
        })
        .collect();
    let fit = fit_itt(&m, &DesignSpec::itt()).unwrap();
    assert!((fit.effects.itt_lc.estimate - 0.2).abs() < 1e-12);
    assert!((fit.effects.itt_hc.estimate + 0.05).abs() < 1e-12);
}

#[test]
fn two_site_exact_fit() {
    let m = vec![site(0, 0.1, 0.2, 10.0, &[]), site(1, 0.04, 0.8, 10.0, &[])];
    let fit = fit_late(&m, &DesignSpec::unadjusted()).unwrap();
    assert_eq!(fit.dof, 0);
    // 0.1 = 0.8 a + 0.2 b, 0.04 = 0.2 a + 0.8 b
    assert!((fit.effects.itt_lc.estimate - 0.12).abs() < 1e-12);
    assert!((fit.effects.itt_hc.estimate - 0.02).abs() < 1e-12);
}

#[test]
fn population_effects_without_covariates_equal_coefficients() {
    let m = panel();
    let fit = fit_late(&m, &DesignSpec::unadjusted()).unwrap();
    let pop = population_weighted_effects(&fit, &m).unwrap();
    assert!((pop.itt_lc.estimate - fit.effects.itt_lc.estimate).abs() < 1e-12);
    assert!((pop.itt_hc.se - fit.effects.itt_hc.se).abs() < 1e-12);
}

#[test]
fn population_effects_hand_computed() {
    let m = panel();
    let spec = DesignSpec::interaction(&names(), "w1", &[]).unwrap();
    let fit = fit_late(&m, &spec).unwrap();
    let pop = population_weighted_effects(&fit, &m).unwrap();
    let b = &fit.coefficients;
    let (mut num_lc, mut den_lc, mut num_hc, mut den_hc) = (0.0, 0.0, 0.0, 0.0);
    for s in &m {
        let w = s.w_centered[0];
        num_lc += (1.0 - s.phi) * s.complier_mass * (b[0] + b[2] * w);
        den_lc += (1.0 - s.phi) * s.complier_mass;
        num_hc += s.phi * s.complier_mass * (b[1] + b[3] * w);
        den_hc += s.phi * s.complier_mass;
    }
    assert!((pop.itt_lc.estimate - num_lc / den_lc).abs() < 1e-12);
    assert!((pop.itt_hc.estimate - num_hc / den_hc).abs() < 1e-12);
    for p in Parameterization::ALL {
        let other = reparameterize(&fit, p).unwrap();
        let pp = population_weighted_effects(&other, &m).unwrap();
        assert!((pp.itt_hc.estimate - pop.itt_hc.estimate).abs() < 1e-10);
        assert!((pp.contrast.se - pop.contrast.se).abs() < 1e-10);
    }
}

#[test]
fn zero_hc_mass_is_an_error() {
    let mut m = panel();
    let fit = fit_late(&m, &DesignSpec::unadjusted()).unwrap();
    for s in &mut m {
        s.phi = 0.0;
    }
    assert_eq!(
        population_weighted_effects(&fit, &m).unwrap_err(),
        RegressionError::ZeroTotalMass("high-quality")
    );
}

#[test]
fn site_mismatch_detected() {
    let m = panel();
    let fit = fit_late(&m, &DesignSpec::unadjusted()).unwrap();
    assert_eq!(
        population_weighted_effects(&fit, &m[1..]).unwrap_err(),
        RegressionError::SiteMismatch
    );
}

#[test]
fn complier_mass_weighting_changes_fit() {
    let m = panel();
    let a = fit_late(&m, &DesignSpec::unadjusted()).unwrap();
    let b = fit_late(
        &m,
        &DesignSpec::unadjusted().with_site_weighting(SiteWeighting::ComplierMass),
    )
    .unwrap();
    assert!((a.coefficients[0] - b.coefficients[0]).abs() > 1e-6);
}
