use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stratarc_core::bootstrap::{resample_site, CombinedEstimate};
use stratarc_core::data::{read_csv, write_csv, Arm, ColumnSchema, Destination, IndividualRecord, StudyDataset};
use stratarc_core::diagnostics::slope_test;
use stratarc_core::regression::{fit_late, reparameterize, DesignSpec, Parameterization};
use stratarc_core::strata::{all_site_moments, stratum_proportions, take_up_proportions, MomentOptions};

const DESTS: [Destination; 3] = [Destination::Echs, Destination::HighQuality, Destination::LowQuality];

fn record_strategy(site: usize) -> impl Strategy<Value = IndividualRecord> {
    (any::<bool>(), 0..3usize, any::<bool>(), 0.1f64..5.0, -2.0f64..2.0).prop_map(
        move |(t, d, y, w, x)| IndividualRecord {
            site_id: format!("s{site}"),
            arm: if t { Arm::Treatment } else { Arm::Control },
            destination: DESTS[d],
            outcome: y,
            weight: w,
            covariates: vec![x],
        },
    )
}

/// Small datasets whose sites each contain both arms.
fn dataset_strategy(max_sites: usize, max_per_site: usize) -> impl Strategy<Value = StudyDataset> {
    (2..=max_sites)
        .prop_flat_map(move |k| {
            (0..k)
                .map(|s| prop::collection::vec(record_strategy(s), 2..=max_per_site))
                .collect::<Vec<_>>()
        })
        .prop_map(|sites| {
            let mut records = Vec::new();
            for mut site in sites {
                site[0].arm = Arm::Treatment;
                site[1].arm = Arm::Control;
                records.extend(site);
            }
            StudyDataset::new(records, vec!["x".into()]).unwrap()
        })
}

/// Direct per-site computation from the record list.
struct Brute {
    itt: f64,
    pi: [f64; 5],
    n_treated: f64,
    n_control: f64,
}

fn brute_force(ds: &StudyDataset, site: &str) -> Brute {
    let total_w: f64 = ds.records().iter().map(|r| r.weight).sum();
    let scale = ds.len() as f64 / total_w;
    let recs: Vec<&IndividualRecord> = ds.records().iter().filter(|r| r.site_id == site).collect();
    let mut w = [0.0; 2];
    let mut wy = [0.0; 2];
    let mut wd = [[0.0; 3]; 2];
    for r in &recs {
        let z = usize::from(r.arm == Arm::Treatment);
        w[z] += r.weight;
        wy[z] += r.weight * r.y();
        let d = DESTS.iter().position(|d| *d == r.destination).unwrap();
        wd[z][d] += r.weight;
    }
    let p = |z: usize, d: usize| wd[z][d] / w[z];
    let mut pi = [p(0, 0), p(1, 2), p(1, 1), p(0, 2) - p(1, 2), p(0, 1) - p(1, 1)];
    if pi.iter().any(|v| *v < 0.0) {
        for v in &mut pi {
            *v = v.max(0.0);
        }
        let s: f64 = pi.iter().sum();
        for v in &mut pi {
            *v /= s;
        }
    }
    Brute {
        itt: wy[1] / w[1] - wy[0] / w[0],
        pi,
        n_treated: w[1] * scale,
        n_control: w[0] * scale,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-10 * (1.0 + b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pipeline_matches_brute_force(ds in dataset_strategy(5, 40)) {
        let opts = MomentOptions::default();
        if let Ok(set) = all_site_moments(&ds, false, &opts) {
            for m in &set.moments {
                let b = brute_force(&ds, &m.site_id);
                prop_assert!(close(m.itt, b.itt));
                prop_assert!(close(m.n_treated, b.n_treated));
                prop_assert!(close(m.n_control, b.n_control));
                for s in 0..5 {
                    prop_assert!(close(m.strata.pi[s], b.pi[s]));
                }
                let share = b.pi[3] + b.pi[4];
                if share > opts.degenerate_threshold {
                    prop_assert!(close(m.late, b.itt / share));
                    prop_assert!(close(m.phi, b.pi[4] / share));
                    prop_assert!(close(m.complier_mass, share * (b.n_treated + b.n_control)));
                }
            }
        }
    }

    #[test]
    fn strata_form_a_distribution(ds in dataset_strategy(4, 30), weighted in any::<bool>()) {
        let t = take_up_proportions(ds.records(), weighted).unwrap();
        for z in 0..2 {
            prop_assert!((t.p[z].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let s = stratum_proportions(&t);
        prop_assert!((s.pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.pi.iter().all(|v| *v >= 0.0));
        for i in 0..5 {
            prop_assert_eq!(s.clipped[i], s.raw[i] < 0.0);
        }
        if let Some(phi) = s.phi() {
            prop_assert!((0.0..=1.0).contains(&phi));
        }
    }

    #[test]
    fn weights_scale_invariance(ds in dataset_strategy(4, 30), c in 0.001f64..1000.0) {
        let scaled: Vec<IndividualRecord> = ds
            .records()
            .iter()
            .map(|r| IndividualRecord { weight: r.weight * c, ..r.clone() })
            .collect();
        let a = take_up_proportions(ds.records(), true).unwrap();
        let b = take_up_proportions(scaled.iter(), true).unwrap();
        for (x, y) in a.p.iter().flatten().zip(b.p.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip(ds in dataset_strategy(4, 20)) {
        // Weights and covariates need a lossless text form.
        let schema = ColumnSchema { weight: Some("w".into()), covariates: vec!["x".into()], ..Default::default() };
        let mut buf = Vec::new();
        write_csv(&ds, &schema, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn site_index_partitions_records(ds in dataset_strategy(6, 20)) {
        let total: usize = ds.site_index().values().map(Vec::len).sum();
        prop_assert_eq!(total, ds.len());
        for (site, idx) in ds.site_index() {
            prop_assert!(idx.iter().all(|&i| &ds.records()[i].site_id == site));
        }
    }

    #[test]
    fn resampling_preserves_arm_counts(ds in dataset_strategy(3, 40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in ds.site_ids() {
            let recs = ds.site_records(id).unwrap();
            let out = resample_site(&recs, true, &mut rng);
            prop_assert_eq!(out.len(), recs.len());
            for arm in Arm::ALL {
                let before = recs.iter().filter(|r| r.arm == arm).count();
                let after = out.iter().filter(|r| r.arm == arm).count();
                prop_assert_eq!(before, after);
                prop_assert!(out.iter().filter(|r| r.arm == arm).all(|r| recs.contains(&r)));
            }
        }
    }

    #[test]
    fn rubin_identity(
        pairs in prop::collection::vec((-1.0f64..1.0, 0.0f64..0.5), 2..60),
    ) {
        let (est, se): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let c = CombinedEstimate::from_replicates(&est, &se, 0.95).unwrap();
        let b = est.len() as f64;
        let mean = est.iter().sum::<f64>() / b;
        let within = se.iter().map(|s| s * s).sum::<f64>() / b;
        let between = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (b - 1.0);
        prop_assert!((c.point - mean).abs() < 1e-12);
        prop_assert!((c.total_se.powi(2) - (within + (1.0 + 1.0 / b) * between)).abs() < 1e-12);
        prop_assert!(c.ci_low <= c.point && c.point <= c.ci_high);
        prop_assert!(((c.ci_high - c.ci_low) / 2.0 - 1.959963984540054 * c.total_se).abs() < 1e-9);
    }

    #[test]
    fn parameterizations_map_exactly(
        sites in prop::collection::vec((0.02f64..0.98, -0.3f64..0.3, 10.0f64..500.0, -1.0f64..1.0), 5..15),
    ) {
        use stratarc_core::strata::{SiteMoments, StratumTable};
        let moments: Vec<SiteMoments> = sites
            .iter()
            .enumerate()
            .map(|(i, &(phi, late, mass, w))| SiteMoments {
                site_id: format!("s{i}"),
                late,
                phi,
                itt: 0.5 * late,
                pi_lc: 0.5 * (1.0 - phi),
                pi_hc: 0.5 * phi,
                complier_share: 0.5,
                complier_mass: mass,
                w_site: vec![w],
                w_centered: vec![w],
                n_treated: mass,
                n_control: mass,
                degenerate: false,
                strata: StratumTable {
                    pi: [0.5, 0.0, 0.0, 0.5 * (1.0 - phi), 0.5 * phi],
                    raw: [0.5, 0.0, 0.0, 0.5 * (1.0 - phi), 0.5 * phi],
                    clipped: [false; 5],
                },
            })
            .collect();
        let names = vec!["w".to_string()];
        for spec in [DesignSpec::unadjusted(), DesignSpec::adjusted(&names, &["w"]).unwrap()] {
            let Ok(base) = fit_late(&moments, &spec) else { continue };
            for p in Parameterization::ALL {
                let refit = fit_late(&moments, &spec.clone().with_parameterization(p)).unwrap();
                let mapped = reparameterize(&base, p).unwrap();
                for (a, b) in refit.effects.as_array().iter().zip(mapped.effects.as_array().iter()) {
                    prop_assert!((a.estimate - b.estimate).abs() < 1e-9);
                    prop_assert!((a.se - b.se).abs() < 1e-9);
                }
                for (a, b) in refit.effects.as_array().iter().zip(base.effects.as_array().iter()) {
                    prop_assert!((a.estimate - b.estimate).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn slope_test_ignores_level_shifts(
        pts in prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 4..40),
        shift in -5.0f64..5.0,
    ) {
        let (phi, r): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let shifted: Vec<f64> = r.iter().map(|v| v + shift).collect();
        if let (Ok(a), Ok(b)) = (slope_test(&r, &phi), slope_test(&shifted, &phi)) {
            prop_assert!((a.slope - b.slope).abs() < 1e-8);
            prop_assert!((a.slope_se - b.slope_se).abs() < 1e-8);
            prop_assert!((a.intercept + shift - b.intercept).abs() < 1e-8);
        }
    }
}
