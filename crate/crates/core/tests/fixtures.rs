use std::path::PathBuf;

use stratarc_core::data::{ingest_csv, Arm, ColumnSchema, Destination};
use stratarc_core::simulation::{
    synthetic_template, table1_dataset, TABLE1_CONTROL, TABLE1_SITES, TABLE1_TREATED,
    TEMPLATE_SEED, TEMPLATE_SITES,
};
use stratarc_core::strata::{stratum_proportions, take_up_proportions};

fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn table1_fixture_matches_generator() {
    let ds = ingest_csv(path("table1_like.csv"), &ColumnSchema::default()).unwrap();
    assert_eq!(ds, table1_dataset());
    assert_eq!(ds.num_sites(), TABLE1_SITES);
}

#[test]
fn table1_margins_are_exact() {
    let ds = table1_dataset();
    let dests = [Destination::Echs, Destination::HighQuality, Destination::LowQuality];
    for (arm, counts) in [(Arm::Treatment, TABLE1_TREATED), (Arm::Control, TABLE1_CONTROL)] {
        for (d, n) in dests.iter().zip(counts) {
            let got = ds.records().iter().filter(|r| r.arm == arm && r.destination == *d).count();
            assert_eq!(got, n);
        }
    }
    let t = take_up_proportions(ds.records(), true).unwrap();
    // Published percentages (e, hq, lq), to one decimal.
    for (arm, row) in [(Arm::Control, [2.7, 12.4, 85.0]), (Arm::Treatment, [85.4, 2.4, 12.3])] {
        for (d, pct) in dests.iter().zip(row) {
            assert!((100.0 * t.prob(arm, *d) - pct).abs() <= 0.05, "{arm:?} {d:?}");
        }
    }
    let s = stratum_proportions(&t);
    assert!(!s.any_clipped());
}

#[test]
fn template_fixture_matches_generator() {
    let schema = ColumnSchema { covariates: vec!["read".into()], ..Default::default() };
    let ds = ingest_csv(path("echs_like_template.csv"), &schema).unwrap();
    assert_eq!(ds, synthetic_template(TEMPLATE_SEED));
    assert_eq!(ds.num_sites(), TEMPLATE_SITES);
}
