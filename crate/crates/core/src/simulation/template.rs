//! Synthetic stand-in for the lottery study: 38 sites, 3477 students
//! (2021 offered, 1456 not), skewed high-quality complier shares and a
//! student reading score. Generated deterministically from a seed.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use super::simple::{assign_arms, draw_stratum};
use crate::data::{Arm, IndividualRecord, StudyDataset};
use crate::rng::substream;

pub const TEMPLATE_SITES: usize = 38;
pub const TEMPLATE_TREATED: usize = 2021;
pub const TEMPLATE_CONTROL: usize = 1456;
/// Seed of the bundled template fixture.
pub const TEMPLATE_SEED: u64 = 2024;

const MIN_SITE: usize = 30;

/// Splits `total` into integer parts proportional to `weights`.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = total - parts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        parts[i] += 1;
    }
    parts
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// The bundled template. The fixture CSV is this dataset at
/// [`TEMPLATE_SEED`].
pub fn synthetic_template(seed: u64) -> StudyDataset {
    let mut rng = substream(seed, &[0x7e3a]);
    let total = TEMPLATE_TREATED + TEMPLATE_CONTROL;
    let spread = LogNormal::new(0.0, 0.6).expect("valid lognormal");
    let weights: Vec<f64> = (0..TEMPLATE_SITES).map(|_| spread.sample(&mut rng)).collect();
    let sizes: Vec<usize> = largest_remainder(&weights, total - MIN_SITE * TEMPLATE_SITES)
        .into_iter()
        .map(|s| s + MIN_SITE)
        .collect();
    let mut treated =
        largest_remainder(&sizes.iter().map(|&n| n as f64).collect::<Vec<_>>(), TEMPLATE_TREATED);
    for (t, &n) in treated.iter_mut().zip(&sizes) {
        *t = (*t).clamp(5, n - 5);
    }
    // Restore the exact treated total after clamping, largest sites first.
    let mut order: Vec<usize> = (0..TEMPLATE_SITES).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sizes[i]));
    loop {
        let sum: usize = treated.iter().sum();
        if sum == TEMPLATE_TREATED {
            break;
        }
        for &i in &order {
            let sum: usize = treated.iter().sum();
            if sum < TEMPLATE_TREATED && treated[i] + 5 < sizes[i] {
                treated[i] += 1;
            } else if sum > TEMPLATE_TREATED && treated[i] > 5 {
                treated[i] -= 1;
            }
        }
    }

    let site_mean = Normal::new(0.0, 0.35).expect("valid normal");
    let mut records = Vec::with_capacity(total);
    for k in 0..TEMPLATE_SITES {
        let site_id = format!("site{:02}", k + 1);
        let eat = 0.027 * rng.random_range(0.5..1.5);
        let lat = 0.123 * rng.random_range(0.5..1.5);
        let hat = 0.024 * rng.random_range(0.5..1.5);
        let c = 1.0 - eat - lat - hat;
        let phi = if rng.random_bool(0.3) {
            0.0
        } else {
            0.5 * rng.random::<f64>().powi(2)
        };
        let pi = [eat, lat, hat, c * (1.0 - phi), c * phi];
        let read = Normal::new(site_mean.sample(&mut rng), 1.0).expect("valid normal");
        for arm in assign_arms(sizes[k], treated[k], &mut rng) {
            let stratum = draw_stratum(&pi, &mut rng);
            let p = if arm == Arm::Treatment && stratum.is_complier() { 0.8 } else { 0.72 };
            records.push(IndividualRecord {
                site_id: site_id.clone(),
                arm,
                destination: stratum.destination(arm),
                outcome: rng.random_bool(p),
                weight: 1.0,
                covariates: vec![round3(read.sample(&mut rng))],
            });
        }
    }
    StudyDataset::new(records, vec!["read".into()]).expect("template is well formed")
}

/// Treated `(e, hq, lq)` counts with the lottery study's published margins.
pub const TABLE1_TREATED: [usize; 3] = [1725, 48, 248];
/// Control `(e, hq, lq)` counts.
pub const TABLE1_CONTROL: [usize; 3] = [39, 180, 1237];

/// Sites in [`table1_dataset`].
pub const TABLE1_SITES: usize = 12;

/// Twelve-site dataset whose pooled take-up margins equal the published
/// counts exactly. Control high-quality attendance is spread unevenly so the
/// high-quality complier share varies across sites; on-track rates vary by
/// site in the treated arm.
pub fn table1_dataset() -> StudyDataset {
    use crate::data::Destination;
    let dests = [Destination::Echs, Destination::HighQuality, Destination::LowQuality];
    let uniform = vec![1.0; TABLE1_SITES];
    let tilted: Vec<f64> = (0..TABLE1_SITES).map(|j| 1.0 + 0.3 * j as f64).collect();
    let mut per_site: Vec<Vec<IndividualRecord>> = vec![Vec::new(); TABLE1_SITES];
    for (arm, counts) in [(Arm::Treatment, TABLE1_TREATED), (Arm::Control, TABLE1_CONTROL)] {
        for (d, &n) in dests.iter().zip(&counts) {
            let w = if arm == Arm::Control && *d == Destination::HighQuality { &tilted } else { &uniform };
            for (j, m) in largest_remainder(w, n).into_iter().enumerate() {
                for _ in 0..m {
                    per_site[j].push(IndividualRecord {
                        site_id: format!("t{:02}", j + 1),
                        arm,
                        destination: *d,
                        outcome: false,
                        weight: 1.0,
                        covariates: vec![],
                    });
                }
            }
        }
    }
    let mut records = Vec::new();
    for (j, mut site) in per_site.into_iter().enumerate() {
        let mut seen = [0usize; 2];
        for r in &mut site {
            let on_track = if r.arm == Arm::Treatment { 19 + j % 4 } else { 18 };
            let i = &mut seen[r.arm.index()];
            r.outcome = *i % 25 < on_track;
            *i += 1;
        }
        records.extend(site);
    }
    StudyDataset::new(records, vec![]).expect("fixture is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_shape() {
        let t = synthetic_template(TEMPLATE_SEED);
        assert_eq!(t.num_sites(), TEMPLATE_SITES);
        assert_eq!(t.len(), TEMPLATE_TREATED + TEMPLATE_CONTROL);
        let treated = t.records().iter().filter(|r| r.arm == Arm::Treatment).count();
        assert_eq!(treated, TEMPLATE_TREATED);
        assert_eq!(synthetic_template(TEMPLATE_SEED), t);
    }

    #[test]
    fn largest_remainder_sums() {
        let p = largest_remainder(&[1.0, 1.0, 1.0], 10);
        assert_eq!(p.iter().sum::<usize>(), 10);
        assert_eq!(p, vec![4, 3, 3]);
    }
}
