//! Correctly specified site model with an optional confounder `x`.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    draw_noise, logistic, logit, noise_factor, DgpKind, DgpSpec, PotentialOutcomeSchedule,
    ScheduleEntry, SimulatedData, SimulationError, SiteTruth, Truth,
};
use crate::data::{Arm, IndividualRecord, StudyDataset, Stratum};

pub(crate) fn draw_stratum<R: Rng + ?Sized>(pi: &[f64; 5], rng: &mut R) -> Stratum {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for s in Stratum::ALL {
        acc += pi[s.index()];
        if u < acc {
            return s;
        }
    }
    // Rounding slack: fall back to the last stratum with positive mass.
    *Stratum::ALL
        .iter()
        .rev()
        .find(|s| pi[s.index()] > 0.0)
        .unwrap_or(&Stratum::EchsAlwaysTaker)
}

/// Arm assignments with exactly `n_treated` treated, in random order.
pub(crate) fn assign_arms<R: Rng + ?Sized>(n: usize, n_treated: usize, rng: &mut R) -> Vec<Arm> {
    let mut arms: Vec<Arm> = (0..n)
        .map(|i| if i < n_treated { Arm::Treatment } else { Arm::Control })
        .collect();
    arms.shuffle(rng);
    arms
}

/// Builds individuals, potential outcomes and observed records for one site.
/// `treated_prob` gives each complier stratum's treated on-track probability.
#[allow(clippy::too_many_arguments)]
pub(crate) fn populate_site<R: Rng + ?Sized>(
    site_id: &str,
    pi: &[f64; 5],
    control_prob: f64,
    treated_prob: [f64; 2],
    covariates: &[Vec<f64>],
    n_treated: usize,
    rng: &mut R,
    records: &mut Vec<IndividualRecord>,
    schedule: &mut PotentialOutcomeSchedule,
) {
    let arms = assign_arms(covariates.len(), n_treated, rng);
    for (cov, arm) in covariates.iter().zip(arms) {
        let stratum = draw_stratum(pi, rng);
        let y0 = rng.random_bool(control_prob);
        let y1 = match stratum {
            Stratum::LowQualityComplier => rng.random_bool(treated_prob[0]),
            Stratum::HighQualityComplier => rng.random_bool(treated_prob[1]),
            _ => y0,
        };
        records.push(IndividualRecord {
            site_id: site_id.to_string(),
            arm,
            destination: stratum.destination(arm),
            outcome: if arm == Arm::Treatment { y1 } else { y0 },
            weight: 1.0,
            covariates: cov.clone(),
        });
        schedule.entries.push(ScheduleEntry {
            site_id: site_id.to_string(),
            stratum,
            y0,
            y1,
            covariates: cov.clone(),
        });
    }
}

/// Draws `K` sites: `x_k ~ U(a, b)`, `phi_k = logistic(c + s (x_k - mid) + u_k)`
/// and `ITT_s|k = ITT_s + slope_s (x_k - mid) + eps_s`, with
/// `(eps_lc, eps_hc, u) ~ N(0, sigma)`. Always-taker shares and the complier
/// share come from the base distribution. Compliers' treated outcomes are
/// Bernoulli with mean `p0 + ITT_s|k`, clipped to `[0, 1]`; the truth uses
/// the clipped effects.
pub fn generate_simple<R: Rng + ?Sized>(
    spec: &DgpSpec,
    rng: &mut R,
) -> Result<SimulatedData, SimulationError> {
    if spec.kind != DgpKind::Simple {
        return Err(SimulationError::BadSpec("expected the simple process".into()));
    }
    spec.validate()?;
    let factor = noise_factor(&spec.sigma)?;
    let base = spec.strata_base_distribution;
    let c = base[3] + base[4];
    let map = spec.confounder.map(|c| c.effect_on_phi).unwrap_or_default();
    let intercept = map.intercept.unwrap_or_else(|| logit(base[4] / c));
    let (slope_lc, slope_hc) = spec
        .confounder
        .map_or((0.0, 0.0), |c| (c.effect_on_itt_lc, c.effect_on_itt_hc));
    let range = spec.x_range();
    let p0 = spec.control_ontrack_prob;

    let mut records = Vec::new();
    let mut schedule = PotentialOutcomeSchedule::default();
    let mut sites = Vec::with_capacity(spec.sites);
    for k in 0..spec.sites {
        let site_id = format!("site{:03}", k + 1);
        let n = rng.random_range(spec.site_size.min..=spec.site_size.max);
        let x = rng.random_range(range.a..range.b);
        let xc = x - range.mid();
        let noise = draw_noise(&factor, rng);
        let phi = logistic(intercept + map.slope * xc + noise[2]);
        let itt_lc = (spec.itt_lc + slope_lc * xc + noise[0]).clamp(-p0, 1.0 - p0);
        let itt_hc = (spec.itt_hc + slope_hc * xc + noise[1]).clamp(-p0, 1.0 - p0);
        let pi = [base[0], base[1], base[2], c * (1.0 - phi), c * phi];
        let n_treated = ((n as f64 * spec.treated_fraction).round() as usize).clamp(1, n - 1);
        let covariates = vec![vec![x]; n];
        populate_site(
            &site_id,
            &pi,
            p0,
            [(p0 + itt_lc).clamp(0.0, 1.0), (p0 + itt_hc).clamp(0.0, 1.0)],
            &covariates,
            n_treated,
            rng,
            &mut records,
            &mut schedule,
        );
        sites.push(SiteTruth {
            site_id,
            n,
            n_treated,
            pi,
            phi,
            itt_lc,
            itt_hc,
            late: (1.0 - phi) * itt_lc + phi * itt_hc,
            covariates: vec![x],
        });
    }
    let names = vec!["x".to_string()];
    Ok(SimulatedData {
        dataset: StudyDataset::new(records, names.clone())?,
        schedule,
        truth: Truth::new(sites, names),
    })
}
