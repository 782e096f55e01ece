//! Template-resampling process with logistic outcome model.
//!
//! Sites are drawn with replacement from the template and keep their
//! students, reading scores and arm counts. Strata follow the template
//! site's clipped empirical table; with a confounder, `phi` is replaced by
//! `logistic(a + b W_k)` for the centered site reading mean `W_k`. Control
//! outcomes are on track with probability `p0`; treated compliers of type
//! `s` with probability `logistic(alpha_s + lambda_s W_k)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::simple::populate_site;
use super::{
    logistic, logit, DgpKind, DgpSpec, PotentialOutcomeSchedule, SimulatedData,
    SimulationError, SiteTruth, Truth,
};
use crate::data::{IndividualRecord, StudyDataset};
use crate::strata::{all_site_moments, MomentOptions};

/// Fitted intercepts that hit the target population effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedIntercepts {
    pub alpha_lc: f64,
    pub alpha_hc: f64,
    /// Logit intercept of the confounder map for `phi`.
    pub phi_intercept: f64,
}

struct TemplateSite {
    id: String,
    records: Vec<usize>,
    n_treated: usize,
    pi: [f64; 5],
    w_centered: f64,
    w_site: f64,
}

struct TemplateInfo {
    sites: Vec<TemplateSite>,
    read: usize,
}

fn template_info(template: &StudyDataset) -> Result<TemplateInfo, SimulationError> {
    let read = template
        .covariate_index("read")
        .ok_or_else(|| SimulationError::BadTemplate("missing covariate `read`".into()))?;
    let opts = MomentOptions {
        weighted: false,
        ..MomentOptions::default()
    };
    let set = all_site_moments(template, false, &opts)?;
    if !set.dropped.is_empty() {
        return Err(SimulationError::BadTemplate(format!(
            "site `{}` lacks an arm",
            set.dropped[0].site_id
        )));
    }
    let sites = set
        .moments
        .iter()
        .map(|m| {
            let records = template.site_index()[m.site_id.as_str()].clone();
            TemplateSite {
                id: m.site_id.clone(),
                n_treated: records
                    .iter()
                    .filter(|&&i| template.records()[i].arm == crate::data::Arm::Treatment)
                    .count(),
                records,
                pi: m.strata.pi,
                w_centered: m.w_centered[read],
                w_site: m.w_site[read],
            }
        })
        .collect();
    Ok(TemplateInfo { sites, read })
}

impl TemplateInfo {
    fn phi_intercept(&self, spec: &DgpSpec) -> f64 {
        if let Some(i) = spec.confounder.and_then(|c| c.effect_on_phi.intercept) {
            return i;
        }
        let (num, den) = self.sites.iter().fold((0.0, 0.0), |(a, b), s| {
            let n = s.records.len() as f64;
            (a + n * s.pi[4], b + n * (s.pi[3] + s.pi[4]))
        });
        logit((num / den).clamp(1e-6, 1.0 - 1e-6))
    }

    /// Stratum table of a template site under `spec`.
    fn strata(&self, site: &TemplateSite, spec: &DgpSpec, phi_intercept: f64) -> [f64; 5] {
        match spec.confounder {
            None => site.pi,
            Some(c) => {
                let share = site.pi[3] + site.pi[4];
                let phi = logistic(phi_intercept + c.effect_on_phi.slope * site.w_centered);
                [site.pi[0], site.pi[1], site.pi[2], share * (1.0 - phi), share * phi]
            }
        }
    }
}

/// Intercepts `alpha_s` such that the complier-weighted population effect
/// over template sites equals the target. Closed form without a
/// confounder; bisection otherwise.
pub fn calibrate_intercepts(
    template: &StudyDataset,
    spec: &DgpSpec,
) -> Result<CalibratedIntercepts, SimulationError> {
    let info = template_info(template)?;
    calibrate(&info, spec)
}

fn calibrate(info: &TemplateInfo, spec: &DgpSpec) -> Result<CalibratedIntercepts, SimulationError> {
    let p0 = spec.control_ontrack_prob;
    let phi_intercept = info.phi_intercept(spec);
    let (lam_lc, lam_hc) = spec
        .confounder
        .map_or((0.0, 0.0), |c| (c.effect_on_itt_lc, c.effect_on_itt_hc));
    let solve = |s: usize, target: f64, lambda: f64| -> Result<f64, SimulationError> {
        if lambda == 0.0 {
            return Ok(logit(p0 + target));
        }
        let pts: Vec<(f64, f64)> = info
            .sites
            .iter()
            .map(|site| {
                let pi = info.strata(site, spec, phi_intercept);
                (pi[s] * site.records.len() as f64, site.w_centered)
            })
            .collect();
        let den: f64 = pts.iter().map(|p| p.0).sum();
        if !(den > 0.0) {
            return Err(SimulationError::BadTemplate("no complier mass".into()));
        }
        let effect = |alpha: f64| {
            pts.iter()
                .map(|(w, x)| w * (logistic(alpha + lambda * x) - p0))
                .sum::<f64>()
                / den
        };
        let (mut lo, mut hi) = (-30.0, 30.0);
        if effect(lo) > target || effect(hi) < target {
            return Err(SimulationError::BadSpec(format!("effect {target} is unreachable")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if effect(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    Ok(CalibratedIntercepts {
        alpha_lc: solve(3, spec.itt_lc, lam_lc)?,
        alpha_hc: solve(4, spec.itt_hc, lam_hc)?,
        phi_intercept,
    })
}

pub fn generate_calibrated<R: Rng + ?Sized>(
    template: &StudyDataset,
    spec: &DgpSpec,
    rng: &mut R,
) -> Result<SimulatedData, SimulationError> {
    if spec.kind != DgpKind::Calibrated {
        return Err(SimulationError::BadSpec("expected the calibrated process".into()));
    }
    spec.validate()?;
    let info = template_info(template)?;
    let cal = calibrate(&info, spec)?;
    let (lam_lc, lam_hc) = spec
        .confounder
        .map_or((0.0, 0.0), |c| (c.effect_on_itt_lc, c.effect_on_itt_hc));
    let p0 = spec.control_ontrack_prob;

    let mut records: Vec<IndividualRecord> = Vec::new();
    let mut schedule = PotentialOutcomeSchedule::default();
    let mut sites = Vec::with_capacity(spec.sites);
    for k in 0..spec.sites {
        let t = &info.sites[rng.random_range(0..info.sites.len())];
        let site_id = format!("s{:02}-{}", k + 1, t.id);
        let pi = info.strata(t, spec, cal.phi_intercept);
        let q_lc = logistic(cal.alpha_lc + lam_lc * t.w_centered);
        let q_hc = logistic(cal.alpha_hc + lam_hc * t.w_centered);
        let covariates: Vec<Vec<f64>> = t
            .records
            .iter()
            .map(|&i| template.records()[i].covariates.clone())
            .collect();
        populate_site(
            &site_id,
            &pi,
            p0,
            [q_lc, q_hc],
            &covariates,
            t.n_treated,
            rng,
            &mut records,
            &mut schedule,
        );
        let share = pi[3] + pi[4];
        let phi = if share > 0.0 { pi[4] / share } else { f64::NAN };
        let (itt_lc, itt_hc) = (q_lc - p0, q_hc - p0);
        let mut site_cov = vec![0.0; template.covariate_names().len()];
        for c in &covariates {
            for (acc, v) in site_cov.iter_mut().zip(c) {
                *acc += v / covariates.len() as f64;
            }
        }
        debug_assert!((site_cov[info.read] - t.w_site).abs() < 1e-9);
        sites.push(SiteTruth {
            site_id,
            n: t.records.len(),
            n_treated: t.n_treated,
            pi,
            phi,
            itt_lc,
            itt_hc,
            late: (1.0 - phi) * itt_lc + phi * itt_hc,
            covariates: site_cov,
        });
    }
    let names = template.covariate_names().to_vec();
    Ok(SimulatedData {
        dataset: StudyDataset::new(records, names.clone())?,
        schedule,
        truth: Truth::new(sites, names),
    })
}
