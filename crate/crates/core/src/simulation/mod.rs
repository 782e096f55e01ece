//! Data-generating processes with known truth, and a Monte Carlo harness
//! comparing estimators against it.
//!
//! Two generators are provided. The simple process draws sites from a
//! correctly specified linear model with an optional confounder `x`. The
//! calibrated process resamples sites of a template dataset and generates
//! outcomes from a logistic model in stratum and the site reading score.

mod calibrated;
mod monte_carlo;
mod simple;
mod template;

pub use calibrated::{calibrate_intercepts, generate_calibrated, CalibratedIntercepts};
pub use monte_carlo::{
    run_monte_carlo, slope_test_level, Adjustment, CellMetrics, EffectName, Estimator,
    LevelCheck, MonteCarloConfig, MonteCarloReport,
};
pub use simple::generate_simple;
pub use template::{
    synthetic_template, table1_dataset, TABLE1_CONTROL, TABLE1_SITES, TABLE1_TREATED, TEMPLATE_CONTROL,
    TEMPLATE_SEED, TEMPLATE_SITES, TEMPLATE_TREATED,
};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, StudyDataset, Stratum};
use crate::strata::{SiteMoments, StrataError, StratumTable, DEFAULT_DEGENERATE_THRESHOLD};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid DGP specification: {0}")]
    BadSpec(String),
    #[error("invalid template: {0}")]
    BadTemplate(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Strata(#[from] StrataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    Simple,
    Calibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformRange {
    pub a: f64,
    pub b: f64,
}

impl UniformRange {
    pub fn mid(&self) -> f64 {
        (self.a + self.b) / 2.0
    }
}

/// Inclusive range of individuals per site (simple process).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteSizeRange {
    pub min: usize,
    pub max: usize,
}

/// Monotone logistic map from the confounder to `phi`:
/// `phi = logistic(intercept + slope * x + u)`, where `x` is centered and `u`
/// is the site's noise draw. A missing intercept means `logit` of the base
/// high-quality complier share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PhiMap {
    #[serde(default)]
    pub intercept: Option<f64>,
    #[serde(default)]
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confounder {
    #[serde(default)]
    pub effect_on_phi: PhiMap,
    /// Slope of the low-quality complier effect in the confounder (simple)
    /// or logit coefficient on the centered site reading score (calibrated).
    pub effect_on_itt_lc: f64,
    pub effect_on_itt_hc: f64,
    /// Confounder distribution for the simple process.
    #[serde(default)]
    pub distribution: Option<UniformRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    /// Number of sites `K`.
    pub sites: usize,
    /// Site sizes for the simple process; the calibrated process keeps the
    /// template's sizes.
    #[serde(default = "default_site_size")]
    pub site_size: SiteSizeRange,
    /// Share of each simple-process site assigned to treatment.
    #[serde(default = "default_treated_fraction")]
    pub treated_fraction: f64,
    /// Target population effect for low-quality compliers (probability scale).
    pub itt_lc: f64,
    pub itt_hc: f64,
    #[serde(default)]
    pub confounder: Option<Confounder>,
    #[serde(default = "default_control_prob")]
    pub control_ontrack_prob: f64,
    /// `(eat, lat, hat, lc, hc)` shares for the simple process.
    #[serde(default = "default_strata")]
    pub strata_base_distribution: [f64; 5],
    /// Covariance of `(eps_lc, eps_hc, u_phi)`: site effect noise and logit
    /// noise in `phi`. Nonzero `[2][0]` or `[2][1]` entries break the
    /// zero-correlation assumption.
    #[serde(default)]
    pub sigma: [[f64; 3]; 3],
    /// Range of the simple-process confounder when no confounder is active.
    #[serde(default = "default_x_range")]
    pub covariate_range: UniformRange,
    #[serde(default)]
    pub seed: u64,
}

fn default_site_size() -> SiteSizeRange {
    SiteSizeRange { min: 60, max: 140 }
}
fn default_treated_fraction() -> f64 {
    0.58
}
fn default_control_prob() -> f64 {
    0.5
}
fn default_strata() -> [f64; 5] {
    [0.027, 0.123, 0.024, 0.726, 0.100]
}
fn default_x_range() -> UniformRange {
    UniformRange { a: 0.0, b: 1.0 }
}

impl DgpSpec {
    pub fn simple(sites: usize, itt_lc: f64, itt_hc: f64) -> Self {
        Self {
            kind: DgpKind::Simple,
            sites,
            site_size: default_site_size(),
            treated_fraction: default_treated_fraction(),
            itt_lc,
            itt_hc,
            confounder: None,
            control_ontrack_prob: default_control_prob(),
            strata_base_distribution: default_strata(),
            sigma: [[0.0; 3]; 3],
            covariate_range: default_x_range(),
            seed: 0,
        }
    }

    /// Calibrated process over the bundled template's 38 sites.
    pub fn calibrated(itt_lc: f64, itt_hc: f64) -> Self {
        Self {
            kind: DgpKind::Calibrated,
            sites: TEMPLATE_SITES,
            ..Self::simple(TEMPLATE_SITES, itt_lc, itt_hc)
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::BadSpec(m));
        if self.sites < 2 {
            return bad("at least 2 sites".into());
        }
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !prob(self.control_ontrack_prob) {
            return bad("control_ontrack_prob must lie in [0, 1]".into());
        }
        if !(self.treated_fraction > 0.0 && self.treated_fraction < 1.0) {
            return bad("treated_fraction must lie in (0, 1)".into());
        }
        if self.itt_lc.abs() > 1.0 || self.itt_hc.abs() > 1.0 {
            return bad("effects must lie in [-1, 1]".into());
        }
        if self.kind == DgpKind::Calibrated
            && !(self.control_ontrack_prob + self.itt_lc.min(self.itt_hc) > 0.0
                && self.control_ontrack_prob + self.itt_lc.max(self.itt_hc) < 1.0)
        {
            return bad("effects must keep treated probabilities inside (0, 1)".into());
        }
        let d = &self.strata_base_distribution;
        if d.iter().any(|v| !prob(*v)) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("strata_base_distribution must be probabilities summing to 1".into());
        }
        if d[3] + d[4] <= 0.0 {
            return bad("complier share must be positive".into());
        }
        if self.kind == DgpKind::Simple {
            if self.site_size.min < 2 || self.site_size.max < self.site_size.min {
                return bad("site_size needs 2 <= min <= max".into());
            }
            let r = self.confounder.and_then(|c| c.distribution).unwrap_or(self.covariate_range);
            if !(r.b > r.a) {
                return bad("uniform range needs b > a".into());
            }
        }
        noise_factor(&self.sigma)?;
        Ok(())
    }

    /// Confounder range for the simple process.
    pub(crate) fn x_range(&self) -> UniformRange {
        self.confounder
            .and_then(|c| c.distribution)
            .unwrap_or(self.covariate_range)
    }
}

/// `L` with `L L' = sigma`; fails unless `sigma` is symmetric PSD.
pub(crate) fn noise_factor(sigma: &[[f64; 3]; 3]) -> Result<Matrix3<f64>, SimulationError> {
    let m = Matrix3::from_fn(|i, j| sigma[i][j]);
    if (m - m.transpose()).amax() > 1e-12 {
        return Err(SimulationError::BadSpec("sigma must be symmetric".into()));
    }
    let eig = SymmetricEigen::new(m);
    let scale = m.amax().max(1e-300);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(SimulationError::BadSpec("sigma must be positive semidefinite".into()));
    }
    let root = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(eig.eigenvectors * root)
}

pub(crate) fn draw_noise<R: Rng + ?Sized>(factor: &Matrix3<f64>, rng: &mut R) -> Vector3<f64> {
    let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    factor * z
}

pub(crate) fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One individual's principal stratum and both potential outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub site_id: String,
    pub stratum: Stratum,
    pub y0: bool,
    pub y1: bool,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PotentialOutcomeSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl PotentialOutcomeSchedule {
    /// Always takers have identical potential outcomes.
    pub fn exclusion_restriction_holds(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.stratum.is_complier() || e.y0 == e.y1)
    }
}

/// Generating parameters of one simulated site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub site_id: String,
    pub n: usize,
    pub n_treated: usize,
    /// Stratum probabilities `(eat, lat, hat, lc, hc)`.
    pub pi: [f64; 5],
    pub phi: f64,
    pub itt_lc: f64,
    pub itt_hc: f64,
    pub late: f64,
    /// Site means of the individual covariates.
    pub covariates: Vec<f64>,
}

impl SiteTruth {
    pub fn complier_share(&self) -> f64 {
        self.pi[3] + self.pi[4]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub sites: Vec<SiteTruth>,
    pub covariate_names: Vec<String>,
    /// `sum_k pi_lc|k n_k ITT_lc|k / sum_k pi_lc|k n_k`.
    pub itt_lc: f64,
    pub itt_hc: f64,
}

impl Truth {
    pub(crate) fn new(sites: Vec<SiteTruth>, covariate_names: Vec<String>) -> Self {
        let pop = |s: usize, f: fn(&SiteTruth) -> f64| {
            let (num, den) = sites.iter().fold((0.0, 0.0), |(a, b), t| {
                let w = t.pi[s] * t.n as f64;
                (a + w * f(t), b + w)
            });
            if den > 0.0 {
                num / den
            } else {
                f64::NAN
            }
        };
        let itt_lc = pop(3, |t| t.itt_lc);
        let itt_hc = pop(4, |t| t.itt_hc);
        Self {
            sites,
            covariate_names,
            itt_lc,
            itt_hc,
        }
    }

    /// Individual-weighted grand means of the site covariates.
    pub fn grand_means(&self) -> Vec<f64> {
        let n: f64 = self.sites.iter().map(|s| s.n as f64).sum();
        (0..self.covariate_names.len())
            .map(|j| self.sites.iter().map(|s| s.n as f64 * s.covariates[j]).sum::<f64>() / n)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: StudyDataset,
    pub schedule: PotentialOutcomeSchedule,
    pub truth: Truth,
}

/// Site moments built from the generating parameters instead of estimates.
pub fn oracle_moments(truth: &Truth) -> Vec<SiteMoments> {
    let grand = truth.grand_means();
    truth
        .sites
        .iter()
        .map(|s| {
            let share = s.complier_share();
            let clipped = [false; 5];
            SiteMoments {
                site_id: s.site_id.clone(),
                late: s.late,
                phi: s.phi,
                itt: share * s.late,
                pi_lc: s.pi[3],
                pi_hc: s.pi[4],
                complier_share: share,
                complier_mass: share * s.n as f64,
                w_site: s.covariates.clone(),
                w_centered: s.covariates.iter().zip(&grand).map(|(w, g)| w - g).collect(),
                n_treated: s.n_treated as f64,
                n_control: (s.n - s.n_treated) as f64,
                degenerate: share <= DEFAULT_DEGENERATE_THRESHOLD,
                strata: StratumTable {
                    pi: s.pi,
                    raw: s.pi,
                    clipped,
                },
            }
        })
        .collect()
}

/// Dispatches on `spec.kind`. The calibrated process needs a template.
pub fn generate<R: Rng + ?Sized>(
    spec: &DgpSpec,
    template: Option<&StudyDataset>,
    rng: &mut R,
) -> Result<SimulatedData, SimulationError> {
    match spec.kind {
        DgpKind::Simple => generate_simple(spec, rng),
        DgpKind::Calibrated => {
            let t = template.ok_or_else(|| SimulationError::BadTemplate("no template given".into()))?;
            generate_calibrated(t, spec, rng)
        }
    }
}

#[cfg(test)]
mod tests;
