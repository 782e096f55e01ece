//! Site-level regressions of complier effects on the high-quality complier
//! share.
//!
//! The base model regresses `LATE_k` on `(1 - phi_k, phi_k)` without an
//! intercept, so the two slopes estimate the low- and high-quality complier
//! effects directly. Because the two regressors sum to one, the same column
//! space can be spanned by `(1, phi_k)` or `(1, 1 - phi_k)`; all three
//! parameterizations give identical effect estimates and standard errors.
//! Internally every fit is described in two-slope coordinates and the base
//! block is mapped through a 2x2 transform.
//!
//! Covariate-adjusted models append site covariates (`gamma`) and, for the
//! interaction model, `(1 - phi_k) W1_k` and `phi_k W1_k` (`delta_lc`,
//! `delta_hc`).

mod ols;

pub use ols::{ols_fit, HcKind, OlsFit, CONDITION_LIMIT};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Arm, StudyDataset};
use crate::strata::{
    dataset_site_sums, stratum_proportions, SiteMoments, SiteSums, StrataError, StratumTable,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("{sites} site(s) for {params} parameter(s)")]
    TooFewSites { sites: usize, params: usize },
    #[error("design is rank deficient in column(s) {0:?}")]
    RankDeficient(Vec<String>),
    #[error("estimated phi does not vary across sites")]
    NoPhiVariation,
    #[error("incompatible specification: {0}")]
    IncompatibleSpec(String),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("design, response and weight dimensions disagree")]
    DimensionMismatch,
    #[error("regression weights must be finite and nonnegative")]
    BadWeights,
    #[error("design or response contains non-finite values")]
    NonFinite,
    #[error("total {0} complier mass is zero")]
    ZeroTotalMass(&'static str),
    #[error("moments do not match the sites used in the fit")]
    SiteMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LateUnadjusted,
    LateAdjusted,
    LateInteraction,
    IttModel,
}

impl ModelKind {
    pub fn is_late(self) -> bool {
        !matches!(self, ModelKind::IttModel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `(1 - phi, phi)`, no intercept: coefficients `beta_lc`, `beta_hc`.
    #[default]
    TwoSlope,
    /// `(1, phi)`: intercept `beta_lc`, slope `beta_hc - beta_lc`.
    InterceptPhi,
    /// `(1, 1 - phi)`: intercept `beta_hc`, slope `beta_lc - beta_hc`.
    InterceptPhiC,
}

impl Parameterization {
    pub const ALL: [Parameterization; 3] = [
        Parameterization::TwoSlope,
        Parameterization::InterceptPhi,
        Parameterization::InterceptPhiC,
    ];

    /// `T` with `(beta_lc, beta_hc)' = T b` for this parameterization's base
    /// coefficients `b`.
    fn to_two_slope(self) -> [[f64; 2]; 2] {
        match self {
            Parameterization::TwoSlope => [[1.0, 0.0], [0.0, 1.0]],
            Parameterization::InterceptPhi => [[1.0, 0.0], [1.0, 1.0]],
            Parameterization::InterceptPhiC => [[1.0, 1.0], [1.0, 0.0]],
        }
    }

    fn from_two_slope(self) -> [[f64; 2]; 2] {
        match self {
            Parameterization::TwoSlope => [[1.0, 0.0], [0.0, 1.0]],
            Parameterization::InterceptPhi => [[1.0, 0.0], [-1.0, 1.0]],
            Parameterization::InterceptPhiC => [[0.0, 1.0], [1.0, -1.0]],
        }
    }

    fn base_names(self) -> ([&'static str; 2], [&'static str; 2]) {
        match self {
            Parameterization::TwoSlope => (["one_minus_phi", "phi"], ["beta_lc", "beta_hc"]),
            Parameterization::InterceptPhi => {
                (["intercept", "phi"], ["beta_lc", "beta_hc_minus_lc"])
            }
            Parameterization::InterceptPhiC => {
                (["intercept", "one_minus_phi"], ["beta_hc", "beta_lc_minus_hc"])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteWeighting {
    /// Every site counts once: site-average effects.
    #[default]
    Equal,
    /// Weighted least squares with estimated complier counts as weights.
    ComplierMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectTarget {
    /// Coefficient-based effects (average over sites).
    #[default]
    Site,
    /// Complier-count-weighted averages of predicted site effects.
    Population,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateRef {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub model: ModelKind,
    pub parameterization: Parameterization,
    /// Additive covariates. For the interaction model these exclude the
    /// interaction covariate.
    pub covariates: Vec<CovariateRef>,
    pub interaction: Option<CovariateRef>,
    /// Use grand-mean-centered site covariates.
    pub center: bool,
    pub hc: HcKind,
    pub site_weighting: SiteWeighting,
    pub target: EffectTarget,
}

impl DesignSpec {
    pub fn new(model: ModelKind) -> Self {
        Self {
            model,
            parameterization: Parameterization::TwoSlope,
            covariates: Vec::new(),
            interaction: None,
            center: true,
            hc: HcKind::Hc1,
            site_weighting: SiteWeighting::Equal,
            target: EffectTarget::Site,
        }
    }

    pub fn unadjusted() -> Self {
        Self::new(ModelKind::LateUnadjusted)
    }

    /// Simple adjustment for the named covariates of `available`.
    pub fn adjusted(available: &[String], covariates: &[&str]) -> Result<Self, RegressionError> {
        let mut s = Self::new(ModelKind::LateAdjusted);
        s.covariates = resolve(available, covariates)?;
        s.validate()?;
        Ok(s)
    }

    /// Interaction adjustment for `interaction`, plus additive `others`.
    pub fn interaction(
        available: &[String],
        interaction: &str,
        others: &[&str],
    ) -> Result<Self, RegressionError> {
        let mut s = Self::new(ModelKind::LateInteraction);
        s.interaction = resolve(available, &[interaction])?.pop();
        s.covariates = resolve(available, others)?
            .into_iter()
            .filter(|c| c.name != interaction)
            .collect();
        s.validate()?;
        Ok(s)
    }

    pub fn itt() -> Self {
        Self::new(ModelKind::IttModel)
    }

    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.parameterization = p;
        self
    }

    pub fn with_hc(mut self, hc: HcKind) -> Self {
        self.hc = hc;
        self
    }

    pub fn with_target(mut self, target: EffectTarget) -> Self {
        self.target = target;
        self
    }

    pub fn with_site_weighting(mut self, w: SiteWeighting) -> Self {
        self.site_weighting = w;
        self
    }

    pub fn with_center(mut self, center: bool) -> Self {
        self.center = center;
        self
    }

    pub fn validate(&self) -> Result<(), RegressionError> {
        let bad = |m: &str| Err(RegressionError::IncompatibleSpec(m.to_string()));
        match self.model {
            ModelKind::LateUnadjusted if !self.covariates.is_empty() || self.interaction.is_some() => {
                bad("the unadjusted model takes no covariates")
            }
            ModelKind::LateAdjusted if self.interaction.is_some() => {
                bad("an interaction covariate needs the interaction model")
            }
            ModelKind::LateAdjusted if self.covariates.is_empty() => {
                bad("the adjusted model needs at least one covariate")
            }
            ModelKind::LateInteraction if self.interaction.is_none() => {
                bad("the interaction model needs an interaction covariate")
            }
            ModelKind::IttModel if self.parameterization != Parameterization::TwoSlope => {
                bad("the ITT model only has the two-slope parameterization")
            }
            ModelKind::IttModel if !self.covariates.is_empty() || self.interaction.is_some() => {
                bad("the ITT model takes no covariates")
            }
            _ => Ok(()),
        }
    }

    fn n_params(&self) -> usize {
        2 + self.covariates.len() + if self.interaction.is_some() { 2 } else { 0 }
    }
}

fn resolve(available: &[String], names: &[&str]) -> Result<Vec<CovariateRef>, RegressionError> {
    names
        .iter()
        .map(|n| {
            available
                .iter()
                .position(|a| a == n)
                .map(|index| CovariateRef {
                    name: n.to_string(),
                    index,
                })
                .ok_or_else(|| RegressionError::UnknownCovariate(n.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    pub itt_lc: Effect,
    pub itt_hc: Effect,
    /// `itt_hc - itt_lc`.
    pub contrast: Effect,
}

impl Effects {
    pub fn as_array(&self) -> [Effect; 3] {
        [self.itt_lc, self.itt_hc, self.contrast]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: DesignSpec,
    pub site_ids: Vec<String>,
    pub column_names: Vec<String>,
    pub coefficient_names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Row-major HC covariance of the coefficients.
    pub vcov: Vec<Vec<f64>>,
    /// Row-major design matrix, one row per site.
    pub design: Vec<Vec<f64>>,
    pub response: Vec<f64>,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub weights_used: Vec<f64>,
    pub dof: usize,
    pub condition_number: f64,
    /// Coefficient-based effects.
    pub effects: Effects,
}

impl FitResult {
    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let p = self.coefficients.len();
        DMatrix::from_fn(p, p, |i, j| self.vcov[i][j])
    }

    pub fn design_matrix(&self) -> DMatrix<f64> {
        let p = self.coefficients.len();
        DMatrix::from_fn(self.design.len(), p, |i, j| self.design[i][j])
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficient_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }

    /// `a'b` with standard error `sqrt(a'Va)`.
    pub fn linear_functional(&self, a: &[f64]) -> Effect {
        let v = self.vcov_matrix();
        let av = DVector::from_column_slice(a);
        let estimate = av.dot(&DVector::from_column_slice(&self.coefficients));
        let var = (av.transpose() * v * &av)[(0, 0)];
        Effect {
            estimate,
            se: var.max(0.0).sqrt(),
        }
    }
}

/// Maps a functional written against two-slope base coefficients onto the
/// coefficients of `p`: `a_p = T' a_two` on the base block.
fn functional_in(p: Parameterization, a_two: &[f64]) -> Vec<f64> {
    let t = p.to_two_slope();
    let mut a = a_two.to_vec();
    a[0] = t[0][0] * a_two[0] + t[1][0] * a_two[1];
    a[1] = t[0][1] * a_two[0] + t[1][1] * a_two[1];
    a
}

fn coefficient_effects(result: &FitResult) -> Effects {
    let p = result.coefficients.len();
    let param = result.spec.parameterization;
    let unit = |lc: f64, hc: f64| {
        let mut a = vec![0.0; p];
        a[0] = lc;
        a[1] = hc;
        functional_in(param, &a)
    };
    Effects {
        itt_lc: result.linear_functional(&unit(1.0, 0.0)),
        itt_hc: result.linear_functional(&unit(0.0, 1.0)),
        contrast: result.linear_functional(&unit(-1.0, 1.0)),
    }
}

fn covariate_value(m: &SiteMoments, c: &CovariateRef, center: bool) -> f64 {
    if center {
        m.w_centered[c.index]
    } else {
        m.w_site[c.index]
    }
}

struct Design {
    x: DMatrix<f64>,
    y: Vec<f64>,
    columns: Vec<String>,
    coefficients: Vec<String>,
}

fn build_design(moments: &[&SiteMoments], spec: &DesignSpec) -> Result<Design, RegressionError> {
    let k = moments.len();
    let p = spec.n_params();
    for m in moments {
        for c in spec.covariates.iter().chain(&spec.interaction) {
            if c.index >= m.w_site.len() {
                return Err(RegressionError::UnknownCovariate(c.name.clone()));
            }
        }
    }
    let mut x = DMatrix::zeros(k, p);
    let mut y = Vec::with_capacity(k);
    let (mut columns, mut coefficients): (Vec<String>, Vec<String>) = if spec.model.is_late() {
        let (c, b) = spec.parameterization.base_names();
        (c.iter().map(|s| s.to_string()).collect(), b.iter().map(|s| s.to_string()).collect())
    } else {
        (
            vec!["pi_lc".into(), "pi_hc".into()],
            vec!["beta_lc".into(), "beta_hc".into()],
        )
    };
    for c in &spec.covariates {
        columns.push(c.name.clone());
        coefficients.push(format!("gamma_{}", c.name));
    }
    if let Some(c) = &spec.interaction {
        columns.push(format!("one_minus_phi_x_{}", c.name));
        columns.push(format!("phi_x_{}", c.name));
        coefficients.push(format!("delta_lc_{}", c.name));
        coefficients.push(format!("delta_hc_{}", c.name));
    }
    let t = spec.parameterization.to_two_slope();
    for (i, m) in moments.iter().enumerate() {
        if spec.model.is_late() {
            let two = [1.0 - m.phi, m.phi];
            // X_p = X_two T
            x[(i, 0)] = two[0] * t[0][0] + two[1] * t[1][0];
            x[(i, 1)] = two[0] * t[0][1] + two[1] * t[1][1];
            y.push(m.late);
        } else {
            x[(i, 0)] = m.pi_lc;
            x[(i, 1)] = m.pi_hc;
            y.push(m.itt);
        }
        let mut j = 2;
        for c in &spec.covariates {
            x[(i, j)] = covariate_value(m, c, spec.center);
            j += 1;
        }
        if let Some(c) = &spec.interaction {
            let w1 = covariate_value(m, c, spec.center);
            x[(i, j)] = (1.0 - m.phi) * w1;
            x[(i, j + 1)] = m.phi * w1;
        }
    }
    Ok(Design {
        x,
        y,
        columns,
        coefficients,
    })
}

/// Fits any [`ModelKind`]. Degenerate sites are skipped; the sites actually
/// used are listed in `site_ids`.
pub fn fit_model(moments: &[SiteMoments], spec: &DesignSpec) -> Result<FitResult, RegressionError> {
    spec.validate()?;
    let used: Vec<&SiteMoments> = moments.iter().filter(|m| !m.degenerate).collect();
    let p = spec.n_params();
    if used.len() < p {
        return Err(RegressionError::TooFewSites {
            sites: used.len(),
            params: p,
        });
    }
    if spec.model.is_late() {
        let (lo, hi) = used
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
                (lo.min(m.phi), hi.max(m.phi))
            });
        if !(hi - lo > 1e-12) {
            return Err(RegressionError::NoPhiVariation);
        }
    }
    let design = build_design(&used, spec)?;
    let weights: Vec<f64> = match spec.site_weighting {
        SiteWeighting::Equal => vec![1.0; used.len()],
        SiteWeighting::ComplierMass => used.iter().map(|m| m.complier_mass).collect(),
    };
    let w_arg = (spec.site_weighting == SiteWeighting::ComplierMass).then_some(weights.as_slice());
    let fit = ols_fit(&design.x, &design.y, w_arg, spec.hc, &design.columns)?;
    let p = fit.coefficients.len();
    let mut result = FitResult {
        spec: spec.clone(),
        site_ids: used.iter().map(|m| m.site_id.clone()).collect(),
        column_names: design.columns,
        coefficient_names: design.coefficients,
        coefficients: fit.coefficients.iter().copied().collect(),
        vcov: (0..p)
            .map(|i| (0..p).map(|j| fit.vcov[(i, j)]).collect())
            .collect(),
        design: (0..design.x.nrows())
            .map(|i| design.x.row(i).iter().copied().collect())
            .collect(),
        response: design.y,
        residuals: fit.residuals.iter().copied().collect(),
        fitted: fit.fitted.iter().copied().collect(),
        weights_used: weights,
        dof: fit.dof,
        condition_number: fit.condition_number,
        effects: Effects {
            itt_lc: Effect { estimate: 0.0, se: 0.0 },
            itt_hc: Effect { estimate: 0.0, se: 0.0 },
            contrast: Effect { estimate: 0.0, se: 0.0 },
        },
    };
    result.effects = coefficient_effects(&result);
    Ok(result)
}

/// LATE-scale models: unadjusted, simple-adjusted and interaction-adjusted.
pub fn fit_late(moments: &[SiteMoments], spec: &DesignSpec) -> Result<FitResult, RegressionError> {
    if !spec.model.is_late() {
        return Err(RegressionError::IncompatibleSpec(
            "fit_late needs a LATE model".into(),
        ));
    }
    fit_model(moments, spec)
}

/// Zero-intercept regression of site ITT on the two complier shares.
pub fn fit_itt(moments: &[SiteMoments], spec: &DesignSpec) -> Result<FitResult, RegressionError> {
    if spec.model != ModelKind::IttModel {
        return Err(RegressionError::IncompatibleSpec(
            "fit_itt needs the ITT model".into(),
        ));
    }
    fit_model(moments, spec)
}

/// Re-expresses a LATE fit in another parameterization by a linear map of
/// coefficients and covariance. Effects are unchanged.
pub fn reparameterize(result: &FitResult, to: Parameterization) -> Result<FitResult, RegressionError> {
    let from = result.spec.parameterization;
    if !result.spec.model.is_late() && to != from {
        return Err(RegressionError::IncompatibleSpec(
            "the ITT model cannot be reparameterized".into(),
        ));
    }
    let p = result.coefficients.len();
    let tf = from.to_two_slope();
    let ti = to.from_two_slope();
    // M = T_to^-1 T_from on the base block, identity elsewhere.
    let mut m = DMatrix::identity(p, p);
    for i in 0..2 {
        for j in 0..2 {
            m[(i, j)] = ti[i][0] * tf[0][j] + ti[i][1] * tf[1][j];
        }
    }
    let m_inv = m.clone().try_inverse().expect("parameterization maps are invertible");
    let b = &m * DVector::from_column_slice(&result.coefficients);
    let v = &m * result.vcov_matrix() * m.transpose();
    let x = result.design_matrix() * m_inv;

    let mut out = result.clone();
    out.spec.parameterization = to;
    let (cols, coefs) = to.base_names();
    for i in 0..2 {
        out.column_names[i] = cols[i].to_string();
        out.coefficient_names[i] = coefs[i].to_string();
    }
    out.coefficients = b.iter().copied().collect();
    out.vcov = (0..p).map(|i| (0..p).map(|j| v[(i, j)]).collect()).collect();
    out.design = (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect();
    out.effects = coefficient_effects(&out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationEffects {
    pub itt_lc: Effect,
    pub itt_hc: Effect,
    pub contrast: Effect,
    /// `sum_k (1 - phi_k) N_k`.
    pub lc_mass: f64,
    /// `sum_k phi_k N_k`.
    pub hc_mass: f64,
}

impl PopulationEffects {
    pub fn effects(&self) -> Effects {
        Effects {
            itt_lc: self.itt_lc,
            itt_hc: self.itt_hc,
            contrast: self.contrast,
        }
    }
}

/// Complier-count-weighted averages of the predicted site effects
/// `beta_s + gamma W_k + delta_s W1_k`, with weights `(1 - phi_k) N_k` for
/// low-quality and `phi_k N_k` for high-quality compliers. Standard errors
/// come from the quadratic form of the induced functional in the fit's
/// covariance.
pub fn population_weighted_effects(
    result: &FitResult,
    moments: &[SiteMoments],
) -> Result<PopulationEffects, RegressionError> {
    let used: Vec<&SiteMoments> = moments.iter().filter(|m| !m.degenerate).collect();
    if used.len() != result.site_ids.len()
        || used.iter().zip(&result.site_ids).any(|(m, id)| &m.site_id != id)
    {
        return Err(RegressionError::SiteMismatch);
    }
    let spec = &result.spec;
    let p = result.coefficients.len();
    let mut a_lc = vec![0.0; p];
    let mut a_hc = vec![0.0; p];
    let (mut lc_mass, mut hc_mass) = (0.0, 0.0);
    for m in &used {
        let w_lc = (1.0 - m.phi) * m.complier_mass;
        let w_hc = m.phi * m.complier_mass;
        lc_mass += w_lc;
        hc_mass += w_hc;
        a_lc[0] += w_lc;
        a_hc[1] += w_hc;
        let mut j = 2;
        for c in &spec.covariates {
            let w = covariate_value(m, c, spec.center);
            a_lc[j] += w_lc * w;
            a_hc[j] += w_hc * w;
            j += 1;
        }
        if let Some(c) = &spec.interaction {
            let w1 = covariate_value(m, c, spec.center);
            a_lc[j] += w_lc * w1;
            a_hc[j + 1] += w_hc * w1;
        }
    }
    if !(lc_mass > 0.0) {
        return Err(RegressionError::ZeroTotalMass("low-quality"));
    }
    if !(hc_mass > 0.0) {
        return Err(RegressionError::ZeroTotalMass("high-quality"));
    }
    a_lc.iter_mut().for_each(|v| *v /= lc_mass);
    a_hc.iter_mut().for_each(|v| *v /= hc_mass);
    let a_diff: Vec<f64> = a_hc.iter().zip(&a_lc).map(|(h, l)| h - l).collect();
    let map = |a: &[f64]| {
        if spec.model.is_late() {
            functional_in(spec.parameterization, a)
        } else {
            a.to_vec()
        }
    };
    Ok(PopulationEffects {
        itt_lc: result.linear_functional(&map(&a_lc)),
        itt_hc: result.linear_functional(&map(&a_hc)),
        contrast: result.linear_functional(&map(&a_diff)),
        lc_mass,
        hc_mass,
    })
}

/// Effects for the fit's own [`EffectTarget`].
pub fn target_effects(result: &FitResult, moments: &[SiteMoments]) -> Result<Effects, RegressionError> {
    match result.spec.target {
        EffectTarget::Site => Ok(result.effects),
        EffectTarget::Population => population_weighted_effects(result, moments).map(|p| p.effects()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub overall_itt: f64,
    pub strata: StratumTable,
    pub complier_share: f64,
    pub phi: Option<f64>,
    pub late_defined: bool,
    pub overall_late: Option<f64>,
    /// `(1 - phi) itt_lc + phi itt_hc` from supplied effects.
    pub reconstruction: Option<f64>,
    pub difference: Option<f64>,
}

/// Pooled ITT, the pooled complier share and LATE, and the reconstruction
/// of that LATE from principal effects `(itt_lc, itt_hc)` when given.
pub fn overall_decomposition_check(
    dataset: &StudyDataset,
    effects: Option<(f64, f64)>,
    weighted: bool,
) -> Result<DecompositionReport, StrataError> {
    let mut pooled = SiteSums::new(dataset.covariate_names().len());
    for s in dataset_site_sums(dataset, weighted) {
        for (acc, a) in pooled.arms.iter_mut().zip(s.arms) {
            acc.weight += a.weight;
            acc.count += a.count;
            acc.outcome += a.outcome;
            for d in 0..3 {
                acc.dest[d] += a.dest[d];
            }
        }
    }
    let strata = stratum_proportions(&pooled.take_up()?);
    let overall_itt =
        pooled.arm_mean_outcome(Arm::Treatment) - pooled.arm_mean_outcome(Arm::Control);
    let complier_share = strata.complier_share();
    let phi = strata.phi();
    let late_defined = complier_share > crate::strata::DEFAULT_DEGENERATE_THRESHOLD;
    let overall_late = late_defined.then(|| overall_itt / complier_share);
    let reconstruction = match (phi, effects) {
        (Some(phi), Some((lc, hc))) => Some((1.0 - phi) * lc + phi * hc),
        _ => None,
    };
    let difference = match (overall_late, reconstruction) {
        (Some(l), Some(r)) => Some(r - l),
        _ => None,
    };
    Ok(DecompositionReport {
        overall_itt,
        strata,
        complier_share,
        phi,
        late_defined,
        overall_late,
        reconstruction,
        difference,
    })
}

#[cfg(test)]
mod tests;
