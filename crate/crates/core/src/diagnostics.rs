//! Residual checks for the assumption that site effects are uncorrelated
//! with the high-quality complier share, plus plot-ready site tables.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::regression::{ols_fit, FitResult, HcKind, RegressionError};
use crate::strata::SiteMoments;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("{sites} site(s) for {params} parameter(s); studentized residuals need K > p + 1")]
    TooFewSites { sites: usize, params: usize },
    #[error("slope test needs at least 3 points with varying phi")]
    DegenerateSlopeTest,
    #[error("residuals and phi have different lengths")]
    LengthMismatch,
    #[error("site `{0}` has no moments")]
    UnknownSite(String),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Studentization {
    /// `sqrt(w) e / (s sqrt(1 - h))` with the full-sample `s`.
    Internal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeTest {
    pub intercept: f64,
    pub slope: f64,
    /// HC1 standard error of the slope.
    pub slope_se: f64,
    pub t: f64,
    pub critical_value: f64,
    pub violation: bool,
}

/// OLS of `residuals` on `(1, phi)` with an HC1 slope standard error. A
/// violation is flagged when `|t|` exceeds the two-sided 5% normal critical
/// value.
pub fn slope_test(residuals: &[f64], phi: &[f64]) -> Result<SlopeTest, DiagnosticsError> {
    let k = residuals.len();
    if phi.len() != k {
        return Err(DiagnosticsError::LengthMismatch);
    }
    let (lo, hi) = phi
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if k < 3 || !(hi - lo > 1e-12) {
        return Err(DiagnosticsError::DegenerateSlopeTest);
    }
    let x = DMatrix::from_fn(k, 2, |i, j| if j == 0 { 1.0 } else { phi[i] });
    let fit = ols_fit(&x, residuals, None, HcKind::Hc1, &["intercept".into(), "phi".into()])?;
    let slope = fit.coefficients[1];
    let slope_se = fit.vcov[(1, 1)].max(0.0).sqrt();
    let t = slope / slope_se;
    let critical_value = Normal::standard().inverse_cdf(0.975);
    Ok(SlopeTest {
        intercept: fit.coefficients[0],
        slope,
        slope_se,
        t,
        critical_value,
        violation: t.abs() > critical_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiBin {
    pub label: String,
    pub sites: usize,
    pub residual_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    pub variant: Studentization,
    pub site_ids: Vec<String>,
    pub phi: Vec<f64>,
    pub response: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub studentized: Vec<f64>,
    pub leverage: Vec<f64>,
    /// Weighted mean of the raw residuals.
    pub mean_residual: f64,
    pub slope: SlopeTest,
    pub bins: Vec<PhiBin>,
    /// Descriptive only; spread differences are not treated as violations.
    pub heteroskedasticity_note: String,
}

fn sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn phi_bins(phi: &[f64], r: &[f64]) -> Vec<PhiBin> {
    let groups: [(&str, fn(f64) -> bool); 3] = [
        ("phi = 0", |p| p <= 1e-12),
        ("0 < phi <= 0.5", |p| p > 1e-12 && p <= 0.5),
        ("0.5 < phi <= 1", |p| p > 0.5),
    ];
    groups
        .iter()
        .map(|(label, f)| {
            let v: Vec<f64> = phi.iter().zip(r).filter(|(p, _)| f(**p)).map(|(_, r)| *r).collect();
            PhiBin {
                label: label.to_string(),
                sites: v.len(),
                residual_sd: sd(&v),
            }
        })
        .collect()
}

fn note(bins: &[PhiBin]) -> String {
    bins.iter()
        .map(|b| match b.residual_sd {
            Some(s) => format!("{}: {} sites, residual sd {:.3}", b.label, b.sites, s),
            None => format!("{}: {} sites", b.label, b.sites),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Internally studentized residuals of a fit and the slope test of those
/// residuals on the estimated `phi`.
pub fn residual_diagnostics(
    result: &FitResult,
    moments: &[SiteMoments],
) -> Result<ResidualDiagnostics, DiagnosticsError> {
    let k = result.response.len();
    let p = result.coefficients.len();
    if k <= p + 1 {
        return Err(DiagnosticsError::TooFewSites { sites: k, params: p });
    }
    let phi: Vec<f64> = result
        .site_ids
        .iter()
        .map(|id| {
            moments
                .iter()
                .find(|m| &m.site_id == id)
                .map(|m| m.phi)
                .ok_or_else(|| DiagnosticsError::UnknownSite(id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let x = result.design_matrix();
    let w = &result.weights_used;
    let mut gram = DMatrix::zeros(p, p);
    for i in 0..k {
        let row = x.row(i);
        gram += (row.transpose() * row) * w[i];
    }
    let ginv = gram
        .try_inverse()
        .ok_or_else(|| RegressionError::RankDeficient(result.column_names.clone()))?;
    let e = &result.residuals;
    let s2 = (0..k).map(|i| w[i] * e[i] * e[i]).sum::<f64>() / (k - p) as f64;
    let s = s2.sqrt();
    let leverage: Vec<f64> = (0..k)
        .map(|i| {
            let xi = DVector::from_iterator(p, x.row(i).iter().copied());
            w[i] * (xi.transpose() * &ginv * &xi)[(0, 0)]
        })
        .collect();
    let studentized: Vec<f64> = (0..k)
        .map(|i| w[i].sqrt() * e[i] / (s * (1.0 - leverage[i]).max(0.0).sqrt()))
        .collect();
    let wsum: f64 = w.iter().sum();
    let mean_residual = (0..k).map(|i| w[i] * e[i]).sum::<f64>() / wsum;
    let slope = slope_test(&studentized, &phi)?;
    let bins = phi_bins(&phi, &studentized);
    Ok(ResidualDiagnostics {
        variant: Studentization::Internal,
        site_ids: result.site_ids.clone(),
        response: result.response.clone(),
        fitted: result.fitted.clone(),
        residuals: e.clone(),
        heteroskedasticity_note: note(&bins),
        phi,
        studentized,
        leverage,
        mean_residual,
        slope,
        bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub site_id: String,
    pub phi_hat: f64,
    pub late_hat: f64,
    pub complier_mass: f64,
    pub studentized_residual: f64,
    pub fitted: f64,
}

pub fn plot_data(
    diag: &ResidualDiagnostics,
    moments: &[SiteMoments],
) -> Result<Vec<PlotRow>, DiagnosticsError> {
    diag.site_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let m = moments
                .iter()
                .find(|m| &m.site_id == id)
                .ok_or_else(|| DiagnosticsError::UnknownSite(id.clone()))?;
            Ok(PlotRow {
                site_id: id.clone(),
                phi_hat: m.phi,
                late_hat: diag.response[i],
                complier_mass: m.complier_mass,
                studentized_residual: diag.studentized[i],
                fitted: diag.fitted[i],
            })
        })
        .collect()
}

pub fn write_plot_csv<W: Write>(rows: &[PlotRow], writer: W) -> Result<(), DiagnosticsError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_plot_csv<R: Read>(reader: R) -> Result<Vec<PlotRow>, DiagnosticsError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(DiagnosticsError::from))
        .collect()
}
