//! Weighted least squares with sandwich (HC0/HC1) covariance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::RegressionError;

/// Condition-number ceiling for the column-scaled Gram matrix.
pub const CONDITION_LIMIT: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HcKind {
    Hc0,
    #[default]
    Hc1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub vcov: DMatrix<f64>,
    /// `(X'WX)^-1`, kept for leverage computations.
    pub gram_inverse: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub fitted: DVector<f64>,
    pub dof: usize,
    pub condition_number: f64,
}

/// Solves `b = (X'WX)^-1 X'Wy` and returns the HC covariance
/// `(X'WX)^-1 X'W diag(e^2) WX (X'WX)^-1`, times `K/(K-p)` for HC1.
///
/// `K = p` is accepted as an exact fit: residuals are zero, HC0 is the zero
/// matrix and HC1 is undefined (`NaN`).
pub fn ols_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    hc: HcKind,
    column_names: &[String],
) -> Result<OlsFit, RegressionError> {
    let (k, p) = x.shape();
    if y.len() != k || column_names.len() != p || weights.is_some_and(|w| w.len() != k) {
        return Err(RegressionError::DimensionMismatch);
    }
    if p == 0 || k < p {
        return Err(RegressionError::TooFewSites { sites: k, params: p });
    }
    if let Some(w) = weights {
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(RegressionError::BadWeights);
        }
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(RegressionError::NonFinite);
    }
    let w = DVector::from_iterator(k, (0..k).map(|i| weights.map_or(1.0, |w| w[i])));

    // X'W
    let mut xtw = x.transpose();
    for (j, mut col) in xtw.column_iter_mut().enumerate() {
        col *= w[j];
    }
    let gram = &xtw * x;

    let condition_number = check_rank(&gram, column_names)?;

    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| RegressionError::RankDeficient(column_names.to_vec()))?;
    let gram_inverse = chol.inverse();
    let yv = DVector::from_column_slice(y);
    let coefficients = chol.solve(&(&xtw * &yv));
    let fitted = x * &coefficients;
    let residuals = &yv - &fitted;

    let mut meat = DMatrix::zeros(p, p);
    for i in 0..k {
        let s = w[i] * residuals[i];
        let row = x.row(i);
        meat += (row.transpose() * row) * (s * s);
    }
    let mut vcov = &gram_inverse * meat * &gram_inverse;
    vcov = (&vcov + vcov.transpose()) * 0.5;
    let dof = k - p;
    if hc == HcKind::Hc1 {
        if dof == 0 {
            vcov.fill(f64::NAN);
        } else {
            vcov *= k as f64 / dof as f64;
        }
    }
    Ok(OlsFit {
        coefficients,
        vcov,
        gram_inverse,
        residuals,
        fitted,
        dof,
        condition_number,
    })
}

/// Zero columns are reported by name; otherwise the condition number of the
/// unit-diagonal Gram matrix must stay under [`CONDITION_LIMIT`], and the
/// columns loading on the smallest eigenvector are reported when it does not.
fn check_rank(gram: &DMatrix<f64>, names: &[String]) -> Result<f64, RegressionError> {
    let p = gram.nrows();
    let norms: Vec<f64> = (0..p).map(|j| gram[(j, j)].sqrt()).collect();
    let zero: Vec<String> = norms
        .iter()
        .zip(names)
        .filter(|(n, _)| !(**n > 0.0))
        .map(|(_, name)| name.clone())
        .collect();
    if !zero.is_empty() {
        return Err(RegressionError::RankDeficient(zero));
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] / (norms[i] * norms[j]));
    let eig = SymmetricEigen::new(scaled);
    let (imin, &lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("p > 0");
    let lmax = eig.eigenvalues.max();
    let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if cond > CONDITION_LIMIT {
        let v = eig.eigenvectors.column(imin);
        let vmax = v.amax();
        let cols = names
            .iter()
            .zip(v.iter())
            .filter(|(_, c)| c.abs() >= 0.25 * vmax)
            .map(|(n, _)| n.clone())
            .collect();
        return Err(RegressionError::RankDeficient(cols));
    }
    Ok(cond)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn intercept_only_gives_mean() {
        let y = [1.0, 4.0, 2.0, 9.0];
        let x = DMatrix::from_element(4, 1, 1.0);
        let fit = ols_fit(&x, &y, None, HcKind::Hc1, &names(1)).unwrap();
        assert!((fit.coefficients[0] - 4.0).abs() < 1e-12);
        assert!(fit.residuals.sum().abs() < 1e-12);
    }

    #[test]
    fn zero_column_is_rank_deficient() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let err = ols_fit(&x, &[1.0, 2.0, 3.0], None, HcKind::Hc1, &["one_minus_phi".into(), "phi".into()])
            .unwrap_err();
        assert_eq!(err, RegressionError::RankDeficient(vec!["phi".into()]));
    }

    #[test]
    fn collinear_columns_are_rank_deficient() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let err = ols_fit(&x, &[1.0, 2.0, 3.0], None, HcKind::Hc1, &names(2)).unwrap_err();
        assert!(matches!(err, RegressionError::RankDeficient(c) if c.len() == 2));
    }

    #[test]
    fn hc1_is_scaled_hc0() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.1, 1.0, 0.5, 1.0, 0.9, 1.0, 0.3, 1.0, 0.7]);
        let y = [0.2, 0.1, 0.5, -0.1, 0.4];
        let a = ols_fit(&x, &y, None, HcKind::Hc0, &names(2)).unwrap();
        let b = ols_fit(&x, &y, None, HcKind::Hc1, &names(2)).unwrap();
        assert_eq!(b.vcov, &a.vcov * (5.0 / 3.0));
    }

    #[test]
    fn exact_fit_has_zero_residuals() {
        let x = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.2, 0.8]);
        let fit = ols_fit(&x, &[0.1, 0.3], None, HcKind::Hc0, &names(2)).unwrap();
        assert!(fit.residuals.amax() < 1e-14);
        assert_eq!(fit.dof, 0);
        assert!(fit.vcov.amax() < 1e-20);
        let fit = ols_fit(&x, &[0.1, 0.3], None, HcKind::Hc1, &names(2)).unwrap();
        assert!(fit.vcov[(0, 0)].is_nan());
    }

    #[test]
    fn too_few_rows() {
        let x = DMatrix::from_element(1, 2, 1.0);
        assert!(matches!(
            ols_fit(&x, &[1.0], None, HcKind::Hc1, &names(2)),
            Err(RegressionError::TooFewSites { .. })
        ));
    }
}
