//! Scores and the sandwich covariance of the quasi-likelihood estimator.
//!
//! The per-row score is analytic. The bread (average Hessian) is obtained by
//! central differences of the summed analytic score; the meat is the average
//! outer product of row scores. All matrices follow the parameter order of
//! [`MoeParams::to_vector`].

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{MoeError, Result};
use crate::model::{Dataset, ExpertParams, Family, MoeParams, Response, RowScratch};
use crate::numeric::{sigmoid, softmax_in_place};
use crate::tasks::predict_mean;

/// Bread steps are `BREAD_STEP * (1 + |theta_j|)`.
pub const BREAD_STEP: f64 = 1e-5;
/// Mean-function gradient steps are `MEAN_STEP * (1 + |theta_j|)`.
pub const MEAN_STEP: f64 = 1e-6;
/// Breads with a larger condition number are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichCovariance {
    /// Average per-row Hessian of the log mixture density.
    pub bread: DMatrix<f64>,
    /// Average outer product of per-row scores.
    pub meat: DMatrix<f64>,
    /// `bread^-1 meat bread^-1 / n`: the estimated sampling covariance.
    pub cov: DMatrix<f64>,
    pub n: usize,
    pub parameter_names: Vec<String>,
}

impl SandwichCovariance {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.cov.nrows())
            .map(|i| self.cov[(i, i)].max(0.0).sqrt())
            .collect()
    }
}

/// Gradient of `log MoE(y | x; theta)` in the free parameters.
pub fn score_vector(x: &[f64], y: &Response, theta: &MoeParams) -> Result<Vec<f64>> {
    theta.validate()?;
    if x.len() != theta.p() {
        return Err(MoeError::DimensionMismatch {
            what: "covariate point",
            expected: theta.p(),
            found: x.len(),
        });
    }
    let mut s = RowScratch::default();
    let mut out = Vec::with_capacity(theta.dim());
    score_into(x, y, theta, &mut s, &mut out)?;
    Ok(out)
}

fn score_into(
    x: &[f64],
    y: &Response,
    theta: &MoeParams,
    s: &mut RowScratch,
    out: &mut Vec<f64>,
) -> Result<()> {
    out.clear();
    theta.joint_log_terms(x, y, s)?;
    let mut tau = s.terms.clone();
    softmax_in_place(&mut tau);
    let mut gates = s.log_gate.clone();
    gates.iter_mut().for_each(|v| *v = v.exp());

    for z in 0..theta.g() - 1 {
        let r = tau[z] - gates[z];
        out.push(r);
        out.extend(x.iter().map(|xj| r * xj));
    }
    let row = &s.design;
    for (z, e) in theta.experts.iter().enumerate() {
        let t = tau[z];
        match (e, y) {
            (ExpertParams::Gaussian { coef, variance }, Response::Real(y)) => {
                let r = y - crate::numeric::dot(coef, row);
                out.extend(row.iter().map(|d| t * r / variance * d));
                out.push(t * (-0.5 / variance + 0.5 * r * r / (variance * variance)));
            }
            (ExpertParams::Logistic { coef }, Response::Binary(b)) => {
                let r = *b as f64 - sigmoid(crate::numeric::dot(coef, row));
                out.extend(row.iter().map(|d| t * r * d));
            }
            (ExpertParams::Poisson { coef }, Response::Count(c)) => {
                let r = *c as f64 - crate::numeric::dot(coef, row).exp();
                out.extend(row.iter().map(|d| t * r * d));
            }
            (ExpertParams::Multinomial { .. }, Response::Category(l)) => {
                let probs: Vec<f64> = e
                    .class_log_probs(row)
                    .expect("multinomial expert")
                    .into_iter()
                    .map(f64::exp)
                    .collect();
                for (c, pc) in probs.iter().take(probs.len() - 1).enumerate() {
                    let ind = if *l == c + 1 { 1.0 } else { 0.0 };
                    out.extend(row.iter().map(|d| t * (ind - pc) * d));
                }
            }
            (e, y) => {
                return Err(MoeError::KindMismatch {
                    response: format!("{y:?}"),
                    family: e.family().to_string(),
                })
            }
        }
    }
    Ok(())
}

/// `sum_i score(d_i; theta)`.
pub fn total_score(data: &Dataset, theta: &MoeParams) -> Result<Vec<f64>> {
    theta.validate()?;
    theta.check_compatible(data)?;
    let mut s = RowScratch::default();
    let mut row = Vec::new();
    let mut total = vec![0.0; theta.dim()];
    for (x, y) in data.rows() {
        score_into(x, y, theta, &mut s, &mut row)?;
        total.iter_mut().zip(&row).for_each(|(a, b)| *a += b);
    }
    Ok(total)
}

/// Indices of Gaussian variance parameters in the parameter vector.
fn variance_indices(theta: &MoeParams) -> Vec<usize> {
    let mut idx = Vec::new();
    let mut offset = theta.gating.blocks.len() * (theta.p() + 1);
    for e in &theta.experts {
        offset += e.dim();
        if matches!(e, ExpertParams::Gaussian { .. }) {
            idx.push(offset - 1);
        }
    }
    idx
}

/// Sandwich covariance `I1^-1 I2 I1^-1 / n` at `theta_hat`.
pub fn sandwich_covariance(data: &Dataset, theta_hat: &MoeParams) -> Result<SandwichCovariance> {
    theta_hat.validate()?;
    theta_hat.check_compatible(data)?;
    let n = data.n();
    let dim = theta_hat.dim();
    let nf = n as f64;

    let mut meat = DMatrix::<f64>::zeros(dim, dim);
    let mut s = RowScratch::default();
    let mut row = Vec::new();
    for (x, y) in data.rows() {
        score_into(x, y, theta_hat, &mut s, &mut row)?;
        let v = DVector::from_column_slice(&row);
        meat += &v * v.transpose();
    }
    meat /= nf;

    let base = theta_hat.to_vector();
    let variances = variance_indices(theta_hat);
    let mut bread = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        let mut h = BREAD_STEP * (1.0 + base[j].abs());
        if variances.contains(&j) {
            h = h.min(0.5 * base[j]);
        }
        let mut plus = base.clone();
        plus[j] += h;
        let mut minus = base.clone();
        minus[j] -= h;
        let sp = total_score(data, &theta_hat.with_vector(&plus)?)?;
        let sm = total_score(data, &theta_hat.with_vector(&minus)?)?;
        for i in 0..dim {
            bread[(i, j)] = (sp[i] - sm[i]) / (2.0 * h * nf);
        }
    }
    let bread = (&bread + bread.transpose()) * 0.5;

    let condition = crate::numeric::condition_number(&bread);
    if !(condition < MAX_CONDITION) {
        return Err(MoeError::SingularInformation { condition });
    }
    let bread_inv = bread
        .clone()
        .try_inverse()
        .ok_or(MoeError::SingularInformation { condition })?;
    let cov = &bread_inv * &meat * &bread_inv / nf;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(SandwichCovariance {
        bread,
        meat,
        cov,
        n,
        parameter_names: theta_hat.parameter_names(),
    })
}

/// Delta-method interval for the mixture mean at `x`:
/// `m(x) +/- z * sqrt(grad' cov grad)` with a finite-difference gradient.
pub fn mean_ci(
    x: &[f64],
    theta_hat: &MoeParams,
    cov: &DMatrix<f64>,
    level: f64,
) -> Result<(f64, f64)> {
    if theta_hat.family != Family::Gaussian {
        return Err(MoeError::Unsupported(format!(
            "mean confidence interval for {} experts",
            theta_hat.family
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MoeError::InvalidConfig(format!(
            "confidence level must be in (0, 1), got {level}"
        )));
    }
    let dim = theta_hat.dim();
    if cov.nrows() != dim || cov.ncols() != dim {
        return Err(MoeError::DimensionMismatch {
            what: "covariance matrix",
            expected: dim,
            found: cov.nrows(),
        });
    }
    let m = predict_mean(x, theta_hat)?;
    let base = theta_hat.to_vector();
    let variances = variance_indices(theta_hat);
    let mut grad = DVector::<f64>::zeros(dim);
    for j in 0..dim {
        // the mean does not depend on expert variances
        if variances.contains(&j) {
            continue;
        }
        let h = MEAN_STEP * (1.0 + base[j].abs());
        let mut plus = base.clone();
        plus[j] += h;
        let mut minus = base.clone();
        minus[j] -= h;
        let mp = predict_mean(x, &theta_hat.with_vector(&plus)?)?;
        let mm = predict_mean(x, &theta_hat.with_vector(&minus)?)?;
        grad[j] = (mp - mm) / (2.0 * h);
    }
    let var = (grad.transpose() * cov * &grad)[(0, 0)].max(0.0);
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf((1.0 + level) / 2.0);
    let half = z * var.sqrt();
    Ok((m - half, m + half))
}
