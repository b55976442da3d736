//! Pointwise confidence bands for the conditional slope density.

use nalgebra::DMatrix;
use num_complex::Complex64;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::pipeline::{slope_density_from_coefficients, ConditionalDensityModel, PointFit};

#[derive(Debug, Clone, PartialEq)]
pub struct DensityBand {
    pub b1_grid: Vec<f64>,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub m_used: usize,
    /// Standard errors, reported for a single split only.
    pub se: Option<Vec<f64>>,
}

fn split_sigmas(model: &ConditionalDensityModel, point: &PointFit, m: usize) -> Result<Vec<f64>> {
    if m >= model.splits().len() {
        return Err(Error::domain(format!("split {m} does not exist")));
    }
    let var = point.per_split[m].sigma2.as_ref().ok_or_else(|| {
        Error::Unsupported("coefficient variances need a model fitted in inference mode".into())
    })?;
    Ok(var.iter().map(|v| v.max(0.0).sqrt()).collect())
}

/// Per-coefficient standard deviations `σ̂_k` of split `m` at `x`, where
/// `σ̂_k²` adds the variances of the real and imaginary coefficient forests.
pub fn sigma_diagonal(model: &ConditionalDensityModel, m: usize, x: &[f64]) -> Result<Vec<f64>> {
    let point = model.point(x)?;
    split_sigmas(model, &point, m)
}

/// `Σ̂_n(x) = diag(σ̂_1, ..., σ̂_K)`.
pub fn sigma_matrix(model: &ConditionalDensityModel, m: usize, x: &[f64]) -> Result<DMatrix<f64>> {
    let s = sigma_diagonal(model, m, x)?;
    Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s)))
}

/// `‖gᵀ Q⁻¹ diag(σ)‖` for a real evaluation functional `g`.
pub fn standard_error_from(functional: &[f64], q_inv: &DMatrix<Complex64>, sigma: &[f64]) -> f64 {
    let k = q_inv.ncols();
    (0..k)
        .map(|c| {
            let a: Complex64 = (0..k).map(|r| q_inv[(r, c)] * functional[r]).sum();
            a.norm_sqr() * sigma[c] * sigma[c]
        })
        .sum::<f64>()
        .sqrt()
}

/// Standard error `v̂_n(b, x)` of the joint density of split `m` at `b`.
pub fn standard_error(model: &ConditionalDensityModel, m: usize, x: &[f64], b: (f64, f64)) -> Result<f64> {
    let point = model.point(x)?;
    let sigma = split_sigmas(model, &point, m)?;
    let q = model.basis().eval(b.0 - point.beta.b0, b.1 - point.beta.b1);
    Ok(standard_error_from(&q, model.q_matrix(m)?.inverse()?, &sigma))
}

/// Standard error of the slope density of split `m` at `b1`.
pub fn slope_standard_error(model: &ConditionalDensityModel, m: usize, x: &[f64], b1: f64) -> Result<f64> {
    let point = model.point(x)?;
    let sigma = split_sigmas(model, &point, m)?;
    let g = model.basis().slope_marginal_eval(b1 - point.beta.b1);
    Ok(standard_error_from(&g, model.q_matrix(m)?.inverse()?, &sigma))
}

/// Lower median of the lower bounds and upper median of the upper bounds,
/// pointwise over the grid.
pub fn aggregate_intervals(lowers: &[Vec<f64>], uppers: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = lowers.len();
    let len = lowers.first().map_or(0, Vec::len);
    let mut lo = Vec::with_capacity(len);
    let mut hi = Vec::with_capacity(len);
    let mut col = vec![0.0; m];
    for j in 0..len {
        for (c, l) in col.iter_mut().zip(lowers) {
            *c = l[j];
        }
        col.sort_by(|a, b| a.total_cmp(b));
        lo.push(col[(m - 1) / 2]);
        for (c, u) in col.iter_mut().zip(uppers) {
            *c = u[j];
        }
        col.sort_by(|a, b| a.total_cmp(b));
        hi.push(col[m / 2]);
    }
    (lo, hi)
}

/// Pointwise band for the slope density at `x`. A single split gives
/// `f̂ ± z_{1−α/2} v̂`; several splits combine per-split intervals at level
/// `1 − α/2` through lower and upper medians.
pub fn confidence_band(
    model: &ConditionalDensityModel,
    x: &[f64],
    b1_grid: &[f64],
    alpha: f64,
) -> Result<DensityBand> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::config(format!("alpha must lie in (0, 0.5], got {alpha}")));
    }
    let point = model.point(x)?;
    let basis = model.basis();
    let m_used = model.splits().len();
    let std_normal = Normal::new(0.0, 1.0).expect("valid parameters");
    let level_alpha = if m_used == 1 { alpha } else { alpha / 2.0 };
    let z = std_normal.inverse_cdf(1.0 - level_alpha / 2.0);

    let mut lowers = Vec::with_capacity(m_used);
    let mut uppers = Vec::with_capacity(m_used);
    let mut ses = Vec::with_capacity(m_used);
    for m in 0..m_used {
        let sigma = split_sigmas(model, &point, m)?;
        let q_inv = model.q_matrix(m)?.inverse()?;
        let c = model.split_coefficients(&point, m)?;
        let f = slope_density_from_coefficients(basis, &c, point.beta.b1, b1_grid).values;
        let se: Vec<f64> = b1_grid
            .iter()
            .map(|&b1| standard_error_from(&basis.slope_marginal_eval(b1 - point.beta.b1), q_inv, &sigma))
            .collect();
        lowers.push(f.iter().zip(&se).map(|(f, s)| f - z * s).collect::<Vec<_>>());
        uppers.push(f.iter().zip(&se).map(|(f, s)| f + z * s).collect::<Vec<_>>());
        ses.push(se);
    }
    let c = model.coefficients(&point)?;
    let estimate = slope_density_from_coefficients(basis, &c, point.beta.b1, b1_grid).values;
    let (lower, upper) = aggregate_intervals(&lowers, &uppers);
    Ok(DensityBand {
        b1_grid: b1_grid.to_vec(),
        point: estimate,
        lower,
        upper,
        alpha,
        m_used,
        se: (m_used == 1).then(|| ses.swap_remove(0)),
    })
}
