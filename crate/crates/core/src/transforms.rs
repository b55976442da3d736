//! Weighting measure, the `T` and `V` operators, the Gram matrix `Q` and the
//! Fourier-inversion identification formula.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::basis::{hermite_fill, neg_i_pow, HermiteBasis, MAX_ORDER};
use crate::error::{Error, Result};
use crate::quadrature::{GaussHermite, GaussLegendre};

/// Default node count of the weighting-measure rule.
pub const DEFAULT_MEASURE_NODES: usize = 64;

/// Lognormal(0, sigma_t) measure discretized by Gauss–Hermite in log space.
#[derive(Debug, Clone)]
pub struct WeightingMeasure {
    sigma_t: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightingMeasure {
    pub fn sigma_t(&self) -> f64 {
        self.sigma_t
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub fn build_measure(sigma_t: f64, n_nodes: usize) -> Result<WeightingMeasure> {
    if !(sigma_t > 0.0 && sigma_t.is_finite()) {
        return Err(Error::domain(format!("sigma_t must be positive, got {sigma_t}")));
    }
    if n_nodes < 8 {
        return Err(Error::domain("the weighting measure needs at least 8 nodes"));
    }
    let rule = GaussHermite::new(n_nodes)?;
    let total: f64 = rule.weights().iter().sum();
    let nodes = rule
        .nodes()
        .iter()
        .map(|&x| (sigma_t * std::f64::consts::SQRT_2 * x).exp())
        .collect();
    let weights = rule.weights().iter().map(|w| w / total).collect();
    Ok(WeightingMeasure {
        sigma_t,
        nodes,
        weights,
    })
}

/// Precomputed evaluator for `T(w, y)`.
///
/// Entry `k` is `Σ_j ω_j 2π (-i)^(k1+k2) h_{k1}(t_j) h_{k2}(t_j w) exp(i t_j y)`.
#[derive(Debug, Clone)]
pub struct TOperator {
    basis: HermiteBasis,
    nodes: Vec<f64>,
    // ω_j 2π h_{k1}(t_j), row-major over (j, k1)
    scaled_h1: Vec<f64>,
    phase: Vec<Complex64>,
}

impl TOperator {
    pub fn new(basis: HermiteBasis, measure: &WeightingMeasure) -> Self {
        let k1 = basis.k1();
        let mut scaled_h1 = vec![0.0; measure.len() * k1];
        for (j, (&t, &w)) in measure.nodes().iter().zip(measure.weights()).enumerate() {
            let row = &mut scaled_h1[j * k1..(j + 1) * k1];
            hermite_fill(t, row);
            for v in row.iter_mut() {
                *v *= 2.0 * PI * w;
            }
        }
        let phase = (0..basis.len()).map(|k| neg_i_pow(basis.degree(k))).collect();
        Self {
            basis,
            nodes: measure.nodes().to_vec(),
            scaled_h1,
            phase,
        }
    }

    pub fn basis(&self) -> HermiteBasis {
        self.basis
    }

    pub fn eval(&self, w: f64, y: f64) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.basis.len()];
        self.eval_into(w, y, &mut out);
        out
    }

    pub fn eval_into(&self, w: f64, y: f64, out: &mut [Complex64]) {
        let (k1, k2) = (self.basis.k1(), self.basis.k2());
        let mut h2 = [0.0; MAX_ORDER + 1];
        out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for (j, &t) in self.nodes.iter().enumerate() {
            hermite_fill(t * w, &mut h2[..k2]);
            let e = Complex64::from_polar(1.0, t * y);
            let h1 = &self.scaled_h1[j * k1..(j + 1) * k1];
            for (b, &v2) in h2[..k2].iter().enumerate() {
                let ev2 = e * v2;
                for (a, &v1) in h1.iter().enumerate() {
                    out[a + k1 * b] += ev2 * v1;
                }
            }
        }
        for (v, p) in out.iter_mut().zip(&self.phase) {
            *v *= p;
        }
    }
}

pub fn t_operator(basis: HermiteBasis, measure: &WeightingMeasure, w: f64, y: f64) -> Vec<Complex64> {
    TOperator::new(basis, measure).eval(w, y)
}

/// Gram matrix of the Fourier-transformed basis with its regularized inverse.
#[derive(Debug, Clone)]
pub struct QMatrix {
    pub entries: DMatrix<Complex64>,
    pub ridge_used: f64,
    pub inverse: Option<DMatrix<Complex64>>,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl QMatrix {
    pub fn from_entries(entries: DMatrix<Complex64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::domain("Q must be a nonempty square matrix"));
        }
        let eig = SymmetricEigen::new(entries.clone());
        let (min_eig, max_eig) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(Self {
            entries,
            ridge_used: 0.0,
            inverse: None,
            min_eig,
            max_eig,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn inverse(&self) -> Result<&DMatrix<Complex64>> {
        self.inverse
            .as_ref()
            .ok_or_else(|| Error::numeric("Q inverse requested before inversion"))
    }

    /// `max |(Q + ridge I) Q^{-1} - I|`.
    pub fn inverse_residual(&self) -> Result<f64> {
        let inv = self.inverse()?;
        let n = self.dim();
        let mut shifted = self.entries.clone();
        for i in 0..n {
            shifted[(i, i)] += Complex64::new(self.ridge_used, 0.0);
        }
        let prod = shifted * inv;
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                let target = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((prod[(r, c)] - target).norm());
            }
        }
        Ok(worst)
    }

    pub fn hermitian_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                worst = worst.max((self.entries[(r, c)] - self.entries[(c, r)].conj()).norm());
            }
        }
        worst
    }
}

/// Sample Gram matrix `(1/n) Σ_i Σ_j ω_j conj(a_ij) a_ij^T` with
/// `a_ij = (F q^K)(t_j, t_j W_i)`.
///
/// Writing `a = 2π D r` with `D = diag(i^(k1+k2))` and real `r`, the matrix is
/// `(2π)^2 D^* R D` where `R` accumulates real outer products, which is how it
/// is computed here.
pub fn q_matrix(basis: HermiteBasis, measure: &WeightingMeasure, w_samples: &[f64]) -> Result<QMatrix> {
    if w_samples.is_empty() {
        return Err(Error::data("Q needs at least one W observation"));
    }
    let kdim = basis.len();
    let (k1, k2) = (basis.k1(), basis.k2());
    let mut h_t = vec![0.0; measure.len() * k1];
    for (j, &t) in measure.nodes().iter().enumerate() {
        hermite_fill(t, &mut h_t[j * k1..(j + 1) * k1]);
    }

    const CHUNK: usize = 64;
    let partial: Vec<Vec<f64>> = w_samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; kdim * kdim];
            let mut v = vec![0.0; kdim];
            let mut h2 = [0.0; MAX_ORDER + 1];
            for &w in chunk {
                for (j, (&t, &om)) in measure.nodes().iter().zip(measure.weights()).enumerate() {
                    hermite_fill(t * w, &mut h2[..k2]);
                    let h1 = &h_t[j * k1..(j + 1) * k1];
                    for b in 0..k2 {
                        for a in 0..k1 {
                            v[a + k1 * b] = h1[a] * h2[b];
                        }
                    }
                    for r in 0..kdim {
                        let vr = om * v[r];
                        if vr == 0.0 {
                            continue;
                        }
                        let row = &mut acc[r * kdim..(r + 1) * kdim];
                        for (c, slot) in row.iter_mut().enumerate().skip(r) {
                            *slot += vr * v[c];
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut real = vec![0.0; kdim * kdim];
    for acc in &partial {
        for (s, a) in real.iter_mut().zip(acc) {
            *s += a;
        }
    }
    let scale = (2.0 * PI).powi(2) / w_samples.len() as f64;
    let mut entries = DMatrix::<Complex64>::zeros(kdim, kdim);
    for r in 0..kdim {
        for c in r..kdim {
            let value = real[r * kdim + c] * scale;
            let phase = neg_i_pow(basis.degree(r)) * crate::basis::i_pow(basis.degree(c));
            entries[(r, c)] = phase * value;
            entries[(c, r)] = (phase * value).conj();
        }
    }
    QMatrix::from_entries(entries)
}

/// Inverts `Q + ridge I` through its Hermitian eigendecomposition.
///
/// With `ridge == 0` and a relative spectral gap below `1e-12`, a ridge of
/// `1e-10 * max_eig` is applied and recorded.
pub fn q_inverse(mut q: QMatrix, ridge: f64) -> Result<QMatrix> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::domain(format!("ridge must be nonnegative, got {ridge}")));
    }
    let eig = SymmetricEigen::new(q.entries.clone());
    let max_eig = q.max_eig.max(0.0);
    let mut ridge_used = ridge;
    if ridge == 0.0 && q.min_eig < 1e-12 * max_eig {
        ridge_used = 1e-10 * max_eig;
    }
    let n = q.dim();
    let vecs = &eig.eigenvectors;
    let mut inv = DMatrix::<Complex64>::zeros(n, n);
    for (e, &lambda) in eig.eigenvalues.iter().enumerate() {
        let denom = lambda + ridge_used;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::numeric(format!(
                "Q + ridge has a nonpositive eigenvalue {denom}"
            )));
        }
        let s = 1.0 / denom;
        let col = vecs.column(e);
        for r in 0..n {
            let vr = col[r] * s;
            for c in 0..n {
                inv[(r, c)] += vr * col[c].conj();
            }
        }
    }
    q.ridge_used = ridge_used;
    q.inverse = Some(inv);
    Ok(q)
}

/// Default rule for the semi-infinite `t` integral of [`VOperator`].
pub fn default_v_rule() -> GaussLegendre {
    GaussLegendre::new(256, 0.0, 12.0).expect("static interval is valid")
}

/// Precomputed evaluator for the cross-validation operator `V(y, w)`.
///
/// Entry `k` is
/// `(1/(2π²)) Re ∫_0^∞ t exp(i t y) 2π (-i)^(k1+k2) h_{k1}(t) h_{k2}(t w) dt / f_W(w)`,
/// so that `E[V(Y, W)' c] = ∫ f_c(b) f_B(b) db` for the sieve density with
/// coefficients `c`.
#[derive(Debug, Clone)]
pub struct VOperator {
    basis: HermiteBasis,
    nodes: Vec<f64>,
    // rule weight * t * 2π h_{k1}(t) / (2π²), row-major over (g, k1)
    scaled_h1: Vec<f64>,
    degree: Vec<usize>,
}

impl VOperator {
    pub fn new(basis: HermiteBasis, rule: &GaussLegendre) -> Self {
        let k1 = basis.k1();
        let mut scaled_h1 = vec![0.0; rule.nodes().len() * k1];
        for (g, (&t, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
            let row = &mut scaled_h1[g * k1..(g + 1) * k1];
            hermite_fill(t, row);
            for v in row.iter_mut() {
                *v *= w * t * 2.0 * PI / (2.0 * PI * PI);
            }
        }
        let degree = (0..basis.len()).map(|k| basis.degree(k)).collect();
        Self {
            basis,
            nodes: rule.nodes().to_vec(),
            scaled_h1,
            degree,
        }
    }

    /// Complex accumulation before taking the real part, without the `1/f_W`
    /// factor.
    pub fn eval_complex(&self, w: f64, y: f64) -> Vec<Complex64> {
        let (k1, k2) = (self.basis.k1(), self.basis.k2());
        let mut out = vec![Complex64::new(0.0, 0.0); self.basis.len()];
        let mut h2 = [0.0; MAX_ORDER + 1];
        for (g, &t) in self.nodes.iter().enumerate() {
            hermite_fill(t * w, &mut h2[..k2]);
            let e = Complex64::from_polar(1.0, t * y);
            let h1 = &self.scaled_h1[g * k1..(g + 1) * k1];
            for (b, &v2) in h2[..k2].iter().enumerate() {
                let ev2 = e * v2;
                for (a, &v1) in h1.iter().enumerate() {
                    out[a + k1 * b] += ev2 * v1;
                }
            }
        }
        for (v, &p) in out.iter_mut().zip(&self.degree) {
            *v *= neg_i_pow(p);
        }
        out
    }

    pub fn eval(&self, w: f64, y: f64, f_w: f64) -> Result<Vec<f64>> {
        if !(f_w > 0.0) {
            return Err(Error::domain(format!(
                "density of W must be positive, got {f_w}"
            )));
        }
        Ok(self.eval_complex(w, y).iter().map(|v| v.re / f_w).collect())
    }
}

pub fn v_operator(
    basis: HermiteBasis,
    w: f64,
    y: f64,
    f_w: f64,
    rule: &GaussLegendre,
) -> Result<Vec<f64>> {
    VOperator::new(basis, rule).eval(w, y, f_w)
}

/// Radial and angular rules for [`fourier_inversion_oracle`].
#[derive(Debug, Clone, Copy)]
pub struct InversionRule {
    pub r_max: f64,
    pub n_radial: usize,
    pub n_angular: usize,
}

impl Default for InversionRule {
    fn default() -> Self {
        Self {
            r_max: 12.0,
            n_radial: 96,
            n_angular: 128,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    /// `density[i][j]` at `(b0_grid[i], b1_grid[j])`.
    pub density: Vec<Vec<f64>>,
    pub max_imag: f64,
}

/// Recovers `f_B(b) = (2π)^-2 ∫∫ |t| exp(-i b'(t, t w)) φ(t | w) dt dw`.
///
/// The `(t, w)` integral is carried out in polar coordinates of
/// `(t, s) = (t, t w)`: with `t = r cos θ`, `w = tan θ` the Jacobian
/// `|t| dt dw` becomes `|r| dr dθ` over `r ∈ R`, `θ ∈ (-π/2, π/2)`, which
/// avoids truncating the unbounded `w` range.
pub fn fourier_inversion_oracle<F>(
    phi: F,
    b0_grid: &[f64],
    b1_grid: &[f64],
    rule: InversionRule,
) -> Result<InversionResult>
where
    F: Fn(f64, f64) -> Complex64 + Sync,
{
    let radial = GaussLegendre::new(rule.n_radial, 0.0, rule.r_max)?;
    let angular = GaussLegendre::new(rule.n_angular, -PI / 2.0, PI / 2.0)?;
    // (t, s, weight * phi)
    let mut samples = Vec::with_capacity(2 * rule.n_radial * rule.n_angular);
    for (&theta, &wt) in angular.nodes().iter().zip(angular.weights()) {
        let (sin, cos) = theta.sin_cos();
        let w = theta.tan();
        for (&r, &wr) in radial.nodes().iter().zip(radial.weights()) {
            for sign in [1.0, -1.0] {
                let t = sign * r * cos;
                let s = sign * r * sin;
                samples.push((t, s, phi(t, w) * (wt * wr * r)));
            }
        }
    }
    let norm = 1.0 / (4.0 * PI * PI);
    let rows: Vec<(Vec<f64>, f64)> = b0_grid
        .par_iter()
        .map(|&b0| {
            let mut row = Vec::with_capacity(b1_grid.len());
            let mut imag = 0.0f64;
            for &b1 in b1_grid {
                let mut acc = Complex64::new(0.0, 0.0);
                for &(t, s, v) in &samples {
                    acc += Complex64::from_polar(1.0, -(b0 * t + b1 * s)) * v;
                }
                acc *= norm;
                imag = imag.max(acc.im.abs());
                row.push(acc.re);
            }
            (row, imag)
        })
        .collect();
    let max_imag = rows.iter().fold(0.0f64, |m, r| m.max(r.1));
    Ok(InversionResult {
        density: rows.into_iter().map(|r| r.0).collect(),
        max_imag,
    })
}
