//! Hermite function sieve basis.
//!
//! The univariate functions are the L2-orthonormal Hermite functions
//!
//! ```text
//! h_k(b) = H_k(b) exp(-b^2/2) / sqrt(2^k k! sqrt(pi))
//! ```
//!
//! built from the physicists' polynomials `H_k`. Indices are zero-based
//! throughout, so the Fourier eigenrelation reads
//! `F h_k = sqrt(2 pi) i^k h_k` under `(F f)(t) = ∫ exp(i t a) f(a) da`.
//!
//! The bivariate basis is the tensor product `h_{k1}(b0) h_{k2}(b1)` with the
//! flat index `k = k1 + K1 * k2` (intercept order varies fastest).

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest order accepted by [`hermite_eval`].
pub const MAX_ORDER: usize = 60;

/// `pi^(-1/4)`, the value of `h_0(0)` and the sup-norm bound of every `h_k`.
pub const H0_AT_ZERO: f64 = 0.751_125_544_464_942_5;

/// Evaluates `h_k(b)` by the three-term recurrence.
pub fn hermite_eval(k: usize, b: f64) -> Result<f64> {
    if k > MAX_ORDER {
        return Err(Error::domain(format!(
            "Hermite order {k} exceeds the supported maximum {MAX_ORDER}"
        )));
    }
    let mut values = [0.0; MAX_ORDER + 1];
    hermite_fill(b, &mut values[..=k]);
    Ok(values[k])
}

/// Fills `out[j] = h_j(b)` for `j < out.len()`.
///
/// No order guard; callers size `out` themselves.
pub fn hermite_fill(b: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = H0_AT_ZERO * (-0.5 * b * b).exp();
    if out.len() > 1 {
        out[1] = std::f64::consts::SQRT_2 * b * out[0];
    }
    for k in 2..out.len() {
        let kf = k as f64;
        out[k] = b * (2.0 / kf).sqrt() * out[k - 1] - ((kf - 1.0) / kf).sqrt() * out[k - 2];
    }
}

/// Derivative `h_k'(b) = sqrt(k/2) h_{k-1}(b) - sqrt((k+1)/2) h_{k+1}(b)`.
pub fn hermite_derivative(k: usize, b: f64) -> Result<f64> {
    if k >= MAX_ORDER {
        return Err(Error::domain(format!(
            "Hermite derivative order {k} exceeds the supported maximum {}",
            MAX_ORDER - 1
        )));
    }
    let mut values = [0.0; MAX_ORDER + 1];
    hermite_fill(b, &mut values[..=k + 1]);
    let kf = k as f64;
    let lower = if k == 0 {
        0.0
    } else {
        (kf / 2.0).sqrt() * values[k - 1]
    };
    Ok(lower - ((kf + 1.0) / 2.0).sqrt() * values[k + 1])
}

/// `i^p` for a nonnegative integer power.
pub fn i_pow(p: usize) -> Complex64 {
    match p % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// `(-i)^p`.
pub fn neg_i_pow(p: usize) -> Complex64 {
    i_pow(p).conj()
}

/// Tensor-product Hermite basis of size `K1 * K2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HermiteBasis {
    k1: usize,
    k2: usize,
}

impl HermiteBasis {
    pub fn new(k1: usize, k2: usize) -> Result<Self> {
        if k1 == 0 || k2 == 0 {
            return Err(Error::domain("basis orders K1 and K2 must be positive"));
        }
        if k1 > MAX_ORDER + 1 || k2 > MAX_ORDER + 1 {
            return Err(Error::domain(format!(
                "basis orders must not exceed {}",
                MAX_ORDER + 1
            )));
        }
        Ok(Self { k1, k2 })
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    /// Total number of basis functions `K = K1 * K2`.
    pub fn len(&self) -> usize {
        self.k1 * self.k2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index to `(k1, k2)`.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        debug_assert!(k < self.len());
        (k % self.k1, k / self.k1)
    }

    /// `(k1, k2)` to flat index.
    pub fn flat(&self, k1: usize, k2: usize) -> usize {
        debug_assert!(k1 < self.k1 && k2 < self.k2);
        k1 + self.k1 * k2
    }

    /// Total degree `k1 + k2`, which sets the Fourier phase `i^(k1+k2)`.
    pub fn degree(&self, k: usize) -> usize {
        let (a, b) = self.pair(k);
        a + b
    }

    /// `q^K(b0, b1)`.
    pub fn eval(&self, b0: f64, b1: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(b0, b1, &mut out);
        out
    }

    pub fn eval_into(&self, b0: f64, b1: f64, out: &mut [f64]) {
        let mut h0 = [0.0; MAX_ORDER + 1];
        let mut h1 = [0.0; MAX_ORDER + 1];
        hermite_fill(b0, &mut h0[..self.k1]);
        hermite_fill(b1, &mut h1[..self.k2]);
        self.outer(&h0[..self.k1], &h1[..self.k2], out);
    }

    /// Slope-direction marginal of the basis: `∫ q_k(b0, b1) db0`.
    ///
    /// Uses `∫ h_j = sqrt(2 pi) i^j h_j(0)`, which is real because
    /// `h_j(0) = 0` for odd `j`.
    pub fn slope_marginal_eval(&self, b1: f64) -> Vec<f64> {
        let mut h0 = [0.0; MAX_ORDER + 1];
        let mut h1 = [0.0; MAX_ORDER + 1];
        hermite_fill(0.0, &mut h0[..self.k1]);
        for (j, v) in h0[..self.k1].iter_mut().enumerate() {
            *v *= (2.0 * PI).sqrt() * i_pow(j).re;
        }
        hermite_fill(b1, &mut h1[..self.k2]);
        let mut out = vec![0.0; self.len()];
        self.outer(&h0[..self.k1], &h1[..self.k2], &mut out);
        out
    }

    /// Bivariate Fourier transform of the basis at `(t, s)`:
    /// `(F q_k)(t, s) = 2 pi i^(k1+k2) h_{k1}(t) h_{k2}(s)`.
    pub fn fourier_eval(&self, t: f64, s: f64) -> Vec<Complex64> {
        let mut real = vec![0.0; self.len()];
        self.eval_into(t, s, &mut real);
        real.iter()
            .enumerate()
            .map(|(k, &v)| i_pow(self.degree(k)) * (2.0 * PI * v))
            .collect()
    }

    fn outer(&self, h0: &[f64], h1: &[f64], out: &mut [f64]) {
        for (k2, &v1) in h1.iter().enumerate() {
            for (k1, &v0) in h0.iter().enumerate() {
                out[k1 + self.k1 * k2] = v0 * v1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{trapezoid_uniform, GaussHermite};

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    #[test]
    fn normalization_at_origin() {
        assert!((hermite_eval(0, 0.0).unwrap() - PI.powf(-0.25)).abs() < 1e-15);
        assert_eq!(hermite_eval(1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn order_five_matches_explicit_polynomial() {
        let x: f64 = 1.3;
        let h5 = 32.0 * x.powi(5) - 160.0 * x.powi(3) + 120.0 * x;
        let expected =
            h5 * (-x * x / 2.0).exp() / (PI.powf(0.25) * (2f64.powi(5) * factorial(5)).sqrt());
        assert!((hermite_eval(5, x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn order_guard() {
        assert!(hermite_eval(60, 0.4).is_ok());
        assert!(matches!(hermite_eval(61, 0.4), Err(Error::Domain(_))));
        assert!(hermite_derivative(59, 0.4).is_ok());
        assert!(hermite_derivative(60, 0.4).is_err());
    }

    #[test]
    fn basis_eval_examples() {
        let b = HermiteBasis::new(1, 1).unwrap();
        assert!((b.eval(0.0, 0.0)[0] - PI.powf(-0.5)).abs() < 1e-15);

        let b = HermiteBasis::new(2, 1).unwrap();
        let v = b.eval(0.0, 0.0);
        assert!((v[0] - PI.powf(-0.5)).abs() < 1e-15);
        assert_eq!(v[1], 0.0);

        let b = HermiteBasis::new(3, 3).unwrap();
        let v = b.eval(0.5, -0.5);
        for k1 in 0..3 {
            for k2 in 0..3 {
                let expected = hermite_eval(k1, 0.5).unwrap() * hermite_eval(k2, -0.5).unwrap();
                assert!((v[b.flat(k1, k2)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn index_map_round_trips() {
        for (k1, k2) in [(1, 1), (3, 3), (3, 7), (5, 2)] {
            let b = HermiteBasis::new(k1, k2).unwrap();
            for k in 0..b.len() {
                let (a, c) = b.pair(k);
                assert_eq!(b.flat(a, c), k);
            }
            // intercept order varies fastest
            if k1 > 1 {
                assert_eq!(b.pair(1), (1, 0));
            }
        }
        assert!(HermiteBasis::new(0, 3).is_err());
    }

    #[test]
    fn orthonormality_under_gauss_hermite() {
        let rule = GaussHermite::new(200).unwrap();
        let mut h = vec![[0.0; 13]; rule.nodes().len()];
        for (row, &x) in h.iter_mut().zip(rule.nodes()) {
            hermite_fill(x, row);
        }
        for j in 0..=12 {
            for k in 0..=12 {
                let integral: f64 = h
                    .iter()
                    .zip(rule.scaled_weights())
                    .map(|(row, &w)| w * row[j] * row[k])
                    .sum();
                let delta = if j == k { 1.0 } else { 0.0 };
                assert!((integral - delta).abs() < 1e-8, "j={j} k={k} {integral}");
            }
        }
    }

    #[test]
    fn fourier_eigenrelation() {
        let step = 0.005;
        let grid: Vec<f64> = (0..=4800).map(|i| -12.0 + step * i as f64).collect();
        for k in 0..=8 {
            let hk: Vec<f64> = grid.iter().map(|&a| hermite_eval(k, a).unwrap()).collect();
            for t in -3..=3 {
                let t = t as f64;
                let re: Vec<f64> = grid.iter().zip(&hk).map(|(a, h)| (t * a).cos() * h).collect();
                let im: Vec<f64> = grid.iter().zip(&hk).map(|(a, h)| (t * a).sin() * h).collect();
                let numeric = Complex64::new(
                    trapezoid_uniform(&re, step),
                    trapezoid_uniform(&im, step),
                );
                let expected = i_pow(k) * ((2.0 * PI).sqrt() * hermite_eval(k, t).unwrap());
                assert!((numeric - expected).norm() < 1e-6, "k={k} t={t}");
            }
        }
    }

    #[test]
    fn fourier_basis_examples() {
        let b = HermiteBasis::new(1, 1).unwrap();
        let v = b.fourier_eval(0.0, 0.0);
        assert!((v[0].re - 2.0 * PI * PI.powf(-0.5)).abs() < 1e-12);
        assert_eq!(v[0].im, 0.0);

        let b = HermiteBasis::new(2, 1).unwrap();
        let v = b.fourier_eval(1.0, 0.0);
        let expected = 2.0 * PI * hermite_eval(1, 1.0).unwrap() * hermite_eval(0, 0.0).unwrap();
        assert_eq!(v[1].re, 0.0);
        assert!((v[1].im - expected).abs() < 1e-12);
    }

    #[test]
    fn fourier_basis_matches_two_dimensional_integral() {
        let b = HermiteBasis::new(3, 3).unwrap();
        let step = 0.02;
        let grid: Vec<f64> = (0..=1200).map(|i| -12.0 + step * i as f64).collect();
        let table: Vec<[f64; 3]> = grid
            .iter()
            .map(|&a| {
                let mut h = [0.0; 3];
                hermite_fill(a, &mut h);
                h
            })
            .collect();
        for &(t, s) in &[(0.7, -1.1), (1.5, 0.4), (-0.3, 2.0)] {
            let analytic = b.fourier_eval(t, s);
            for k in 0..b.len() {
                let (k1, k2) = b.pair(k);
                // separable: product of 1-D transforms
                let one_d = |freq: f64, order: usize| {
                    let re: Vec<f64> = grid
                        .iter()
                        .zip(&table)
                        .map(|(a, h)| (freq * a).cos() * h[order])
                        .collect();
                    let im: Vec<f64> = grid
                        .iter()
                        .zip(&table)
                        .map(|(a, h)| (freq * a).sin() * h[order])
                        .collect();
                    Complex64::new(trapezoid_uniform(&re, step), trapezoid_uniform(&im, step))
                };
                let numeric = one_d(t, k1) * one_d(s, k2);
                assert!((numeric - analytic[k]).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let step = 1e-5;
        let fd = |k: usize, b: f64| {
            (hermite_eval(k, b + step).unwrap() - hermite_eval(k, b - step).unwrap()) / (2.0 * step)
        };
        assert_eq!(hermite_derivative(0, 0.0).unwrap(), 0.0);
        let d1 = hermite_derivative(1, 0.0).unwrap();
        let by_hand =
            0.5f64.sqrt() * hermite_eval(0, 0.0).unwrap() - hermite_eval(2, 0.0).unwrap();
        assert!((d1 - by_hand).abs() < 1e-15);
        assert!(((d1 - fd(1, 0.0)) / d1).abs() < 1e-6);

        let d7 = hermite_derivative(7, 2.1).unwrap();
        assert!(((d7 - fd(7, 2.1)) / d7).abs() < 1e-6);

        for k in 0..=10 {
            for i in 0..=80 {
                let b = -4.0 + 0.1 * i as f64;
                let exact = hermite_derivative(k, b).unwrap();
                let approx = fd(k, b);
                if exact.abs() > 1e-3 {
                    assert!(((exact - approx) / exact).abs() < 1e-6, "k={k} b={b}");
                } else {
                    assert!((exact - approx).abs() < 1e-9, "k={k} b={b}");
                }
            }
        }
    }

    #[test]
    fn sup_norm_bounded_by_h0_at_origin() {
        let mut row = vec![0.0; MAX_ORDER + 1];
        for i in 0..=4000 {
            let b = -20.0 + 0.01 * i as f64;
            hermite_fill(b, &mut row);
            for v in &row {
                assert!(v.abs() <= H0_AT_ZERO + 1e-9);
            }
        }
    }

    #[test]
    fn slope_marginal_matches_numeric_integration() {
        let b = HermiteBasis::new(4, 3).unwrap();
        let step = 0.01;
        let grid: Vec<f64> = (0..=2400).map(|i| -12.0 + step * i as f64).collect();
        let analytic = b.slope_marginal_eval(0.35);
        for k in 0..b.len() {
            let vals: Vec<f64> = grid.iter().map(|&b0| b.eval(b0, 0.35)[k]).collect();
            assert!((trapezoid_uniform(&vals, step) - analytic[k]).abs() < 1e-10);
        }
    }
}
