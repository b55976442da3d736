//! Fixed quadrature rules: Gauss–Hermite, Gauss–Legendre, trapezoid.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::basis::hermite_fill;
use crate::error::{Error, Result};

/// Gauss–Hermite rule for `∫ f(x) exp(-x^2) dx`.
///
/// Nodes come from the Golub–Welsch eigenproblem and are polished by Newton
/// steps on `h_n`. Weights are computed from Hermite *functions* so that no
/// intermediate overflows at large orders.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    scaled: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("quadrature needs at least one node"));
        }
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64 / 2.0).sqrt();
            jacobi[(k, k - 1)] = off;
            jacobi[(k - 1, k)] = off;
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.total_cmp(b));

        let mut h = vec![0.0; n + 1];
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                hermite_fill(*x, &mut h);
                let deriv = (2.0 * n as f64).sqrt() * h[n - 1] - *x * h[n];
                if deriv == 0.0 {
                    break;
                }
                let step = h[n] / deriv;
                *x -= step;
                if step.abs() < 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
        }
        // symmetrize
        for i in 0..n / 2 {
            let m = 0.5 * (nodes[n - 1 - i] - nodes[i]);
            nodes[i] = -m;
            nodes[n - 1 - i] = m;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }

        let mut scaled = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for &x in &nodes {
            hermite_fill(x, &mut h[..n]);
            let s = 1.0 / (n as f64 * h[n - 1] * h[n - 1]);
            scaled.push(s);
            weights.push(s * (-x * x).exp());
        }
        Ok(Self {
            nodes,
            weights,
            scaled,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Weights for `∫ f(x) exp(-x^2) dx ≈ Σ w_i f(x_i)`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights for `∫ g(x) dx ≈ Σ s_i g(x_i)` with `s_i = w_i exp(x_i^2)`.
    pub fn scaled_weights(&self) -> &[f64] {
        &self.scaled
    }
}

/// Gauss–Legendre rule mapped to `[a, b]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize, a: f64, b: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("quadrature needs at least one node"));
        }
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::domain(format!("invalid interval [{a}, {b}]")));
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let step = p / d;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = mid - half * x;
            nodes[n - 1 - i] = mid + half * x;
            weights[i] = half * w;
            weights[n - 1 - i] = half * w;
        }
        Ok(Self { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite trapezoid rule on a uniform grid.
pub fn trapezoid_uniform(values: &[f64], step: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => step * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1])),
    }
}

/// Composite trapezoid rule on an arbitrary increasing grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(grid.len(), values.len());
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

/// `n` evenly spaced points from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (end - start) / (n - 1) as f64;
            (0..n).map(|i| start + step * i as f64).collect()
        }
    }
}

/// Grid `start, start + step, ...` up to `end` (inclusive up to rounding).
pub fn step_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|i| start + step * i as f64).collect()
}
