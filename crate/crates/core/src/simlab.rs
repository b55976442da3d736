//! Simulation designs with known conditional slope densities and a
//! replication harness.

use std::f64::consts::FRAC_1_SQRT_2;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::{derive_seed, quantile_sorted, Dataset, Matrix};
use crate::error::{Error, Result};
use crate::pipeline::{fit_conditional_density, ConditionalDensityModel, FitConfig};
use crate::quadrature::{step_grid, trapezoid};

/// Mixture components of the slope: `N(-1.5, 1)` and `N(1.5, 1/2)`.
pub const LEFT_MEAN: f64 = -1.5;
pub const RIGHT_MEAN: f64 = 1.5;
pub const RIGHT_SD: f64 = FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpKind {
    /// Controls shift the slope mixture.
    Dgp1,
    /// `X2` sets the mixture weights.
    Dgp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, seed: u64) -> Self {
        Self { kind, n, p: 10, seed }
    }
}

/// A simulated sample together with the latent coefficients.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: Dataset,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

fn mixture_draw(rng: &mut ChaCha8Rng, left_weight: f64) -> f64 {
    let u: f64 = rng.random();
    let z: f64 = StandardNormal.sample(rng);
    if u < left_weight {
        LEFT_MEAN + z
    } else {
        RIGHT_MEAN + RIGHT_SD * z
    }
}

/// Simulates `spec`, optionally holding one control column at a fixed value.
pub fn simulate_with(spec: &DgpSpec, fixed: Option<(usize, f64)>) -> Result<Simulation> {
    if spec.n == 0 {
        return Err(Error::config("n must be positive"));
    }
    if spec.p < 3 {
        return Err(Error::config(format!("p must be at least 3, got {}", spec.p)));
    }
    if let Some((j, _)) = fixed {
        if j >= spec.p {
            return Err(Error::config(format!("fixed column {j} is out of range")));
        }
    }
    let phi = std_normal();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = Matrix::zeros(spec.n, spec.p);
    let (mut y, mut w) = (Vec::with_capacity(spec.n), Vec::with_capacity(spec.n));
    let (mut b0, mut b1) = (Vec::with_capacity(spec.n), Vec::with_capacity(spec.n));
    for i in 0..spec.n {
        let row = x.row_mut(i);
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        if let Some((j, value)) = fixed {
            row[j] = value;
        }
        let (x1, x2, x3) = (row[0], row[1], row[2]);
        let a0: f64 = StandardNormal.sample(&mut rng);
        let v: f64 = StandardNormal.sample(&mut rng);
        let slope = match spec.kind {
            DgpKind::Dgp1 => x2 + 0.5 * x3 + 0.25 * x2 * x3 + mixture_draw(&mut rng, 0.5),
            DgpKind::Dgp2 => mixture_draw(&mut rng, phi.cdf(x2)),
        };
        let intercept = x1.sin() + a0;
        let wi = 1.0 + x3 + (1.0 + x3 * x3) * v;
        y.push(intercept + slope * wi);
        w.push(wi);
        b0.push(intercept);
        b1.push(slope);
    }
    Ok(Simulation {
        data: Dataset::new(y, w, x)?,
        b0,
        b1,
    })
}

pub fn simulate(spec: &DgpSpec) -> Result<Simulation> {
    simulate_with(spec, None)
}

pub fn generate_dgp1(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    Ok(simulate(&DgpSpec { kind: DgpKind::Dgp1, n, p, seed })?.data)
}

pub fn generate_dgp2(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    Ok(simulate(&DgpSpec { kind: DgpKind::Dgp2, n, p, seed })?.data)
}

/// The evaluation point `(0, 0.3, 0, ..., 0)`.
pub fn test_point(p: usize) -> Vec<f64> {
    let mut x = vec![0.0; p];
    x[1] = 0.3;
    x
}

/// Weight of the left component and the common shift at `x`.
fn mixture_at(kind: DgpKind, x: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 3 {
        return Err(Error::domain("x must have at least three coordinates"));
    }
    Ok(match kind {
        DgpKind::Dgp1 => (0.5, x[1] + 0.5 * x[2] + 0.25 * x[1] * x[2]),
        DgpKind::Dgp2 => (std_normal().cdf(x[1]), 0.0),
    })
}

/// True density of `B1` given `X = x`.
pub fn true_conditional_density(kind: DgpKind, x: &[f64], b1_grid: &[f64]) -> Result<Vec<f64>> {
    let (weight, shift) = mixture_at(kind, x)?;
    let left = Normal::new(shift + LEFT_MEAN, 1.0).expect("valid parameters");
    let right = Normal::new(shift + RIGHT_MEAN, RIGHT_SD).expect("valid parameters");
    Ok(b1_grid
        .iter()
        .map(|&b| weight * left.pdf(b) + (1.0 - weight) * right.pdf(b))
        .collect())
}

/// True joint density of `(B0, B1)` given `X = x`; `out[i][j]` is at
/// `(b0_grid[i], b1_grid[j])`.
pub fn true_joint_density(kind: DgpKind, x: &[f64], b0_grid: &[f64], b1_grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    let slope = true_conditional_density(kind, x, b1_grid)?;
    let intercept = Normal::new(x[0].sin(), 1.0).expect("valid parameters");
    Ok(b0_grid
        .iter()
        .map(|&b0| {
            let f0 = intercept.pdf(b0);
            slope.iter().map(|s| f0 * s).collect()
        })
        .collect())
}

/// `E[B1 | X = x]`.
pub fn true_slope_mean(kind: DgpKind, x: &[f64]) -> Result<f64> {
    let (weight, shift) = mixture_at(kind, x)?;
    Ok(shift + weight * LEFT_MEAN + (1.0 - weight) * RIGHT_MEAN)
}

/// Grid on `[-8, 8]` with step 0.05 used for integrated errors.
pub fn ise_grid() -> Vec<f64> {
    step_grid(-8.0, 8.0, 0.05)
}

pub fn ise(grid: &[f64], estimate: &[f64], truth: &[f64]) -> f64 {
    let sq: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).collect();
    trapezoid(grid, &sq)
}

/// One replication: the simulated data, the fitted model and the slope
/// density at the test point on `grid`.
#[derive(Debug, Clone)]
pub struct Replication {
    pub data: Dataset,
    pub model: ConditionalDensityModel,
    pub curve: Vec<f64>,
}

/// Seeds for replication `rep` of a run with master seed `master`.
pub fn replication_seeds(master: u64, rep: usize) -> (u64, u64) {
    (
        derive_seed(master, &[rep as u64, 0]),
        derive_seed(master, &[rep as u64, 1]),
    )
}

/// Simulates and fits replication `rep`; the config's test points are
/// replaced by the design's test point.
pub fn fit_replication(spec: &DgpSpec, config: &FitConfig, rep: usize, grid: &[f64]) -> Result<Replication> {
    let (data_seed, fit_seed) = replication_seeds(spec.seed, rep);
    let data = simulate(&DgpSpec { seed: data_seed, ..*spec })?.data;
    let x = test_point(spec.p);
    let mut cfg = config.clone();
    cfg.seed = fit_seed;
    cfg.test_points = vec![x.clone()];
    let model = fit_conditional_density(&data, &cfg)?;
    let curve = model.slope_density(&x, grid)?.values;
    Ok(Replication { data, model, curve })
}

#[derive(Debug, Clone)]
pub struct McReport {
    pub b1_grid: Vec<f64>,
    pub true_density: Vec<f64>,
    pub median_curve: Vec<f64>,
    pub q05_curve: Vec<f64>,
    pub q95_curve: Vec<f64>,
    pub ise: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
    pub failures: usize,
    pub spec: DgpSpec,
    pub config: FitConfig,
}

impl McReport {
    /// Pointwise summaries of per-replication curves.
    pub fn from_curves(
        spec: &DgpSpec,
        config: &FitConfig,
        b1_grid: &[f64],
        curves: Vec<Vec<f64>>,
        failures: usize,
    ) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::numeric("every replication failed"));
        }
        let truth = true_conditional_density(spec.kind, &test_point(spec.p), b1_grid)?;
        let mut median = Vec::with_capacity(b1_grid.len());
        let mut q05 = Vec::with_capacity(b1_grid.len());
        let mut q95 = Vec::with_capacity(b1_grid.len());
        let mut column = vec![0.0; curves.len()];
        for j in 0..b1_grid.len() {
            for (c, curve) in column.iter_mut().zip(&curves) {
                *c = curve[j];
            }
            column.sort_by(|a, b| a.total_cmp(b));
            median.push(quantile_sorted(&column, 0.5));
            q05.push(quantile_sorted(&column, 0.05));
            q95.push(quantile_sorted(&column, 0.95));
        }
        let ise = curves.iter().map(|c| ise(b1_grid, c, &truth)).collect();
        Ok(Self {
            b1_grid: b1_grid.to_vec(),
            true_density: truth,
            median_curve: median,
            q05_curve: q05,
            q95_curve: q95,
            ise,
            curves,
            failures,
            spec: *spec,
            config: config.clone(),
        })
    }
}

/// Repeats simulation and fitting `reps` times on the integrated-error grid.
pub fn run_monte_carlo(spec: &DgpSpec, config: &FitConfig, reps: usize) -> Result<McReport> {
    if reps < 2 {
        return Err(Error::config("a Monte Carlo run needs at least 2 replications"));
    }
    let grid = ise_grid();
    let results: Vec<Result<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|r| fit_replication(spec, config, r, &grid).map(|rep| rep.curve))
        .collect();
    let mut curves = Vec::with_capacity(reps);
    let mut failures = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(c) => curves.push(c),
            Err(e) => {
                warn!("replication {r} failed: {e}");
                failures += 1;
            }
        }
    }
    McReport::from_curves(spec, config, &grid, curves, failures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::trapezoid;

    fn big(kind: DgpKind, fixed: Option<(usize, f64)>) -> Simulation {
        let spec = DgpSpec {
            kind,
            n: 1_000_000,
            p: 3,
            seed: 77,
        };
        simulate_with(&spec, fixed).unwrap()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn dgp1_moments() {
        let s = big(DgpKind::Dgp1, None);
        assert!((mean(&s.data.w) - 1.0).abs() < 0.01);
        assert!(mean(&s.b1).abs() < 0.01);
        let a1: Vec<f64> = (0..s.data.n())
            .map(|i| {
                let x = s.data.x.row(i);
                s.b1[i] - (x[1] + 0.5 * x[2] + 0.25 * x[1] * x[2])
            })
            .collect();
        let m = mean(&a1);
        let var = a1.iter().map(|a| (a - m).powi(2)).sum::<f64>() / a1.len() as f64;
        assert!(m.abs() < 0.01);
        assert!((var - 3.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn dgp2_mixture_weights_follow_x2() {
        // with centers ∓1.5 the left weight is (1.5 − E[B1]) / 3
        let left = |s: &Simulation| (1.5 - mean(&s.b1)) / 3.0;
        let s = big(DgpKind::Dgp2, Some((1, -5.0)));
        assert!((mean(&s.b1) - 1.5).abs() < 0.02);
        let s = big(DgpKind::Dgp2, Some((1, 0.0)));
        assert!((left(&s) - 0.5).abs() < 0.01);
        let s = big(DgpKind::Dgp2, Some((1, 0.3)));
        assert!((left(&s) - 0.618).abs() < 0.01);
    }

    #[test]
    fn joint_density_factorizes_into_its_marginals() {
        let x = vec![0.7, 0.3, -0.4];
        let g0 = step_grid(-7.0, 7.0, 0.05);
        let g1 = ise_grid();
        let joint = true_joint_density(DgpKind::Dgp1, &x, &g0, &g1).unwrap();
        let slope = true_conditional_density(DgpKind::Dgp1, &x, &g1).unwrap();
        for (j, s) in slope.iter().enumerate() {
            let column: Vec<f64> = joint.iter().map(|row| row[j]).collect();
            assert!((trapezoid(&g0, &column) - s).abs() < 1e-8);
        }
        let mean_b0: f64 = {
            let rows: Vec<f64> = joint.iter().map(|row| trapezoid(&g1, row)).collect();
            let weighted: Vec<f64> = rows.iter().zip(&g0).map(|(r, b)| r * b).collect();
            trapezoid(&g0, &weighted)
        };
        assert!((mean_b0 - 0.7f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn simulation_is_seeded() {
        let spec = DgpSpec::new(DgpKind::Dgp1, 50, 3);
        assert_eq!(simulate(&spec).unwrap().data, simulate(&spec).unwrap().data);
        let other = DgpSpec::new(DgpKind::Dgp1, 50, 4);
        assert_ne!(simulate(&spec).unwrap().data, simulate(&other).unwrap().data);
        assert_eq!(simulate(&spec).unwrap().data.d(), 10);
        assert!(simulate(&DgpSpec { p: 2, ..spec }).is_err());
    }

    #[test]
    fn true_density_at_the_test_point() {
        let x = test_point(10);
        let f = true_conditional_density(DgpKind::Dgp1, &x, &[0.3]).unwrap()[0];
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let sd = 0.5f64.sqrt();
        let expected = 0.5 * phi(1.5) + 0.5 * phi(1.5 / sd) / sd;
        assert!((f - expected).abs() < 1e-12);
        assert!((f - 0.0945).abs() < 5e-4);

        let grid = ise_grid();
        for kind in [DgpKind::Dgp1, DgpKind::Dgp2] {
            let d = true_conditional_density(kind, &x, &grid).unwrap();
            assert!((trapezoid(&grid, &d) - 1.0).abs() < 1e-6);
        }
        let d2 = true_conditional_density(DgpKind::Dgp2, &x, &[-1.2, 1.8]).unwrap();
        assert!(d2[0] > d2[1]);
        let d1 = true_conditional_density(DgpKind::Dgp1, &x, &[-1.25, -1.2, -1.15, 1.75, 1.8, 1.85]).unwrap();
        assert!(d1[1] > d1[0] && d1[1] > d1[2] && d1[4] > d1[3] && d1[4] > d1[5]);
        assert!((true_slope_mean(DgpKind::Dgp1, &x).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn replications_with_equal_seeds_agree() {
        let spec = DgpSpec::new(DgpKind::Dgp1, 120, 5);
        let mut cfg = FitConfig::default();
        cfg.regressor.forest.n_trees = 20;
        let grid = step_grid(-3.0, 3.0, 0.25);
        let a = fit_replication(&spec, &cfg, 1, &grid).unwrap();
        let b = fit_replication(&spec, &cfg, 1, &grid).unwrap();
        assert_eq!(a.curve, b.curve);
        let report = McReport::from_curves(&spec, &cfg, &grid, vec![a.curve.clone(), b.curve], 0).unwrap();
        for j in 0..grid.len() {
            assert_eq!(report.q05_curve[j], report.q95_curve[j]);
        }
        assert_eq!(report.ise[0], report.ise[1]);
        assert!(run_monte_carlo(&spec, &cfg, 1).is_err());
    }

    #[test]
    fn report_quantiles_are_ordered() {
        let spec = DgpSpec::new(DgpKind::Dgp1, 100, 1);
        let grid = step_grid(-1.0, 1.0, 0.5);
        let curves: Vec<Vec<f64>> = (0..7)
            .map(|r| grid.iter().map(|g| ((r * 31 % 7) as f64 - 3.0) * g + 0.1 * r as f64).collect())
            .collect();
        let rep = McReport::from_curves(&spec, &FitConfig::default(), &grid, curves, 2).unwrap();
        for j in 0..grid.len() {
            assert!(rep.q05_curve[j] <= rep.median_curve[j] && rep.median_curve[j] <= rep.q95_curve[j]);
        }
        assert_eq!(rep.failures, 2);
        assert!(McReport::from_curves(&spec, &FitConfig::default(), &grid, vec![], 3).is_err());
    }
}
