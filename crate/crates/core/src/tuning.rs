//! Cross-validated choice of `(K2, σ_t)`.

use rayon::prelude::*;

use crate::data::{sample_variance, Dataset};
use crate::error::{Error, Result};
use crate::forest::fit_regressor;
use crate::pipeline::{
    density_from_coefficients, fit_conditional_density, ConditionalDensityModel, FitConfig, TAG_CV,
};
use crate::quadrature::{linspace, step_grid, trapezoid};
use crate::transforms::{default_v_rule, VOperator};

/// Smallest sample accepted by [`kernel_density_w`].
pub const MIN_KDE_SAMPLE: usize = 30;

const KDE_FLOOR: f64 = 1e-6;
const KDE_CUTOFF: f64 = 8.0;

/// Gaussian kernel density estimate of `f_W`, floored away from zero.
#[derive(Debug, Clone)]
pub struct KernelDensity {
    sorted: Vec<f64>,
    bandwidth: f64,
    floor: f64,
}

impl KernelDensity {
    fn raw(&self, w: f64) -> f64 {
        let h = self.bandwidth;
        let lo = self.sorted.partition_point(|&s| s < w - KDE_CUTOFF * h);
        let hi = self.sorted.partition_point(|&s| s <= w + KDE_CUTOFF * h);
        let sum: f64 = self.sorted[lo..hi]
            .iter()
            .map(|&s| {
                let u = (w - s) / h;
                (-0.5 * u * u).exp()
            })
            .sum();
        sum / (self.sorted.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn eval(&self, w: f64) -> f64 {
        self.raw(w).max(self.floor)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
}

/// Kernel estimate with Silverman's bandwidth `1.06 σ̂ n^(-1/5)`.
pub fn kernel_density_w(w: &[f64]) -> Result<KernelDensity> {
    if w.len() < MIN_KDE_SAMPLE {
        return Err(Error::data(format!(
            "density of W needs at least {MIN_KDE_SAMPLE} observations, got {}",
            w.len()
        )));
    }
    let sd = sample_variance(w).sqrt();
    if !(sd > 0.0) {
        return Err(Error::data("W has zero variance"));
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let bandwidth = 1.06 * sd * (w.len() as f64).powf(-0.2);
    let mut kde = KernelDensity {
        sorted,
        bandwidth,
        floor: 0.0,
    };
    let (lo, hi) = (kde.sorted[0], kde.sorted[kde.sorted.len() - 1]);
    let peak = linspace(lo, hi, 512).into_iter().map(|g| kde.raw(g)).fold(0.0, f64::max);
    kde.floor = KDE_FLOOR * peak;
    Ok(kde)
}

/// Terms of the criterion `Ĵ = ∫ f̂² db − 2 ∫ f̂ f db`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvValue {
    pub squared: f64,
    pub cross: f64,
}

impl CvValue {
    pub fn criterion(&self) -> f64 {
        self.squared - 2.0 * self.cross
    }
}

const SQUARED_HALF_WIDTH: f64 = 10.0;
const SQUARED_STEP: f64 = 0.05;

/// `∫∫ f̂(b | x)² db` on a grid centred at `β̂(x)`.
pub fn squared_norm(model: &ConditionalDensityModel, x: &[f64]) -> Result<f64> {
    let point = model.point(x)?;
    let c = model.coefficients(&point)?;
    let (b0, b1) = (point.beta.b0, point.beta.b1);
    let g0 = step_grid(b0 - SQUARED_HALF_WIDTH, b0 + SQUARED_HALF_WIDTH, SQUARED_STEP);
    let g1 = step_grid(b1 - SQUARED_HALF_WIDTH, b1 + SQUARED_HALF_WIDTH, SQUARED_STEP);
    let grid = density_from_coefficients(model.basis(), &c, (b0, b1), &g0, &g1);
    let inner: Vec<f64> = grid
        .values
        .iter()
        .map(|row| trapezoid(&g1, &row.iter().map(|v| v * v).collect::<Vec<_>>()))
        .collect();
    Ok(trapezoid(&g0, &inner))
}

/// Scalar targets `V(Y_i − b0 − b1 W_i, W_i)ᵀ c` for rows `idx`.
pub fn cv_targets(
    data: &Dataset,
    idx: &[usize],
    v_op: &VOperator,
    f_w: impl Fn(f64) -> f64,
    shift: (f64, f64),
    c_re: &[f64],
) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            let (w, y) = (data.w[i], data.y[i]);
            let v = v_op.eval(w, y - shift.0 - shift.1 * w, f_w(w))?;
            Ok(v.iter().zip(c_re).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Cross-validated criterion at the fitted test point `x`. The cross term of
/// split `m` regresses the scalar targets on `(X, W)` over the sample not
/// used for `Π̂`, and averages predictions at `(x, W_r)` over that sample.
pub fn cv_criterion(
    data: &Dataset,
    model: &ConditionalDensityModel,
    x: &[f64],
    f_w: &KernelDensity,
) -> Result<CvValue> {
    let point = model.point(x)?;
    let shift = (point.beta.b0, point.beta.b1);
    let v_op = VOperator::new(model.basis(), &default_v_rule());
    let xw = data.x.with_column(&data.w)?;
    let config = model.config();
    let mut cross = 0.0;
    for (m, split) in model.splits().iter().enumerate() {
        if split.d_idx.is_empty() {
            return Err(Error::config(
                "no observations are held out from the coefficient fit; use cross-fitting splits",
            ));
        }
        let c_re: Vec<f64> = model.split_coefficients(&point, m)?.iter().map(|c| c.re).collect();
        let z = cv_targets(data, &split.d_idx, &v_op, |w| f_w.eval(w), shift, &c_re)?;
        let reg = fit_regressor(&xw.select_rows(&split.d_idx), &z, &config.params_for(&[TAG_CV, m as u64]))?;
        let mut held: Vec<f64> = split.d_idx.iter().map(|&i| data.w[i]).collect();
        held.sort_by(|a, b| a.total_cmp(b));
        let mut at = x.to_vec();
        at.push(0.0);
        cross += reg.predict_averaged(&at, x.len(), &held)?.0;
    }
    cross /= model.splits().len() as f64;
    Ok(CvValue {
        squared: squared_norm(model, x)?,
        cross,
    })
}

/// Criterion values over a `(K2, σ_t)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningGrid {
    pub k2_values: Vec<usize>,
    pub sigma_t_values: Vec<f64>,
    /// `criterion[i][j]` at `(k2_values[i], sigma_t_values[j])`.
    pub criterion: Vec<Vec<f64>>,
    pub selected: (usize, f64),
}

impl TuningGrid {
    /// Selects the finite minimum; ties go to the smaller `K2`, then the
    /// smaller `σ_t`.
    pub fn from_criterion(k2_values: Vec<usize>, sigma_t_values: Vec<f64>, criterion: Vec<Vec<f64>>) -> Result<Self> {
        if criterion.len() != k2_values.len() || criterion.iter().any(|r| r.len() != sigma_t_values.len()) {
            return Err(Error::config("criterion table does not match the grid"));
        }
        let mut order_k: Vec<usize> = (0..k2_values.len()).collect();
        order_k.sort_by_key(|&i| k2_values[i]);
        let mut order_s: Vec<usize> = (0..sigma_t_values.len()).collect();
        order_s.sort_by(|&a, &b| sigma_t_values[a].total_cmp(&sigma_t_values[b]));
        let mut best: Option<(usize, usize)> = None;
        for &i in &order_k {
            for &j in &order_s {
                let v = criterion[i][j];
                if v.is_finite() && best.is_none_or(|(bi, bj)| v < criterion[bi][bj]) {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.ok_or_else(|| Error::numeric("no grid cell has a finite criterion"))?;
        Ok(Self {
            selected: (k2_values[i], sigma_t_values[j]),
            k2_values,
            sigma_t_values,
            criterion,
        })
    }

    pub fn selected_value(&self) -> f64 {
        let i = self.k2_values.iter().position(|&k| k == self.selected.0).unwrap();
        let j = self.sigma_t_values.iter().position(|&s| s == self.selected.1).unwrap();
        self.criterion[i][j]
    }
}

/// Evaluates the criterion at `x` for every `(K2, σ_t)` with `K1` held at
/// the configured value.
pub fn select_tuning(
    data: &Dataset,
    config: &FitConfig,
    k2_values: &[usize],
    sigma_t_values: &[f64],
    x: &[f64],
) -> Result<TuningGrid> {
    if k2_values.is_empty() || sigma_t_values.is_empty() {
        return Err(Error::config("tuning grid is empty"));
    }
    let f_w = kernel_density_w(&data.w)?;
    let cells: Vec<(usize, f64)> = k2_values
        .iter()
        .flat_map(|&k| sigma_t_values.iter().map(move |&s| (k, s)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(k2, sigma_t)| {
            let mut cfg = config.clone();
            cfg.k2 = k2;
            cfg.sigma_t = sigma_t;
            cfg.test_points = vec![x.to_vec()];
            let model = fit_conditional_density(data, &cfg)?;
            Ok(cv_criterion(data, &model, x, &f_w)?.criterion())
        })
        .collect::<Result<Vec<f64>>>()?;
    let criterion = values.chunks(sigma_t_values.len()).map(<[f64]>::to_vec).collect();
    TuningGrid::from_criterion(k2_values.to_vec(), sigma_t_values.to_vec(), criterion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::HermiteBasis;
    use crate::data::Matrix;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_pdf(z: f64) -> f64 {
        (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn kde_recovers_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let kde = kernel_density_w(&w).unwrap();
        assert!((kde.eval(0.0) - 0.3989).abs() < 0.02);
        let grid = linspace(-6.0, 6.0, 2401);
        let vals: Vec<f64> = grid.iter().map(|&g| kde.eval(g)).collect();
        assert!((trapezoid(&grid, &vals) - 1.0).abs() < 1e-3);
        assert!(kde.eval(100.0) > 0.0);
    }

    #[test]
    fn kde_rejects_degenerate_samples() {
        assert!(kernel_density_w(&[1.0; 50]).is_err());
        assert!(kernel_density_w(&[0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn selection_breaks_ties_towards_parsimony() {
        let g = TuningGrid::from_criterion(vec![7, 3, 5], vec![1.0], vec![vec![-1.0], vec![-1.0], vec![-1.0]]).unwrap();
        assert_eq!(g.selected, (3, 1.0));
        let g = TuningGrid::from_criterion(vec![3], vec![2.0, 0.5], vec![vec![-2.0, -2.0]]).unwrap();
        assert_eq!(g.selected, (3, 0.5));
        let g = TuningGrid::from_criterion(vec![3, 5], vec![1.0], vec![vec![f64::INFINITY], vec![4.0]]).unwrap();
        assert_eq!(g.selected, (5, 1.0));
        let g = TuningGrid::from_criterion(vec![5], vec![1.0], vec![vec![0.3]]).unwrap();
        assert_eq!(g.selected, (5, 1.0));
        assert_eq!(g.selected_value(), 0.3);
        assert!(TuningGrid::from_criterion(vec![5], vec![1.0], vec![vec![f64::NAN]]).is_err());
    }

    /// Under a Gaussian coefficient model without controls, the sample mean
    /// of the V targets estimates `∫ f_c f_B db`, so `Ĵ + ∫ f_B²` matches the
    /// integrated squared error of the sieve density `f_c`. Cauchy regressors
    /// keep the weighted targets square integrable.
    #[test]
    fn criterion_identity_under_gaussian_coefficients() {
        let n = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s0, s1) = (0.8, 0.6);
        let mut y = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        for _ in 0..n {
            let wi = (std::f64::consts::PI * (rng.random::<f64>() - 0.5)).tan();
            let a0: f64 = StandardNormal.sample(&mut rng);
            let a1: f64 = StandardNormal.sample(&mut rng);
            let (b0, b1) = (s0 * a0, s1 * a1);
            w.push(wi);
            y.push(b0 + b1 * wi);
        }
        let data = Dataset::new(y, w, Matrix::zeros(n, 1)).unwrap();
        let basis = HermiteBasis::new(3, 3).unwrap();
        let c: Vec<f64> = vec![0.5, 0.0, 0.1, 0.0, 0.0, 0.0, 0.2, 0.0, -0.05];
        let cc: Vec<Complex64> = c.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let cauchy = |w: f64| 1.0 / (std::f64::consts::PI * (1.0 + w * w));
        let v_op = VOperator::new(basis, &default_v_rule());
        let idx: Vec<usize> = (0..n).collect();
        let z = cv_targets(&data, &idx, &v_op, cauchy, (0.0, 0.0), &c).unwrap();
        let cross = z.iter().sum::<f64>() / n as f64;

        let grid = step_grid(-7.0, 7.0, 0.05);
        let fc = density_from_coefficients(basis, &cc, (0.0, 0.0), &grid, &grid);
        let integrate = |f: &dyn Fn(usize, usize) -> f64| {
            let inner: Vec<f64> = (0..grid.len())
                .map(|i| trapezoid(&grid, &(0..grid.len()).map(|j| f(i, j)).collect::<Vec<_>>()))
                .collect();
            trapezoid(&grid, &inner)
        };
        let fb = |i: usize, j: usize| normal_pdf(grid[i] / s0) / s0 * normal_pdf(grid[j] / s1) / s1;
        let squared = integrate(&|i, j| fc.values[i][j].powi(2));
        let truth_sq = integrate(&|i, j| fb(i, j).powi(2));
        let ise = integrate(&|i, j| (fc.values[i][j] - fb(i, j)).powi(2));
        let j_hat = CvValue { squared, cross }.criterion();
        assert!((j_hat + truth_sq - ise).abs() < 0.02, "{} vs {}", j_hat + truth_sq, ise);
    }

    #[test]
    fn targets_are_linear_in_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 60;
        let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let data = Dataset::new(y, w, Matrix::zeros(n, 1)).unwrap();
        let basis = HermiteBasis::new(2, 2).unwrap();
        let v_op = VOperator::new(basis, &default_v_rule());
        let kde = kernel_density_w(&data.w).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let a = [0.3, -0.1, 0.2, 0.05];
        let b = [0.1, 0.4, -0.2, 0.0];
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x + y).collect();
        let za = cv_targets(&data, &idx, &v_op, |w| kde.eval(w), (0.1, 0.2), &a).unwrap();
        let zb = cv_targets(&data, &idx, &v_op, |w| kde.eval(w), (0.1, 0.2), &b).unwrap();
        let zab = cv_targets(&data, &idx, &v_op, |w| kde.eval(w), (0.1, 0.2), &ab).unwrap();
        for i in 0..n {
            assert!((zab[i] - 2.0 * za[i] - zb[i]).abs() < 1e-12);
        }
    }
}
