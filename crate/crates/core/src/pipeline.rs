//! The two-stage estimator: conditional means, demeaned sieve coefficients
//! learned on split samples, cross-fit aggregation and density evaluation.

use std::borrow::Cow;

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::basis::HermiteBasis;
use crate::data::{derive_seed, sample_variance, Dataset, Matrix};
use crate::error::{Error, Result};
use crate::forest::{
    fit_regressor, little_bags_variance, CausalForest, Regressor, RegressorKind, RegressorParams,
};
use crate::quadrature::trapezoid;
use crate::transforms::{
    build_measure, q_inverse, q_matrix, QMatrix, TOperator, WeightingMeasure, DEFAULT_MEASURE_NODES,
};

/// Smallest sample the splitting scheme accepts.
pub const MIN_OBSERVATIONS: usize = 50;

/// Block size below which inference-mode fits warn.
pub const SMALL_BLOCK: usize = 100;

const TAG_BETA: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_OUTCOME: u64 = 3;
const TAG_W_MODEL: u64 = 4;
const TAG_COEF: u64 = 5;
pub(crate) const TAG_CV: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Plain,
    /// Residualize `W` on `X` and estimate `Q` on the coefficient sample.
    OrthogonalW,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub k1: usize,
    pub k2: usize,
    pub sigma_t: f64,
    pub measure_nodes: usize,
    /// Number of cross-fit splits `M`.
    pub splits: usize,
    pub mode: Mode,
    /// Fit each coefficient on its own block of the R sample so that
    /// per-coefficient variances are available.
    pub inference: bool,
    /// Average coefficient predictions over `W` from sample D only.
    pub holdout_w: bool,
    pub ridge: f64,
    /// Clip negative density values and renormalize on the evaluation grid.
    pub clip_renormalize: bool,
    pub regressor: RegressorParams,
    pub beta_method: BetaMethod,
    pub seed: u64,
    pub test_points: Vec<Vec<f64>>,
    /// Keep per-split regressors so that new points can be evaluated.
    pub retain_models: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k1: 3,
            k2: 3,
            sigma_t: 1.0,
            measure_nodes: DEFAULT_MEASURE_NODES,
            splits: 1,
            mode: Mode::Plain,
            inference: false,
            holdout_w: false,
            ridge: 0.0,
            clip_renormalize: false,
            regressor: RegressorParams::default(),
            beta_method: BetaMethod::CausalForest,
            seed: 0,
            test_points: Vec::new(),
            retain_models: false,
        }
    }
}

impl FitConfig {
    fn validate(&self, data: &Dataset) -> Result<HermiteBasis> {
        let basis = HermiteBasis::new(self.k1, self.k2).map_err(|e| Error::config(e.to_string()))?;
        if self.splits == 0 {
            return Err(Error::config("the number of splits must be at least 1"));
        }
        if data.n() < MIN_OBSERVATIONS {
            return Err(Error::data(format!(
                "at least {MIN_OBSERVATIONS} observations are required, got {}",
                data.n()
            )));
        }
        if let Some(p) = self.test_points.iter().find(|p| p.len() != data.d()) {
            return Err(Error::config(format!(
                "test point has {} coordinates but X has {} columns",
                p.len(),
                data.d()
            )));
        }
        if self.inference {
            if self.regressor.kind != RegressorKind::HonestForest {
                return Err(Error::config("inference mode requires the honest forest"));
            }
            let f = &self.regressor.forest;
            if f.ci_group_size < 2 || f.n_trees < 50 {
                return Err(Error::config(
                    "inference mode needs at least 50 trees grown in groups of two or more",
                ));
            }
            let r = data.n() - data.n() / 2;
            let k = basis.len();
            let need = 2 * f.min_leaf.max(1);
            if r / k < need {
                return Err(Error::config(format!(
                    "inference mode splits R into K = {k} blocks of {} observations, below the \
                     minimum of {need}; it requires n >= {}",
                    r / k,
                    2 * k * need
                )));
            }
            if r / k < SMALL_BLOCK {
                warn!(
                    "inference blocks hold only {} observations each (K = {k}); variance estimates will be noisy",
                    r / k
                );
            }
        }
        Ok(basis)
    }

    pub(crate) fn params_for(&self, path: &[u64]) -> RegressorParams {
        let mut p = self.regressor.clone();
        p.forest.seed = derive_seed(self.seed, path);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaMethod {
    /// Causal forest on outcome and regressor centered by out-of-bag
    /// regression forests.
    CausalForest,
    /// Ratio of four separately fitted conditional moment regressions.
    MomentRatio,
}

/// Full-sample estimator of `β(x) = E[B | X = x]`.
#[derive(Debug, Clone)]
pub enum BetaModel {
    Causal {
        mean_y: Regressor,
        mean_w: Regressor,
        slope: CausalForest,
        eps: f64,
    },
    Moments {
        mean_y: Regressor,
        mean_w: Regressor,
        mean_yw: Regressor,
        mean_ww: Regressor,
        eps: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaEstimate {
    pub b0: f64,
    pub b1: f64,
    /// The conditional variance of `W` fell below the guard.
    pub guarded: bool,
}

/// Step-1 estimate of `β(x)`. The slope is a local covariance ratio
/// `Cov(Y, W | x) / max(Var(W | x), ε)` with `ε = 1e-6 Var(W)`, and
/// `β̂0 = Ê[Y|x] − β̂1 Ê[W|x]`. The conditional-moment regressions share
/// one seed, so their trees draw the same subsamples and candidate features.
pub fn estimate_beta(data: &Dataset, params: &RegressorParams, method: BetaMethod) -> Result<BetaModel> {
    let var_w = sample_variance(&data.w);
    if !(var_w > 0.0) {
        return Err(Error::data("W has zero sample variance"));
    }
    let eps = 1e-6 * var_w;
    let seeded = |j: u64| {
        let mut p = params.clone();
        p.forest.seed = derive_seed(params.forest.seed, &[TAG_BETA, j]);
        p
    };
    match method {
        BetaMethod::CausalForest => {
            if params.kind != RegressorKind::HonestForest {
                return Err(Error::config("the causal forest needs the honest forest regressor"));
            }
            let (mean_y, mean_w) = rayon::join(
                || fit_regressor(&data.x, &data.y, &seeded(0)),
                || fit_regressor(&data.x, &data.w, &seeded(0)),
            );
            let (mean_y, mean_w) = (mean_y?, mean_w?);
            let centered = |r: &Regressor, v: &[f64]| -> Result<Vec<f64>> {
                let Regressor::Forest(f) = r else { unreachable!() };
                let oob = f.oob_predictions(&data.x)?;
                let full = f.predict_rows(&data.x)?;
                Ok(v.iter()
                    .zip(oob.iter().zip(&full))
                    .map(|(v, (o, p))| v - if o.is_finite() { *o } else { *p })
                    .collect())
            };
            let y_c = centered(&mean_y, &data.y)?;
            let w_c = centered(&mean_w, &data.w)?;
            let slope = CausalForest::fit(&data.x, &y_c, &w_c, &seeded(2).forest)?;
            Ok(BetaModel::Causal {
                mean_y,
                mean_w,
                slope,
                eps,
            })
        }
        BetaMethod::MomentRatio => {
            let yw: Vec<f64> = data.y.iter().zip(&data.w).map(|(y, w)| y * w).collect();
            let ww: Vec<f64> = data.w.iter().map(|w| w * w).collect();
            let targets: [&[f64]; 4] = [&data.y, &data.w, &yw, &ww];
            let mut fits = targets
                .par_iter()
                .map(|t| fit_regressor(&data.x, t, &seeded(0)))
                .collect::<Result<Vec<_>>>()?
                .into_iter();
            let mut next = || fits.next().expect("four moment fits");
            Ok(BetaModel::Moments {
                mean_y: next(),
                mean_w: next(),
                mean_yw: next(),
                mean_ww: next(),
                eps,
            })
        }
    }
}

impl BetaModel {
    pub fn predict(&self, x: &[f64]) -> Result<BetaEstimate> {
        let (ey, ew, cov, var, eps) = match self {
            BetaModel::Causal {
                mean_y,
                mean_w,
                slope,
                eps,
            } => {
                let m = slope.moments(x)?;
                (mean_y.predict(x)?, mean_w.predict(x)?, m.covariance(), m.variance(), *eps)
            }
            BetaModel::Moments {
                mean_y,
                mean_w,
                mean_yw,
                mean_ww,
                eps,
            } => {
                let ey = mean_y.predict(x)?;
                let ew = mean_w.predict(x)?;
                (ey, ew, mean_yw.predict(x)? - ey * ew, mean_ww.predict(x)? - ew * ew, *eps)
            }
        };
        let b1 = cov / var.max(eps);
        Ok(BetaEstimate {
            b0: ey - b1 * ew,
            b1,
            guarded: var < eps,
        })
    }

    /// Split importance of the slope estimator: the causal forest, or the
    /// average over the four moment forests.
    pub fn importance(&self) -> Result<Vec<f64>> {
        match self {
            BetaModel::Causal { slope, .. } => Ok(slope.split_importance().to_vec()),
            BetaModel::Moments {
                mean_y,
                mean_w,
                mean_yw,
                mean_ww,
                ..
            } => {
                let parts = [mean_y, mean_w, mean_yw, mean_ww]
                    .iter()
                    .map(|r| r.split_importance())
                    .collect::<Result<Vec<_>>>()?;
                let d = parts[0].len();
                Ok((0..d).map(|j| parts.iter().map(|p| p[j]).sum::<f64>() / 4.0).collect())
            }
        }
    }
}

/// Complex coefficient vector `Π̂(x)` of one split, with per-coefficient
/// variances `Var(Re) + Var(Im)` in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientEstimate {
    pub pi: Vec<Complex64>,
    pub sigma2: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct SplitModels {
    outcome: Regressor,
    w_model: Option<Regressor>,
    coef: Vec<(Regressor, Regressor)>,
}

#[derive(Debug, Clone)]
pub struct SplitRecord {
    /// Sample used for `m̂` (and `ĝ`), sorted.
    pub d_idx: Vec<usize>,
    /// Sample used for the coefficient regressions, sorted.
    pub r_idx: Vec<usize>,
    /// Per-coefficient blocks of R in inference mode.
    pub blocks: Vec<Vec<usize>>,
    /// Per-split `Q̂` in orthogonal mode.
    pub q: Option<QMatrix>,
    /// Sorted regressor values the coefficient predictions are averaged over.
    pub averaging_w: Vec<f64>,
    shape_importance: Option<Vec<f64>>,
    models: Option<SplitModels>,
}

#[derive(Debug, Clone)]
pub struct PointFit {
    pub x: Vec<f64>,
    pub beta: BetaEstimate,
    pub per_split: Vec<CoefficientEstimate>,
}

#[derive(Debug, Clone)]
pub struct ConditionalDensityModel {
    basis: HermiteBasis,
    measure: WeightingMeasure,
    config: FitConfig,
    n_features: usize,
    beta: BetaModel,
    q: Option<QMatrix>,
    splits: Vec<SplitRecord>,
    points: Vec<PointFit>,
}

/// Density values on a `b0 × b1` grid; `values[i][j]` is at `(b0[i], b1[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub b0_grid: Vec<f64>,
    pub b1_grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// `max |Im| / max |Re|` of the complex sieve sum.
    pub imag_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeDensity {
    pub b1_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub imag_ratio: f64,
}

pub fn fit_conditional_density(data: &Dataset, config: &FitConfig) -> Result<ConditionalDensityModel> {
    let basis = config.validate(data)?;
    let measure = build_measure(config.sigma_t, config.measure_nodes).map_err(|e| Error::config(e.to_string()))?;
    let beta = estimate_beta(data, &config.params_for(&[TAG_BETA]), config.beta_method)?;

    let q = match config.mode {
        Mode::Plain => Some(q_inverse(q_matrix(basis, &measure, &data.w)?, config.ridge)?),
        Mode::OrthogonalW => None,
    };
    let mut sorted_w = data.w.clone();
    sorted_w.sort_by(|a, b| a.total_cmp(b));
    let xw = data.x.with_column(&data.w)?;

    let ctx = SplitContext {
        data,
        config,
        basis,
        measure: &measure,
        xw: &xw,
        sorted_w: &sorted_w,
    };
    let fitted = (0..config.splits)
        .into_par_iter()
        .map(|m| ctx.fit_split(m))
        .collect::<Result<Vec<_>>>()?;
    let (splits, estimates): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();

    let points = config
        .test_points
        .iter()
        .enumerate()
        .map(|(p, x)| {
            Ok(PointFit {
                x: x.clone(),
                beta: beta.predict(x)?,
                per_split: estimates.iter().map(|e: &Vec<CoefficientEstimate>| e[p].clone()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for p in &points {
        if p.beta.guarded {
            warn!("conditional variance of W is below the guard at test point {:?}", p.x);
        }
    }

    Ok(ConditionalDensityModel {
        basis,
        measure,
        config: config.clone(),
        n_features: data.d(),
        beta,
        q,
        splits,
        points,
    })
}

struct SplitContext<'a> {
    data: &'a Dataset,
    config: &'a FitConfig,
    basis: HermiteBasis,
    measure: &'a WeightingMeasure,
    xw: &'a Matrix,
    sorted_w: &'a [f64],
}

impl SplitContext<'_> {
    fn fit_split(&self, m: usize) -> Result<(SplitRecord, Vec<CoefficientEstimate>)> {
        let (data, cfg) = (self.data, self.config);
        let n = data.n();
        let d = data.d();
        let m64 = m as u64;

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SPLIT, m64])));
        let (d_perm, r_perm) = perm.split_at(n / 2);
        let mut d_idx = d_perm.to_vec();
        d_idx.sort_unstable();
        let mut r_idx = r_perm.to_vec();
        r_idx.sort_unstable();

        let y_d: Vec<f64> = d_idx.iter().map(|&i| data.y[i]).collect();
        let outcome = fit_regressor(
            &self.xw.select_rows(&d_idx),
            &y_d,
            &cfg.params_for(&[TAG_OUTCOME, m64]),
        )?;

        let (w_model, reg_w) = match cfg.mode {
            Mode::Plain => (None, data.w.clone()),
            Mode::OrthogonalW => {
                let w_d: Vec<f64> = d_idx.iter().map(|&i| data.w[i]).collect();
                let g = fit_regressor(
                    &data.x.select_rows(&d_idx),
                    &w_d,
                    &cfg.params_for(&[TAG_W_MODEL, m64]),
                )?;
                let g_hat = g.predict_rows(&data.x)?;
                let wbar = data.w.iter().zip(&g_hat).map(|(w, g)| w - g).collect();
                (Some(g), wbar)
            }
        };

        let q = match cfg.mode {
            Mode::Plain => None,
            Mode::OrthogonalW => {
                let w_r: Vec<f64> = r_idx.iter().map(|&i| reg_w[i]).collect();
                Some(q_inverse(q_matrix(self.basis, self.measure, &w_r)?, cfg.ridge)?)
            }
        };

        let mut averaging_w: Vec<f64> = match (cfg.holdout_w, cfg.mode) {
            (true, _) => d_idx.iter().map(|&i| reg_w[i]).collect(),
            (false, Mode::Plain) => self.sorted_w.to_vec(),
            (false, Mode::OrthogonalW) => reg_w.clone(),
        };
        averaging_w.sort_by(|a, b| a.total_cmp(b));

        // demeaned targets T(W_i, Y_i - m̂(X_i, W_i)) on R, indexed by original row
        let fitted_r = outcome.predict_rows(&self.xw.select_rows(&r_idx))?;
        let top = TOperator::new(self.basis, self.measure);
        let kdim = self.basis.len();
        let mut targets = vec![Vec::new(); n];
        for (&i, mr) in r_idx.iter().zip(&fitted_r) {
            targets[i] = top.eval(reg_w[i], data.y[i] - mr);
        }

        let blocks: Vec<Vec<usize>> = if cfg.inference {
            let size = r_perm.len() / kdim;
            r_perm
                .chunks_exact(size)
                .take(kdim)
                .map(|c| {
                    let mut b = c.to_vec();
                    b.sort_unstable();
                    b
                })
                .collect()
        } else {
            Vec::new()
        };

        let features = data.x.with_column(&reg_w)?;
        let retain = cfg.retain_models;
        let group = cfg.inference.then_some(cfg.regressor.forest.ci_group_size);
        let per_coef = (0..kdim)
            .into_par_iter()
            .map(|k| {
                let rows = if cfg.inference { &blocks[k] } else { &r_idx };
                let x_k = features.select_rows(rows);
                let re: Vec<f64> = rows.iter().map(|&i| targets[i][k].re).collect();
                let im: Vec<f64> = rows.iter().map(|&i| targets[i][k].im).collect();
                let k64 = k as u64;
                let f_re = fit_regressor(&x_k, &re, &cfg.params_for(&[TAG_COEF, m64, k64, 0]))?;
                let f_im = fit_regressor(&x_k, &im, &cfg.params_for(&[TAG_COEF, m64, k64, 1]))?;
                let at_points = cfg
                    .test_points
                    .iter()
                    .map(|x| coefficient_at(&f_re, &f_im, x, &averaging_w, group))
                    .collect::<Result<Vec<_>>>()?;
                let importance = match (f_re.split_importance(), f_im.split_importance()) {
                    (Ok(a), Ok(b)) => Some([x_part(&a, d), x_part(&b, d)]),
                    _ => None,
                };
                let kept = retain.then_some((f_re, f_im));
                Ok((at_points, importance, kept))
            })
            .collect::<Result<Vec<_>>>()?;

        let shape_importance = if per_coef.iter().all(|c| c.1.is_some()) {
            let parts: Vec<&Vec<f64>> = per_coef
                .iter()
                .flat_map(|c| c.1.as_ref().unwrap().iter().flatten())
                .collect();
            Some(if parts.is_empty() {
                vec![1.0 / d as f64; d]
            } else {
                (0..d)
                    .map(|j| parts.iter().map(|p| p[j]).sum::<f64>() / parts.len() as f64)
                    .collect()
            })
        } else {
            None
        };

        let mut estimates: Vec<CoefficientEstimate> = (0..cfg.test_points.len())
            .map(|_| CoefficientEstimate {
                pi: Vec::with_capacity(kdim),
                sigma2: cfg.inference.then(|| Vec::with_capacity(kdim)),
            })
            .collect();
        let mut coef_models = Vec::new();
        for (at_points, _, kept) in per_coef {
            for (est, (pi, var)) in estimates.iter_mut().zip(at_points) {
                est.pi.push(pi);
                if let (Some(s), Some(v)) = (est.sigma2.as_mut(), var) {
                    s.push(v);
                }
            }
            if let Some(pair) = kept {
                coef_models.push(pair);
            }
        }

        let models = retain.then_some(SplitModels {
            outcome,
            w_model,
            coef: coef_models,
        });
        let record = SplitRecord {
            d_idx,
            r_idx,
            blocks,
            q,
            averaging_w,
            shape_importance,
            models,
        };
        Ok((record, estimates))
    }
}

impl SplitRecord {
    /// Fitted `m̂(x, w)` when models were retained.
    pub fn outcome_model(&self) -> Option<&Regressor> {
        self.models.as_ref().map(|m| &m.outcome)
    }

    /// Fitted `ĝ(x)` in orthogonal mode when models were retained.
    pub fn w_model(&self) -> Option<&Regressor> {
        self.models.as_ref().and_then(|m| m.w_model.as_ref())
    }
}

/// Importance over the `X` columns only, renormalized; `None` when every
/// split used the regressor column.
fn x_part(importance: &[f64], d: usize) -> Option<Vec<f64>> {
    let total: f64 = importance[..d].iter().sum();
    (total > 0.0).then(|| importance[..d].iter().map(|v| v / total).collect())
}

fn coefficient_at(
    re: &Regressor,
    im: &Regressor,
    x: &[f64],
    averaging_w: &[f64],
    group: Option<usize>,
) -> Result<(Complex64, Option<f64>)> {
    let mut row = x.to_vec();
    row.push(0.0);
    let col = x.len();
    let (mr, tr) = re.predict_averaged(&row, col, averaging_w)?;
    let (mi, ti) = im.predict_averaged(&row, col, averaging_w)?;
    let var = match (group, tr, ti) {
        (Some(g), Some(tr), Some(ti)) => Some(little_bags_variance(&tr, g)? + little_bags_variance(&ti, g)?),
        (Some(_), _, _) => {
            return Err(Error::Unsupported(
                "coefficient variances require the honest forest".into(),
            ))
        }
        _ => None,
    };
    Ok((Complex64::new(mr, mi), var))
}

/// `Q̂⁻¹ Π̂`.
pub fn sieve_coefficients(q_inv: &DMatrix<Complex64>, pi: &[Complex64]) -> Vec<Complex64> {
    (0..q_inv.nrows())
        .map(|r| (0..q_inv.ncols()).map(|c| q_inv[(r, c)] * pi[c]).sum())
        .collect()
}

fn imag_ratio(max_re: f64, max_im: f64) -> f64 {
    if max_re > 0.0 {
        max_im / max_re
    } else if max_im > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Sieve density `q(b − β)ᵀ c` on a grid; the real part is returned.
pub fn density_from_coefficients(
    basis: HermiteBasis,
    c: &[Complex64],
    beta: (f64, f64),
    b0_grid: &[f64],
    b1_grid: &[f64],
) -> DensityGrid {
    let mut q = vec![0.0; basis.len()];
    let (mut max_re, mut max_im) = (0.0f64, 0.0f64);
    let values = b0_grid
        .iter()
        .map(|&b0| {
            b1_grid
                .iter()
                .map(|&b1| {
                    basis.eval_into(b0 - beta.0, b1 - beta.1, &mut q);
                    let v: Complex64 = q.iter().zip(c).map(|(qk, ck)| ck * qk).sum();
                    max_re = max_re.max(v.re.abs());
                    max_im = max_im.max(v.im.abs());
                    v.re
                })
                .collect()
        })
        .collect();
    DensityGrid {
        b0_grid: b0_grid.to_vec(),
        b1_grid: b1_grid.to_vec(),
        values,
        imag_ratio: imag_ratio(max_re, max_im),
    }
}

/// Slope marginal of the sieve density with the intercept integrated out
/// analytically.
pub fn slope_density_from_coefficients(
    basis: HermiteBasis,
    c: &[Complex64],
    beta1: f64,
    b1_grid: &[f64],
) -> SlopeDensity {
    let (mut max_re, mut max_im) = (0.0f64, 0.0f64);
    let values = b1_grid
        .iter()
        .map(|&b1| {
            let g = basis.slope_marginal_eval(b1 - beta1);
            let v: Complex64 = g.iter().zip(c).map(|(gk, ck)| ck * gk).sum();
            max_re = max_re.max(v.re.abs());
            max_im = max_im.max(v.im.abs());
            v.re
        })
        .collect();
    SlopeDensity {
        b1_grid: b1_grid.to_vec(),
        values,
        imag_ratio: imag_ratio(max_re, max_im),
    }
}

/// Sets negative values to zero and rescales to unit trapezoid mass.
pub fn clip_renormalize(grid: &[f64], values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    let mass = trapezoid(grid, values);
    if mass > 0.0 {
        values.iter_mut().for_each(|v| *v /= mass);
    }
}

fn clip_renormalize_grid(g: &mut DensityGrid) {
    for row in g.values.iter_mut() {
        row.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let rows: Vec<f64> = g.values.iter().map(|r| trapezoid(&g.b1_grid, r)).collect();
    let mass = trapezoid(&g.b0_grid, &rows);
    if mass > 0.0 {
        for row in g.values.iter_mut() {
            row.iter_mut().for_each(|v| *v /= mass);
        }
    }
}

impl ConditionalDensityModel {
    pub fn basis(&self) -> HermiteBasis {
        self.basis
    }

    pub fn measure(&self) -> &WeightingMeasure {
        &self.measure
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn beta(&self) -> &BetaModel {
        &self.beta
    }

    pub fn splits(&self) -> &[SplitRecord] {
        &self.splits
    }

    pub fn points(&self) -> &[PointFit] {
        &self.points
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// `Q̂` used by split `m`.
    pub fn q_matrix(&self, m: usize) -> Result<&QMatrix> {
        let split = self
            .splits
            .get(m)
            .ok_or_else(|| Error::domain(format!("split {m} does not exist")))?;
        self.q
            .as_ref()
            .or(split.q.as_ref())
            .ok_or_else(|| Error::numeric("missing Q matrix"))
    }

    /// Smallest eigenvalue of `Q̂` over all splits.
    pub fn min_eig(&self) -> f64 {
        (0..self.splits.len())
            .filter_map(|m| self.q_matrix(m).ok())
            .map(|q| q.min_eig)
            .fold(f64::INFINITY, f64::min)
    }

    /// Fitted point for `x`, computed from retained models when not cached.
    pub fn point(&self, x: &[f64]) -> Result<Cow<'_, PointFit>> {
        if let Some(p) = self.points.iter().find(|p| p.x == x) {
            return Ok(Cow::Borrowed(p));
        }
        if x.len() != self.n_features {
            return Err(Error::domain(format!(
                "point has {} coordinates but X has {} columns",
                x.len(),
                self.n_features
            )));
        }
        let per_split = (0..self.splits.len())
            .map(|m| self.split_estimate(m, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Cow::Owned(PointFit {
            x: x.to_vec(),
            beta: self.beta.predict(x)?,
            per_split,
        }))
    }

    fn split_estimate(&self, m: usize, x: &[f64]) -> Result<CoefficientEstimate> {
        let split = &self.splits[m];
        let models = split.models.as_ref().ok_or_else(|| {
            Error::domain("point was not a fitted test point and the split models were not retained")
        })?;
        let group = self.config.inference.then_some(self.config.regressor.forest.ci_group_size);
        let mut pi = Vec::with_capacity(models.coef.len());
        let mut sigma2 = self.config.inference.then(Vec::new);
        for (re, im) in &models.coef {
            let (c, v) = coefficient_at(re, im, x, &split.averaging_w, group)?;
            pi.push(c);
            if let (Some(s), Some(v)) = (sigma2.as_mut(), v) {
                s.push(v);
            }
        }
        Ok(CoefficientEstimate { pi, sigma2 })
    }

    /// `Q̂⁻¹ Π̂` for split `m` at a fitted point.
    pub fn split_coefficients(&self, point: &PointFit, m: usize) -> Result<Vec<Complex64>> {
        let q_inv = self.q_matrix(m)?.inverse()?;
        Ok(sieve_coefficients(q_inv, &point.per_split[m].pi))
    }

    /// Cross-fit average of the sieve coefficients.
    pub fn coefficients(&self, point: &PointFit) -> Result<Vec<Complex64>> {
        self.average_coefficients(point, 0..self.splits.len())
    }

    fn average_coefficients(
        &self,
        point: &PointFit,
        splits: impl Iterator<Item = usize>,
    ) -> Result<Vec<Complex64>> {
        let mut total = vec![Complex64::new(0.0, 0.0); self.basis.len()];
        let mut count = 0usize;
        for m in splits {
            for (t, c) in total.iter_mut().zip(self.split_coefficients(point, m)?) {
                *t += c;
            }
            count += 1;
        }
        let scale = 1.0 / count.max(1) as f64;
        Ok(total.into_iter().map(|t| t * scale).collect())
    }

    pub fn evaluate_density(&self, x: &[f64], b0_grid: &[f64], b1_grid: &[f64]) -> Result<DensityGrid> {
        let point = self.point(x)?;
        let c = self.coefficients(&point)?;
        let mut g = density_from_coefficients(self.basis, &c, (point.beta.b0, point.beta.b1), b0_grid, b1_grid);
        if self.config.clip_renormalize {
            clip_renormalize_grid(&mut g);
        }
        Ok(g)
    }

    /// Density of `B1` given `X = x`.
    pub fn slope_density(&self, x: &[f64], b1_grid: &[f64]) -> Result<SlopeDensity> {
        let point = self.point(x)?;
        let c = self.coefficients(&point)?;
        Ok(self.finish_slope(slope_density_from_coefficients(self.basis, &c, point.beta.b1, b1_grid)))
    }

    /// Slope density from split `m` alone.
    pub fn split_slope_density(&self, point: &PointFit, m: usize, b1_grid: &[f64]) -> Result<SlopeDensity> {
        let c = self.split_coefficients(point, m)?;
        Ok(self.finish_slope(slope_density_from_coefficients(self.basis, &c, point.beta.b1, b1_grid)))
    }

    fn finish_slope(&self, mut s: SlopeDensity) -> SlopeDensity {
        if self.config.clip_renormalize {
            clip_renormalize(&s.b1_grid, &mut s.values);
        }
        s
    }

    /// Slope density at each observation's controls, using only splits in
    /// which the observation was not in the coefficient sample.
    pub fn observation_slope_densities(&self, data: &Dataset, b1_grid: &[f64]) -> Result<Vec<Vec<f64>>> {
        if data.d() != self.n_features {
            return Err(Error::data("dataset does not match the fitted model"));
        }
        if self.splits.len() == 1 {
            warn!("with a single split half of the observations are evaluated in-fold");
        }
        (0..data.n())
            .into_par_iter()
            .map(|i| {
                let x = data.x.row(i);
                let mut eligible: Vec<usize> = (0..self.splits.len())
                    .filter(|&m| self.splits[m].d_idx.binary_search(&i).is_ok())
                    .collect();
                if eligible.is_empty() {
                    eligible = (0..self.splits.len()).collect();
                }
                let mut per_split = vec![
                    CoefficientEstimate {
                        pi: Vec::new(),
                        sigma2: None
                    };
                    self.splits.len()
                ];
                for &m in &eligible {
                    per_split[m] = self.split_estimate(m, x)?;
                }
                let point = PointFit {
                    x: x.to_vec(),
                    beta: self.beta.predict(x)?,
                    per_split,
                };
                let c = self.average_coefficients(&point, eligible.into_iter())?;
                Ok(slope_density_from_coefficients(self.basis, &c, point.beta.b1, b1_grid).values)
            })
            .collect()
    }
}

/// Marginal slope density as the average of out-of-fold conditional slope
/// densities over the sample.
pub fn marginal_density(data: &Dataset, config: &FitConfig, b1_grid: &[f64]) -> Result<Vec<f64>> {
    let mut cfg = config.clone();
    cfg.retain_models = true;
    cfg.test_points.clear();
    let model = fit_conditional_density(data, &cfg)?;
    let mut out = average_curves(&model.observation_slope_densities(data, b1_grid)?, b1_grid.len());
    if config.clip_renormalize {
        clip_renormalize(b1_grid, &mut out);
    }
    Ok(out)
}

fn average_curves(curves: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for c in curves {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    let n = curves.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableImportance {
    /// Importance for the shape of the density, over the columns of `X`.
    pub shape: Vec<f64>,
    /// Importance for the conditional mean `β̂`.
    pub mean: Vec<f64>,
}

pub fn variable_importance(model: &ConditionalDensityModel) -> Result<VariableImportance> {
    let d = model.n_features;
    let mut shape = vec![0.0; d];
    for s in &model.splits {
        let part = s.shape_importance.as_ref().ok_or_else(|| {
            Error::Unsupported("variable importance is defined for forests only".into())
        })?;
        for (a, v) in shape.iter_mut().zip(part) {
            *a += v;
        }
    }
    let total: f64 = shape.iter().sum();
    shape.iter_mut().for_each(|v| *v /= total);
    Ok(VariableImportance {
        shape,
        mean: model.beta.importance()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Matrix;
    use crate::quadrature::step_grid;
    use crate::simlab::{generate_dgp1, test_point};
    use rand::Rng;

    fn small_config(trees: usize) -> FitConfig {
        let mut cfg = FitConfig::default();
        cfg.regressor.forest.n_trees = trees;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn splits_partition_the_sample() {
        let data = generate_dgp1(300, 4, 1).unwrap();
        let mut cfg = small_config(50);
        cfg.splits = 3;
        cfg.inference = true;
        cfg.test_points = vec![test_point(4)];
        let model = fit_conditional_density(&data, &cfg).unwrap();
        assert_eq!(model.splits().len(), 3);
        for s in model.splits() {
            assert_eq!(s.d_idx.len() + s.r_idx.len(), 300);
            assert!(s.d_idx.iter().all(|i| s.r_idx.binary_search(i).is_err()));
            assert_eq!(s.blocks.len(), 9);
            let mut seen = Vec::new();
            for b in &s.blocks {
                assert_eq!(b.len(), 150 / 9);
                assert!(b.iter().all(|i| s.r_idx.binary_search(i).is_ok()));
                seen.extend_from_slice(b);
            }
            let total = seen.len();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), total);
        }
        let p = &model.points()[0];
        assert!(p.per_split.iter().all(|e| e.sigma2.as_ref().unwrap().len() == 9));
    }

    #[test]
    fn inference_mode_rejects_small_blocks() {
        let data = generate_dgp1(200, 3, 2).unwrap();
        let mut cfg = small_config(50);
        cfg.k2 = 7;
        cfg.inference = true;
        let err = fit_conditional_density(&data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("requires n >="), "{err}");
    }

    #[test]
    fn too_few_observations() {
        let data = generate_dgp1(40, 3, 2).unwrap();
        assert!(matches!(
            fit_conditional_density(&data, &small_config(10)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn fits_are_reproducible() {
        let data = generate_dgp1(200, 3, 4).unwrap();
        let mut cfg = small_config(40);
        cfg.test_points = vec![test_point(3)];
        let grid = step_grid(-3.0, 3.0, 0.5);
        let a = fit_conditional_density(&data, &cfg).unwrap();
        let b = fit_conditional_density(&data, &cfg).unwrap();
        let fa = a.slope_density(&test_point(3), &grid).unwrap();
        let fb = b.slope_density(&test_point(3), &grid).unwrap();
        assert_eq!(fa, fb);
        cfg.seed = 4;
        let c = fit_conditional_density(&data, &cfg).unwrap();
        assert_ne!(fa, c.slope_density(&test_point(3), &grid).unwrap());
    }

    #[test]
    fn degenerate_coefficients_concentrate_at_origin() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::new(n, 2, (0..2 * n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let w = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let data = Dataset::new(vec![0.0; n], w, x).unwrap();
        let mut cfg = small_config(40);
        cfg.beta_method = BetaMethod::MomentRatio;
        let point = vec![0.5, 0.5];
        cfg.test_points = vec![point.clone()];
        let model = fit_conditional_density(&data, &cfg).unwrap();
        let grid = step_grid(-2.0, 2.0, 0.05);
        let dens = model.evaluate_density(&point, &grid, &grid).unwrap();
        let (mut best, mut arg) = (f64::MIN, (0.0, 0.0));
        for (i, row) in dens.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = (grid[i], grid[j]);
                }
            }
        }
        assert!(arg.0.abs() <= 0.3 && arg.1.abs() <= 0.3, "{arg:?}");
    }

    #[test]
    fn beta_recovers_a_deterministic_line() {
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Matrix::new(n, 3, (0..3 * n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let y = w.iter().map(|w| 2.0 + 3.0 * w).collect();
        let data = Dataset::new(y, w, x).unwrap();
        let params = RegressorParams::default();
        for method in [BetaMethod::CausalForest, BetaMethod::MomentRatio] {
            let beta = estimate_beta(&data, &params, method).unwrap();
            let b = beta.predict(&[0.0, 0.0, 0.0]).unwrap();
            assert!((b.b0 - 2.0).abs() < 0.15 && (b.b1 - 3.0).abs() < 0.15, "{method:?} {b:?}");
            assert!(!b.guarded);
        }
    }

    #[test]
    fn density_is_linear_in_coefficients() {
        let basis = HermiteBasis::new(3, 3).unwrap();
        let c: Vec<Complex64> = (0..9).map(|k| Complex64::new(0.1 * k as f64 - 0.3, 0.05 * k as f64)).collect();
        let c2: Vec<Complex64> = c.iter().map(|v| v * 2.0).collect();
        let grid = step_grid(-2.0, 2.0, 0.5);
        let a = density_from_coefficients(basis, &c, (0.2, -0.1), &grid, &grid);
        let b = density_from_coefficients(basis, &c2, (0.2, -0.1), &grid, &grid);
        for (ra, rb) in a.values.iter().zip(&b.values) {
            for (va, vb) in ra.iter().zip(rb) {
                assert!((2.0 * va - vb).abs() < 1e-14);
            }
        }
        let q_inv = DMatrix::<Complex64>::identity(9, 9) * Complex64::new(2.0, 0.0);
        assert_eq!(sieve_coefficients(&q_inv, &c), c2);
    }

    #[test]
    fn slope_marginal_integrates_the_joint_density() {
        let basis = HermiteBasis::new(4, 3).unwrap();
        let c: Vec<Complex64> = (0..12).map(|k| Complex64::new(((k * 7) % 5) as f64 * 0.1 - 0.2, 0.0)).collect();
        let b0 = step_grid(-12.0, 12.0, 0.01);
        let b1 = [-1.0, 0.0, 0.7];
        let joint = density_from_coefficients(basis, &c, (0.3, 0.1), &b0, &b1);
        let slope = slope_density_from_coefficients(basis, &c, 0.1, &b1);
        for j in 0..b1.len() {
            let col: Vec<f64> = joint.values.iter().map(|r| r[j]).collect();
            assert!((trapezoid(&b0, &col) - slope.values[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn demeaned_targets_are_shift_invariant() {
        let basis = HermiteBasis::new(3, 3).unwrap();
        let top = TOperator::new(basis, &build_measure(1.0, 32).unwrap());
        let (y, m, c) = (0.7, 0.2, 5.25);
        let a = top.eval(1.3, y - m);
        let b = top.eval(1.3, (y + c) - (m + c));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).norm() < 1e-12);
        }
    }

    #[test]
    fn clip_renormalize_gives_unit_mass() {
        let grid = step_grid(-1.0, 1.0, 0.5);
        let mut v = vec![-0.2, 0.5, 1.0, 0.5, -0.1];
        clip_renormalize(&grid, &mut v);
        assert!(v.iter().all(|&x| x >= 0.0));
        assert!((trapezoid(&grid, &v) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn marginal_is_the_mean_of_observation_curves() {
        let data = generate_dgp1(120, 3, 6).unwrap();
        let mut cfg = small_config(20);
        cfg.splits = 2;
        let grid = step_grid(-2.0, 2.0, 0.5);
        let marginal = marginal_density(&data, &cfg, &grid).unwrap();
        let mut retained = cfg.clone();
        retained.retain_models = true;
        let model = fit_conditional_density(&data, &retained).unwrap();
        let curves = model.observation_slope_densities(&data, &grid).unwrap();
        for (j, m) in marginal.iter().enumerate() {
            let mean = curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64;
            assert!((m - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn retained_models_reproduce_cached_points() {
        let data = generate_dgp1(150, 3, 7).unwrap();
        let mut cfg = small_config(20);
        cfg.retain_models = true;
        let x = test_point(3);
        cfg.test_points = vec![x.clone()];
        let model = fit_conditional_density(&data, &cfg).unwrap();
        let cached = model.point(&x).unwrap().into_owned();
        let mut moved = x.clone();
        moved[0] += 1e-300;
        let fresh = model.point(&moved).unwrap();
        assert!(matches!(fresh, Cow::Owned(_)));
        for (a, b) in cached.per_split[0].pi.iter().zip(&fresh.per_split[0].pi) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn importance_is_normalized() {
        let data = generate_dgp1(200, 5, 9).unwrap();
        let model = fit_conditional_density(&data, &small_config(40)).unwrap();
        let vi = variable_importance(&model).unwrap();
        assert_eq!(vi.shape.len(), 5);
        assert!((vi.shape.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((vi.mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(vi.shape.iter().chain(&vi.mean).all(|&v| v >= 0.0));

        let mut knn = small_config(40);
        knn.regressor.kind = RegressorKind::KnnBaseline;
        knn.beta_method = BetaMethod::MomentRatio;
        let model = fit_conditional_density(&data, &knn).unwrap();
        assert!(matches!(variable_importance(&model), Err(Error::Unsupported(_))));
    }

    #[test]
    fn orthogonal_mode_estimates_q_per_split() {
        let data = generate_dgp1(200, 3, 10).unwrap();
        let mut cfg = small_config(20);
        cfg.mode = Mode::OrthogonalW;
        cfg.splits = 2;
        cfg.retain_models = true;
        cfg.test_points = vec![test_point(3)];
        let model = fit_conditional_density(&data, &cfg).unwrap();
        assert!(model.splits().iter().all(|s| s.q.is_some() && s.w_model().is_some()));
        assert!(model.q_matrix(1).unwrap().inverse().is_ok());
        let grid = step_grid(-3.0, 3.0, 0.5);
        assert!(model.slope_density(&test_point(3), &grid).unwrap().values.iter().all(|v| v.is_finite()));
    }
}
