//! Honest subsampled regression forests and a nearest-neighbor baseline.
//!
//! Trees are grown in groups that share a half-sample so that prediction
//! variance can be estimated from between-group variation ("little bags").
//! Within a group each tree draws its own subsample and, under honesty,
//! splits it into a structure half that chooses splits and an estimation half
//! that fills the leaves.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{stable_mean, Matrix};
use crate::error::{Error, Result};

const LEAF: u32 = u32::MAX;
const DEPTH_DECAY: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub subsample_fraction: f64,
    pub min_leaf: usize,
    /// Each child of a split keeps at least this fraction of its parent.
    pub alpha: f64,
    pub honesty: bool,
    /// Candidate features per split; `None` means `min(ceil(sqrt(d)) + 20, d)`.
    pub mtry: Option<usize>,
    pub ci_group_size: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 2000,
            subsample_fraction: 0.5,
            min_leaf: 5,
            alpha: 0.05,
            honesty: true,
            mtry: None,
            ci_group_size: 2,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::config("n_trees must be positive"));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::config("subsample_fraction must lie in (0, 1]"));
        }
        if self.min_leaf == 0 {
            return Err(Error::config("min_leaf must be positive"));
        }
        if !(0.0..=0.25).contains(&self.alpha) {
            return Err(Error::config("alpha must lie in [0, 0.25]"));
        }
        if self.ci_group_size == 0 || !self.n_trees.is_multiple_of(self.ci_group_size) {
            return Err(Error::config(
                "n_trees must be a positive multiple of ci_group_size",
            ));
        }
        if n < 2 * self.min_leaf || n < 4 {
            return Err(Error::data(format!(
                "{n} observations are too few for min_leaf = {}",
                self.min_leaf
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    threshold: f64,
    feature: u32,
    // right child is left + 1
    left: u32,
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    // causal trees: estimation means of (y, w, yw, ww) per node
    moments: Vec<[f64; 4]>,
}

impl Tree {
    fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            let node = &self.nodes[i];
            if node.feature == LEAF {
                return i;
            }
            i = if x[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.left as usize + 1
            };
        }
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.nodes[self.leaf_index(x)].value
    }

    /// `Σ_r prediction(x with x[col] = sorted[r])` over all `r`.
    fn sum_over_column(&self, x: &[f64], col: usize, sorted: &[f64]) -> f64 {
        let mut stack = vec![(0usize, 0usize, sorted.len())];
        let mut total = 0.0;
        while let Some((i, lo, hi)) = stack.pop() {
            let node = &self.nodes[i];
            if node.feature == LEAF {
                total += node.value * (hi - lo) as f64;
                continue;
            }
            let left = node.left as usize;
            if node.feature as usize == col {
                let mid = lo + sorted[lo..hi].partition_point(|&v| v <= node.threshold);
                if mid > lo {
                    stack.push((left, lo, mid));
                }
                if hi > mid {
                    stack.push((left + 1, mid, hi));
                }
            } else if x[node.feature as usize] <= node.threshold {
                stack.push((left, lo, hi));
            } else {
                stack.push((left + 1, lo, hi));
            }
        }
        total
    }
}

/// Structure and estimation index sets of one tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeSample {
    pub structure: Vec<usize>,
    pub estimation: Vec<usize>,
}

/// Fitted honest forest.
#[derive(Debug, Clone)]
pub struct Forest {
    params: ForestParams,
    n_features: usize,
    n_obs: usize,
    trees: Vec<Tree>,
    importance: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Target<'a> {
    Regression(&'a [f64]),
    /// Centered outcome and regressor; splits follow the local slope.
    Causal { y: &'a [f64], w: &'a [f64] },
}

struct Grower<'a> {
    columns: &'a [Vec<f64>],
    // observation indices sorted by each feature
    order: &'a [Vec<u32>],
    target: Target<'a>,
    // inv[k] = 1 / k
    inv: Vec<f64>,
    min_leaf: usize,
    alpha: f64,
    mtry: usize,
    honest: bool,
}

struct Frame {
    node: usize,
    s: (usize, usize),
    e: (usize, usize),
    depth: usize,
}

/// Per-thread buffers reused across the trees of a group.
struct Scratch {
    in_sample: Vec<bool>,
    goes_left: Vec<bool>,
    buffer: Vec<u32>,
    rho: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, causal: bool) -> Self {
        Self {
            in_sample: vec![false; n],
            goes_left: vec![false; n],
            buffer: Vec::with_capacity(n),
            rho: if causal { vec![0.0; n] } else { Vec::new() },
        }
    }
}

/// Pseudo-outcomes `(w - w̄)((y - ȳ) - (w - w̄) β̂) / Var(w)` of a node; false
/// when `w` is constant on it.
fn pseudo_outcomes(y: &[f64], w: &[f64], idx: &[u32], rho: &mut [f64]) -> bool {
    let n = idx.len() as f64;
    let wm = idx.iter().map(|&i| w[i as usize]).sum::<f64>() / n;
    let ym = idx.iter().map(|&i| y[i as usize]).sum::<f64>() / n;
    let (mut sww, mut swy) = (0.0, 0.0);
    for &i in idx {
        let dw = w[i as usize] - wm;
        sww += dw * dw;
        swy += dw * (y[i as usize] - ym);
    }
    if !(sww > 1e-12 * n * (1.0 + wm * wm)) {
        return false;
    }
    let slope = swy / sww;
    let var = sww / n;
    for &i in idx {
        let dw = w[i as usize] - wm;
        rho[i as usize] = dw * ((y[i as usize] - ym) - dw * slope) / var;
    }
    true
}

fn node_moments(y: &[f64], w: &[f64], idx: &[u32]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for &i in idx {
        let (a, b) = (y[i as usize], w[i as usize]);
        m[0] += a;
        m[1] += b;
        m[2] += a * b;
        m[3] += b * b;
    }
    let n = idx.len().max(1) as f64;
    m.map(|v| v / n)
}

impl Grower<'_> {
    fn grow(
        &self,
        sample: &TreeSample,
        rng: &mut ChaCha8Rng,
        split_weight: &mut [f64],
        scratch: &mut Scratch,
    ) -> Tree {
        let d = self.columns.len();
        for &i in &sample.structure {
            scratch.in_sample[i] = true;
        }
        // each feature's array keeps every node's structure points contiguous
        let mut sorted: Vec<Vec<u32>> = self
            .order
            .iter()
            .map(|ord| {
                ord.iter()
                    .copied()
                    .filter(|&i| scratch.in_sample[i as usize])
                    .collect()
            })
            .collect();
        for &i in &sample.structure {
            scratch.in_sample[i] = false;
        }
        let mut e_idx: Vec<u32> = if self.honest {
            sample.estimation.iter().map(|&i| i as u32).collect()
        } else {
            sample.structure.iter().map(|&i| i as u32).collect()
        };
        let n_s = sample.structure.len();
        let mut nodes = vec![Node {
            value: 0.0,
            threshold: 0.0,
            feature: LEAF,
            left: 0,
        }];
        let causal = matches!(self.target, Target::Causal { .. });
        let mut moments = if causal { vec![[0.0; 4]] } else { Vec::new() };
        let mut stack = vec![Frame {
            node: 0,
            s: (0, n_s),
            e: (0, e_idx.len()),
            depth: 0,
        }];
        while let Some(frame) = stack.pop() {
            let (s_lo, s_hi) = frame.s;
            let (e_lo, e_hi) = frame.e;
            let split_target = match self.target {
                Target::Regression(y) => {
                    nodes[frame.node].value = mean_of(y, &e_idx[e_lo..e_hi]);
                    y
                }
                Target::Causal { y, w } => {
                    moments[frame.node] = node_moments(y, w, &e_idx[e_lo..e_hi]);
                    if s_hi - s_lo < 2 * self.min_leaf
                        || !pseudo_outcomes(y, w, &sorted[0][s_lo..s_hi], &mut scratch.rho)
                    {
                        continue;
                    }
                    &scratch.rho[..]
                }
            };

            let Some((feature, threshold, n_left)) = self.best_split(split_target, &sorted, s_lo, s_hi, rng, d)
            else {
                continue;
            };
            let col = &self.columns[feature];
            let e_mid = e_lo + partition(&mut e_idx[e_lo..e_hi], |i| col[i as usize] <= threshold);
            if e_mid == e_lo || e_mid == e_hi {
                continue;
            }
            let s_mid = s_lo + n_left;
            for &i in &sorted[feature][s_lo..s_mid] {
                scratch.goes_left[i as usize] = true;
            }
            for (f, arr) in sorted.iter_mut().enumerate() {
                if f != feature {
                    stable_split(&mut arr[s_lo..s_hi], &scratch.goes_left, &mut scratch.buffer);
                }
            }
            for &i in &sorted[feature][s_lo..s_mid] {
                scratch.goes_left[i as usize] = false;
            }

            let left = nodes.len();
            nodes[frame.node].feature = feature as u32;
            nodes[frame.node].threshold = threshold;
            nodes[frame.node].left = left as u32;
            split_weight[feature] += DEPTH_DECAY.powi(frame.depth as i32);
            for _ in 0..2 {
                nodes.push(Node {
                    value: 0.0,
                    threshold: 0.0,
                    feature: LEAF,
                    left: 0,
                });
                if causal {
                    moments.push([0.0; 4]);
                }
            }
            stack.push(Frame {
                node: left + 1,
                s: (s_mid, s_hi),
                e: (e_mid, e_hi),
                depth: frame.depth + 1,
            });
            stack.push(Frame {
                node: left,
                s: (s_lo, s_mid),
                e: (e_lo, e_mid),
                depth: frame.depth + 1,
            });
        }
        Tree { nodes, moments }
    }

    /// Best variance-reducing split of the node `[lo, hi)`: feature,
    /// threshold and size of the left child.
    fn best_split(
        &self,
        y: &[f64],
        sorted: &[Vec<u32>],
        lo: usize,
        hi: usize,
        rng: &mut ChaCha8Rng,
        d: usize,
    ) -> Option<(usize, f64, usize)> {
        let n = hi - lo;
        let child_min = self.min_leaf.max((self.alpha * n as f64).ceil() as usize);
        if n < 2 * child_min {
            return None;
        }
        let idx = &sorted[0][lo..hi];
        let y0 = y[idx[0] as usize];
        if idx.iter().all(|&i| y[i as usize] == y0) {
            return None;
        }
        // centered sums keep the gain comparison well conditioned
        let total: f64 = idx.iter().map(|&i| y[i as usize] - y0).sum();
        let parent = total * total / n as f64;
        let mut best = None;
        let mut best_gain = parent + 1e-12 * parent.abs().max(1e-300);
        for feature in index::sample(rng, d, self.mtry.min(d)).into_iter() {
            let col = &self.columns[feature];
            let arr = &sorted[feature][lo..hi];
            if col[arr[0] as usize] == col[arr[n - 1] as usize] {
                continue;
            }
            let first = child_min - 1;
            let mut left_sum: f64 = arr[..first].iter().map(|&i| y[i as usize] - y0).sum();
            let mut a = col[arr[first] as usize];
            for (p, pair) in arr[first..n - child_min + 1].windows(2).enumerate() {
                left_sum += y[pair[0] as usize] - y0;
                let b = col[pair[1] as usize];
                if a != b {
                    let n_left = first + p + 1;
                    let right_sum = total - left_sum;
                    let gain = left_sum * left_sum * self.inv[n_left]
                        + right_sum * right_sum * self.inv[n - n_left];
                    if gain > best_gain {
                        best_gain = gain;
                        let mut mid = 0.5 * (a + b);
                        if mid >= b {
                            mid = a;
                        }
                        best = Some((feature, mid, n_left));
                    }
                }
                a = b;
            }
        }
        best
    }
}

fn mean_of(y: &[f64], idx: &[u32]) -> f64 {
    match idx.first() {
        None => f64::NAN,
        Some(&i0) => {
            let y0 = y[i0 as usize];
            y0 + idx.iter().map(|&i| y[i as usize] - y0).sum::<f64>() / idx.len() as f64
        }
    }
}

/// In-place partition; returns the number of elements satisfying `pred`.
fn partition(v: &mut [u32], pred: impl Fn(u32) -> bool) -> usize {
    let mut k = 0;
    for j in 0..v.len() {
        if pred(v[j]) {
            v.swap(j, k);
            k += 1;
        }
    }
    k
}

/// Stable partition of `v` by the `goes_left` flags using `buffer` as scratch.
fn stable_split(v: &mut [u32], goes_left: &[bool], buffer: &mut Vec<u32>) {
    buffer.clear();
    let mut k = 0;
    for j in 0..v.len() {
        let i = v[j];
        if goes_left[i as usize] {
            v[k] = i;
            k += 1;
        } else {
            buffer.push(i);
        }
    }
    v[k..].copy_from_slice(buffer);
}

fn default_mtry(d: usize) -> usize {
    ((d as f64).sqrt().ceil() as usize + 20).min(d)
}

impl Forest {
    pub fn fit(x: &Matrix, y: &[f64], params: &ForestParams) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::data("feature rows and targets differ in length"));
        }
        Self::grow(x, Target::Regression(y), params)
    }

    fn grow(x: &Matrix, target: Target<'_>, params: &ForestParams) -> Result<Self> {
        let n = x.rows();
        let d = x.cols();
        if d == 0 {
            return Err(Error::data("forest needs at least one feature"));
        }
        let finite = match target {
            Target::Regression(y) => y.iter().all(|v| v.is_finite()),
            Target::Causal { y, w } => y.iter().chain(w).all(|v| v.is_finite()),
        };
        if !finite || !x.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::data("forest inputs contain non-finite values"));
        }
        params.validate(n)?;
        let columns: Vec<Vec<f64>> = (0..d).map(|j| x.column(j)).collect();
        let order: Vec<Vec<u32>> = columns
            .iter()
            .map(|col| {
                let mut ord: Vec<u32> = (0..n as u32).collect();
                ord.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                ord
            })
            .collect();
        let causal = matches!(target, Target::Causal { .. });
        let grower = Grower {
            columns: &columns,
            order: &order,
            target,
            inv: (0..=n).map(|k| 1.0 / k as f64).collect(),
            min_leaf: params.min_leaf,
            alpha: params.alpha,
            mtry: params.mtry.unwrap_or_else(|| default_mtry(d)).max(1),
            honest: params.honesty,
        };
        let n_groups = params.n_trees / params.ci_group_size;
        let groups: Vec<(Vec<Tree>, Vec<f64>)> = (0..n_groups)
            .into_par_iter()
            .map(|g| {
                let mut rng = group_rng(params.seed, g);
                let samples = draw_group(&mut rng, n, params);
                let mut weights = vec![0.0; d];
                let mut scratch = Scratch::new(n, causal);
                let trees = samples
                    .iter()
                    .map(|s| grower.grow(s, &mut rng, &mut weights, &mut scratch))
                    .collect();
                (trees, weights)
            })
            .collect();
        let mut split_weight = vec![0.0; d];
        let mut trees = Vec::with_capacity(params.n_trees);
        for (group_trees, weights) in groups {
            trees.extend(group_trees);
            for (s, w) in split_weight.iter_mut().zip(weights) {
                *s += w;
            }
        }
        let total: f64 = split_weight.iter().sum();
        let importance = if total > 0.0 {
            split_weight.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / d as f64; d]
        };
        Ok(Self {
            params: params.clone(),
            n_features: d,
            n_obs: n,
            trees,
            importance,
        })
    }

    /// Out-of-bag predictions for the training rows `x`: each row averages
    /// the trees whose subsample excluded it (`NaN` if there are none).
    pub fn oob_predictions(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.rows() != self.n_obs || x.cols() != self.n_features {
            return Err(Error::domain("out-of-bag predictions need the training matrix"));
        }
        let n = self.n_obs;
        let group = self.params.ci_group_size;
        let n_groups = self.trees.len() / group;
        const CHUNK: usize = 32;
        let partial: Vec<(Vec<f64>, Vec<u32>)> = (0..n_groups.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut sum = vec![0.0; n];
                let mut count = vec![0u32; n];
                let mut used = vec![false; n];
                for g in c * CHUNK..((c + 1) * CHUNK).min(n_groups) {
                    let mut rng = group_rng(self.params.seed, g);
                    for (t, sample) in draw_group(&mut rng, n, &self.params).into_iter().enumerate() {
                        let tree = &self.trees[g * group + t];
                        for &i in sample.structure.iter().chain(&sample.estimation) {
                            used[i] = true;
                        }
                        for i in 0..n {
                            if !used[i] {
                                sum[i] += tree.predict(x.row(i));
                                count[i] += 1;
                            }
                        }
                        used.iter_mut().for_each(|u| *u = false);
                    }
                }
                (sum, count)
            })
            .collect();
        let mut sum = vec![0.0; n];
        let mut count = vec![0u32; n];
        for (s, c) in partial {
            for i in 0..n {
                sum[i] += s[i];
                count[i] += c[i];
            }
        }
        Ok(sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect())
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_splits(&self, tree: usize) -> usize {
        self.trees[tree].nodes.len() / 2
    }

    /// Split features of one tree in node order.
    pub fn split_features(&self, tree: usize) -> Vec<usize> {
        self.trees[tree]
            .nodes
            .iter()
            .filter(|n| n.feature != LEAF)
            .map(|n| n.feature as usize)
            .collect()
    }

    /// Split thresholds of one tree in node order.
    pub fn split_thresholds(&self, tree: usize) -> Vec<f64> {
        self.trees[tree]
            .nodes
            .iter()
            .filter(|n| n.feature != LEAF)
            .map(|n| n.threshold)
            .collect()
    }

    /// Re-derives the index sets a tree was grown on.
    pub fn tree_sample(&self, tree: usize) -> TreeSample {
        let g = tree / self.params.ci_group_size;
        let mut rng = group_rng(self.params.seed, g);
        draw_group(&mut rng, self.n_obs, &self.params).swap_remove(tree % self.params.ci_group_size)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::domain(format!(
                "expected {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(())
    }

    pub fn tree_predictions(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.trees.iter().map(|t| t.predict(x)).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(stable_mean(&self.tree_predictions(x)?))
    }

    pub fn predict_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(Error::domain("feature dimension mismatch"));
        }
        Ok((0..x.rows())
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                let p: Vec<f64> = self.trees.iter().map(|t| t.predict(row)).collect();
                stable_mean(&p)
            })
            .collect())
    }

    /// Per-tree averages of the prediction at `x` with column `col` replaced
    /// by each value of `sorted` in turn.
    pub fn tree_predictions_averaged(&self, x: &[f64], col: usize, sorted: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        if col >= self.n_features || sorted.is_empty() {
            return Err(Error::domain("invalid averaging column or empty value set"));
        }
        debug_assert!(sorted.windows(2).all(|p| p[0] <= p[1]));
        let n = sorted.len() as f64;
        Ok(self
            .trees
            .iter()
            .map(|t| t.sum_over_column(x, col, sorted) / n)
            .collect())
    }

    pub fn predict_variance(&self, x: &[f64]) -> Result<f64> {
        let preds = self.tree_predictions(x)?;
        little_bags_variance(&preds, self.params.ci_group_size)
    }

    pub fn split_importance(&self) -> &[f64] {
        &self.importance
    }
}

fn group_rng(seed: u64, group: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group as u64);
    rng
}

fn draw_group(rng: &mut ChaCha8Rng, n: usize, params: &ForestParams) -> Vec<TreeSample> {
    let pool: Vec<usize> = if params.ci_group_size > 1 {
        index::sample(rng, n, n / 2).into_vec()
    } else {
        (0..n).collect()
    };
    let size = ((params.subsample_fraction * n as f64).ceil() as usize).clamp(2, pool.len());
    (0..params.ci_group_size)
        .map(|_| {
            let picked: Vec<usize> = index::sample(rng, pool.len(), size)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            if params.honesty {
                let half = size / 2;
                TreeSample {
                    structure: picked[..half].to_vec(),
                    estimation: picked[half..].to_vec(),
                }
            } else {
                TreeSample {
                    structure: picked.clone(),
                    estimation: picked,
                }
            }
        })
        .collect()
}

/// Little-bags variance of a forest average from per-tree values laid out in
/// consecutive groups: between-group variance of group means minus the
/// within-group Monte Carlo share, floored at zero.
pub fn little_bags_variance(tree_values: &[f64], group_size: usize) -> Result<f64> {
    let n = tree_values.len();
    if group_size < 2 || !n.is_multiple_of(group_size) || n < 50 {
        return Err(Error::domain(format!(
            "variance needs at least 50 trees in groups of two or more, got {n} trees in groups of {group_size}"
        )));
    }
    let groups = n / group_size;
    let mean = stable_mean(tree_values);
    let mut between = 0.0;
    let mut within = 0.0;
    for g in tree_values.chunks(group_size) {
        let gm = stable_mean(g);
        between += (gm - mean).powi(2);
        within += g.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / (group_size - 1) as f64;
    }
    between /= groups as f64;
    within /= groups as f64;
    Ok((between - within / group_size as f64).max(0.0))
}

/// Honest forest for a conditional slope: trees split on pseudo-outcomes of
/// the local least-squares slope of `y` on `w`, and predictions solve the
/// forest-weighted least-squares problem at the query point.
#[derive(Debug, Clone)]
pub struct CausalForest {
    forest: Forest,
}

/// Forest-weighted means of `y`, `w`, `yw` and `ww`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMoments {
    pub y: f64,
    pub w: f64,
    pub yw: f64,
    pub ww: f64,
}

impl LocalMoments {
    pub fn covariance(&self) -> f64 {
        self.yw - self.y * self.w
    }

    pub fn variance(&self) -> f64 {
        self.ww - self.w * self.w
    }
}

impl CausalForest {
    pub fn fit(x: &Matrix, y: &[f64], w: &[f64], params: &ForestParams) -> Result<Self> {
        if y.len() != x.rows() || w.len() != x.rows() {
            return Err(Error::data("feature rows, outcome and regressor differ in length"));
        }
        Ok(Self {
            forest: Forest::grow(x, Target::Causal { y, w }, params)?,
        })
    }

    pub fn moments(&self, x: &[f64]) -> Result<LocalMoments> {
        self.forest.check_dim(x)?;
        let mut acc = [0.0; 4];
        let mut used = 0usize;
        for t in &self.forest.trees {
            let m = t.moments[t.leaf_index(x)];
            if m.iter().all(|v| v.is_finite()) {
                for (a, v) in acc.iter_mut().zip(m) {
                    *a += v;
                }
                used += 1;
            }
        }
        if used == 0 {
            return Err(Error::numeric("no tree has estimation points at this leaf"));
        }
        let [y, w, yw, ww] = acc.map(|v| v / used as f64);
        Ok(LocalMoments { y, w, yw, ww })
    }

    /// Local slope; `NaN` when the weighted variance of `w` vanishes.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let m = self.moments(x)?;
        let var = m.variance();
        Ok(if var > 0.0 { m.covariance() / var } else { f64::NAN })
    }

    pub fn n_trees(&self) -> usize {
        self.forest.n_trees()
    }

    pub fn split_importance(&self) -> &[f64] {
        self.forest.split_importance()
    }
}

/// k-nearest-neighbor regression in Euclidean distance.
#[derive(Debug, Clone)]
pub struct Knn {
    k: usize,
    x: Matrix,
    y: Vec<f64>,
}

impl Knn {
    pub fn fit(x: &Matrix, y: &[f64], k: usize) -> Result<Self> {
        if y.len() != x.rows() || y.is_empty() {
            return Err(Error::data("feature rows and targets differ in length"));
        }
        if k == 0 || k > y.len() {
            return Err(Error::config(format!("k = {k} is invalid for {} points", y.len())));
        }
        Ok(Self {
            k,
            x: x.clone(),
            y: y.to_vec(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.x.cols() {
            return Err(Error::domain("feature dimension mismatch"));
        }
        let mut dist: Vec<(f64, usize)> = (0..self.x.rows())
            .map(|i| {
                let d2 = self.x.row(i).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                (d2, i)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, cmp);
        }
        let vals: Vec<f64> = dist[..self.k].iter().map(|&(_, i)| self.y[i]).collect();
        Ok(stable_mean(&vals))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressorKind {
    HonestForest,
    KnnBaseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub kind: RegressorKind,
    pub forest: ForestParams,
    pub knn_k: usize,
}

impl Default for RegressorParams {
    fn default() -> Self {
        Self {
            kind: RegressorKind::HonestForest,
            forest: ForestParams::default(),
            knn_k: 20,
        }
    }
}

/// A fitted conditional-expectation estimator.
#[derive(Debug, Clone)]
pub enum Regressor {
    Forest(Forest),
    Knn(Knn),
}

pub fn fit_regressor(x: &Matrix, y: &[f64], params: &RegressorParams) -> Result<Regressor> {
    match params.kind {
        RegressorKind::HonestForest => Ok(Regressor::Forest(Forest::fit(x, y, &params.forest)?)),
        RegressorKind::KnnBaseline => Ok(Regressor::Knn(Knn::fit(x, y, params.knn_k)?)),
    }
}

impl Regressor {
    pub fn kind(&self) -> RegressorKind {
        match self {
            Regressor::Forest(_) => RegressorKind::HonestForest,
            Regressor::Knn(_) => RegressorKind::KnnBaseline,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Regressor::Forest(f) => f.n_features(),
            Regressor::Knn(k) => k.x.cols(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        match self {
            Regressor::Forest(f) => f.predict(x),
            Regressor::Knn(k) => k.predict(x),
        }
    }

    pub fn predict_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            Regressor::Forest(f) => f.predict_rows(x),
            Regressor::Knn(k) => (0..x.rows()).map(|i| k.predict(x.row(i))).collect(),
        }
    }

    pub fn predict_variance(&self, x: &[f64]) -> Result<f64> {
        match self {
            Regressor::Forest(f) => f.predict_variance(x),
            Regressor::Knn(_) => Err(Error::Unsupported(
                "variance estimates require the honest forest".into(),
            )),
        }
    }

    /// Average prediction over `x` with column `col` set to each value in
    /// `sorted`, together with the per-tree averages when available.
    pub fn predict_averaged(&self, x: &[f64], col: usize, sorted: &[f64]) -> Result<(f64, Option<Vec<f64>>)> {
        match self {
            Regressor::Forest(f) => {
                let per_tree = f.tree_predictions_averaged(x, col, sorted)?;
                Ok((stable_mean(&per_tree), Some(per_tree)))
            }
            Regressor::Knn(k) => {
                let mut row = x.to_vec();
                let mut preds = Vec::with_capacity(sorted.len());
                for &v in sorted {
                    row[col] = v;
                    preds.push(k.predict(&row)?);
                }
                Ok((stable_mean(&preds), None))
            }
        }
    }

    pub fn split_importance(&self) -> Result<Vec<f64>> {
        match self {
            Regressor::Forest(f) => Ok(f.split_importance().to_vec()),
            Regressor::Knn(_) => Err(Error::Unsupported(
                "split importance is defined for forests only".into(),
            )),
        }
    }
}
