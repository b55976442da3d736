//! Row-major feature matrices and the `(Y, W, X)` dataset.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::data(format!(
                "matrix buffer has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::data("rows have unequal lengths"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::data("columns have unequal lengths"));
        }
        let cols = columns.len();
        let mut data = vec![0.0; rows * cols];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy with `extra` appended as the last column.
    pub fn with_column(&self, extra: &[f64]) -> Result<Self> {
        if extra.len() != self.rows {
            return Err(Error::data("appended column has the wrong length"));
        }
        let cols = self.cols + 1;
        let mut data = Vec::with_capacity(self.rows * cols);
        for (i, &v) in extra.iter().enumerate() {
            data.extend_from_slice(self.row(i));
            data.push(v);
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Self {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }
}

/// Observations of the outcome `Y`, the regressor `W` and controls `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub x: Matrix,
}

impl Dataset {
    pub fn new(y: Vec<f64>, w: Vec<f64>, x: Matrix) -> Result<Self> {
        if y.len() != w.len() || y.len() != x.rows() {
            return Err(Error::data(format!(
                "length mismatch: Y has {}, W has {}, X has {} rows",
                y.len(),
                w.len(),
                x.rows()
            )));
        }
        let finite = y.iter().chain(&w).chain(x.as_slice()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::data("data contain missing or non-finite values"));
        }
        Ok(Self { y, w, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            w: idx.iter().map(|&i| self.w[i]).collect(),
            x: self.x.select_rows(idx),
        }
    }

    /// Per-column medians of `X` (average of the two middle values for even n).
    pub fn x_medians(&self) -> Vec<f64> {
        (0..self.d())
            .map(|j| {
                let mut col = self.x.column(j);
                median(&mut col)
            })
            .collect()
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean computed as `x0 + Σ (x - x0) / n`, exact for constant input.
pub fn stable_mean(values: &[f64]) -> f64 {
    match values.first() {
        None => f64::NAN,
        Some(&x0) => x0 + values.iter().map(|v| v - x0).sum::<f64>() / values.len() as f64,
    }
}

pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = stable_mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mixes a master seed with a path of integers into an independent seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_construction_and_access() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 2));
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert_eq!(m.column(1), vec![2.0, 4.0, 6.0]);
        let c = Matrix::from_columns(&[&[1.0, 3.0, 5.0], &[2.0, 4.0, 6.0]]).unwrap();
        assert_eq!(c, m);
        let e = m.with_column(&[7.0, 8.0, 9.0]).unwrap();
        assert_eq!(e.row(2), &[5.0, 6.0, 9.0]);
        assert_eq!(m.select_rows(&[2, 0]).row(0), &[5.0, 6.0]);
        assert_eq!(m.select_columns(&[1]).column(0), vec![2.0, 4.0, 6.0]);
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn dataset_validation() {
        let x = Matrix::zeros(3, 1);
        assert!(Dataset::new(vec![1.0; 3], vec![1.0; 2], x.clone()).is_err());
        assert!(Dataset::new(vec![1.0, f64::NAN, 0.0], vec![1.0; 3], x.clone()).is_err());
        let d = Dataset::new(vec![1.0; 3], vec![2.0; 3], x).unwrap();
        assert_eq!((d.n(), d.d()), (3, 1));
    }

    #[test]
    fn summaries() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(stable_mean(&[0.1; 7]), 0.1);
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert!((quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.05) - 1.15).abs() < 1e-12);
        assert!((sample_variance(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derived_seeds_differ_by_path() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        assert_ne!(derive_seed(7, &[]), derive_seed(7, &[0]));
    }
}
