//! Dense building blocks shared by the exchange blocks and the decoder.

use crate::error::{invalid, Result};

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self · x` for a column vector `x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self · otherᵀ`, i.e. every row of `other` mapped through `self`.
    pub fn apply_rows(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(other.cols, self.cols);
        let mut out = Matrix::zeros(other.rows, self.rows);
        for r in 0..other.rows {
            let x = other.row(r);
            for (o, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = dot(self.row(o), x);
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Affine map `W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows {
            return Err(invalid(format!(
                "bias of length {} for a {}-output map",
                bias.len(),
                weight.rows
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.apply(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }

    /// Maps every row of `x`.
    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        let mut y = self.weight.apply_rows(x);
        for r in 0..y.rows {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }
}

/// Normalization over the last axis followed by a per-feature affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: Self::EPS,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        x.iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }

    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..x.rows {
            let y = self.apply(x.row(r));
            out.row_mut(r).copy_from_slice(&y);
        }
        out
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        *v = v.max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_matrix() {
        let w = Matrix::new(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap();
        let l = Linear::new(w, vec![0.5, -0.5]).unwrap();
        assert_eq!(l.apply(&[1.0, 2.0, 3.0]), vec![7.5, -1.5]);
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Linear::new(Matrix::zeros(2, 2), vec![0.0]).is_err());
        let x = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let y = l.apply_rows(&x);
        assert_eq!(y.row(0), &[7.5, -1.5]);
        assert_eq!(y.row(1), &[0.5, -0.5]);
        assert_eq!(Matrix::identity(3).apply(&[4.0, 5.0, 6.0]), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let ln = LayerNorm::identity(4);
        let y = ln.apply(&[1.0, 2.0, 3.0, 10.0]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}
