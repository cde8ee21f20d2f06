use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Box;
use crate::error::{Error, Result};

/// Smallest singular value below which an affine map is treated as singular.
pub const INVERTIBILITY_THRESHOLD: f64 = 1e-12;

/// `x ↦ weight · x + bias`, with `weight` stored row-major (rows = output dim).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn new(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let map = AffineMap { weight, bias };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.len() != self.bias.len() {
            return Err(Error::invalid(format!(
                "weight has {} rows but bias has {} entries",
                self.weight.len(),
                self.bias.len()
            )));
        }
        if let Some(first) = self.weight.first() {
            let cols = first.len();
            if self.weight.iter().any(|r| r.len() != cols) {
                return Err(Error::invalid("ragged weight matrix"));
            }
        }
        Ok(())
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n], vec![0.0; n])
    }

    pub fn diagonal(diag: &[f64], bias: Vec<f64>) -> Self {
        let n = diag.len();
        let weight = (0..n)
            .map(|i| {
                let mut row = vec![0.0; n];
                row[i] = diag[i];
                row
            })
            .collect();
        AffineMap { weight, bias }
    }

    /// Zero-bias linear map.
    pub fn linear(weight: Vec<Vec<f64>>) -> Self {
        let bias = vec![0.0; weight.len()];
        AffineMap { weight, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    /// Input dimension. A map with no outputs has no recorded input width;
    /// callers never build such maps.
    pub fn in_dim(&self) -> usize {
        self.weight.first().map_or(0, Vec::len)
    }

    pub fn is_square(&self) -> bool {
        self.in_dim() == self.out_dim()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
            .collect()
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &AffineMap) -> AffineMap {
        let n_in = inner.in_dim();
        let weight = self
            .weight
            .iter()
            .map(|row| {
                (0..n_in)
                    .map(|j| {
                        row.iter()
                            .zip(&inner.weight)
                            .map(|(w, irow)| w * irow[j])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let bias = self.apply(&inner.bias);
        AffineMap { weight, bias }
    }

    pub(crate) fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.out_dim(), self.in_dim(), |i, j| self.weight[i][j])
    }

    /// Smallest singular value of the weight (0 for non-square maps).
    pub fn min_singular_value(&self) -> f64 {
        if !self.is_square() || self.out_dim() == 0 {
            return 0.0;
        }
        self.matrix()
            .singular_values()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_invertible(&self) -> bool {
        self.min_singular_value() > INVERTIBILITY_THRESHOLD
    }

    /// Solve `weight · x + bias = y`.
    pub fn solve(&self, y: &[f64]) -> Option<Vec<f64>> {
        if !self.is_invertible() {
            return None;
        }
        let rhs = DVector::from_iterator(y.len(), y.iter().zip(&self.bias).map(|(a, b)| a - b));
        self.matrix()
            .lu()
            .solve(&rhs)
            .map(|v| v.iter().copied().collect())
    }

    pub fn inverse(&self) -> Option<AffineMap> {
        if !self.is_invertible() {
            return None;
        }
        let inv = self.matrix().try_inverse()?;
        let n = self.out_dim();
        let weight: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| inv[(i, j)]).collect()).collect();
        let lin = AffineMap::linear(weight);
        let bias = lin.apply(&self.bias).into_iter().map(|v| -v).collect();
        Some(AffineMap {
            weight: lin.weight,
            bias,
        })
    }

    /// Operator ∞-norm of the weight (max absolute row sum).
    pub fn inf_norm(&self) -> f64 {
        self.weight
            .iter()
            .map(|r| r.iter().map(|w| w.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Interval image of a box.
    pub fn image_box(&self, b: &Box) -> Box {
        let mut lo = Vec::with_capacity(self.out_dim());
        let mut hi = Vec::with_capacity(self.out_dim());
        for (row, bias) in self.weight.iter().zip(&self.bias) {
            let (mut l, mut h) = (*bias, *bias);
            for ((w, a), c) in row.iter().zip(&b.lo).zip(&b.hi) {
                if *w >= 0.0 {
                    l += w * a;
                    h += w * c;
                } else {
                    l += w * c;
                    h += w * a;
                }
            }
            lo.push(l);
            hi.push(h);
        }
        Box::new_unchecked(lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_and_inverse() {
        let a = AffineMap::new(vec![vec![2.0, 1.0], vec![0.0, 3.0]], vec![1.0, -1.0]).unwrap();
        let b = AffineMap::new(vec![vec![1.0, -1.0], vec![1.0, 1.0]], vec![0.5, 0.0]).unwrap();
        let x = [0.3, -0.7];
        let ab = a.compose(&b).apply(&x);
        let seq = a.apply(&b.apply(&x));
        for (p, q) in ab.iter().zip(&seq) {
            assert!((p - q).abs() < 1e-15);
        }
        let inv = a.inverse().unwrap();
        let back = inv.apply(&a.apply(&x));
        assert!((back[0] - x[0]).abs() < 1e-14 && (back[1] - x[1]).abs() < 1e-14);
        let solved = a.solve(&a.apply(&x)).unwrap();
        assert!((solved[1] - x[1]).abs() < 1e-14);
    }

    #[test]
    fn singular_is_rejected() {
        let s = AffineMap::linear(vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(!s.is_invertible());
        assert!(s.inverse().is_none());
        assert!(AffineMap::new(vec![vec![1.0]], vec![]).is_err());
    }

    #[test]
    fn image_of_box() {
        let m = AffineMap::new(vec![vec![2.0]], vec![1.0]).unwrap();
        let b = m.image_box(&Box::unit(1));
        assert_eq!((b.lo[0], b.hi[0]), (1.0, 3.0));
    }
}
