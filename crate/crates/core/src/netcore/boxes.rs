use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned compact domain `[lo_1, hi_1] × … × [lo_n, hi_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Box {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::invalid("box bounds have different lengths"));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite()) {
                return Err(Error::invalid(format!("box coordinate {i} is unbounded")));
            }
            if l > h {
                return Err(Error::invalid(format!("box coordinate {i} has lo > hi")));
            }
        }
        Ok(Box { lo, hi })
    }

    pub(crate) fn new_unchecked(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Box { lo, hi }
    }

    /// `[0,1]^d`.
    pub fn unit(d: usize) -> Self {
        Box {
            lo: vec![0.0; d],
            hi: vec![1.0; d],
        }
    }

    pub fn cube(d: usize, lo: f64, hi: f64) -> Self {
        Box {
            lo: vec![lo; d],
            hi: vec![hi; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= l - slack && *v <= h + slack)
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    /// Coordinates whose interval has positive length.
    pub fn active_dims(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.width(i) > 0.0).collect()
    }

    /// First `k` coordinates.
    pub fn prefix(&self, k: usize) -> Box {
        Box {
            lo: self.lo[..k].to_vec(),
            hi: self.hi[..k].to_vec(),
        }
    }

    pub fn product(&self, other: &Box) -> Box {
        Box {
            lo: self.lo.iter().chain(&other.lo).copied().collect(),
            hi: self.hi.iter().chain(&other.hi).copied().collect(),
        }
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &Box) -> Box {
        Box {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    /// Uniform lattice with `res` points per non-degenerate coordinate
    /// (degenerate coordinates contribute a single point).
    pub fn grid(&self, res: usize) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.dim())
            .map(|i| {
                if self.width(i) == 0.0 || res < 2 {
                    vec![self.lo[i]]
                } else {
                    linspace(self.lo[i], self.hi[i], res)
                }
            })
            .collect();
        cartesian(&axes)
    }

    /// Cell-centred lattice (`res` points per axis), disjoint from `grid`.
    pub fn shifted_grid(&self, res: usize) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.dim())
            .map(|i| {
                if self.width(i) == 0.0 {
                    vec![self.lo[i]]
                } else {
                    let h = self.width(i) / res as f64;
                    (0..res).map(|k| self.lo[i] + (k as f64 + 0.5) * h).collect()
                }
            })
            .collect();
        cartesian(&axes)
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|k| {
            if k == n - 1 {
                b
            } else {
                a + (b - a) * (k as f64) / ((n - 1) as f64)
            }
        })
        .collect()
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(axes.len())];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for p in &out {
            for v in axis {
                let mut q = p.clone();
                q.push(*v);
                next.push(q);
            }
        }
        out = next;
    }
    out
}
