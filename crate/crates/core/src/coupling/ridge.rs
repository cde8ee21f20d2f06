use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{leaky_relu, Box};

/// `a · lr_β(b·x + c)`; `β = 0` is a plain ReLU term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeTerm {
    pub a: f64,
    pub b: Vec<f64>,
    pub c: f64,
    pub beta: f64,
}

impl RidgeTerm {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid(format!("ridge beta must be non-negative, got {}", self.beta)));
        }
        if !(self.a.is_finite() && self.c.is_finite() && self.b.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("non-finite ridge coefficient"));
        }
        Ok(())
    }

    #[inline]
    pub fn inner(&self, x: &[f64]) -> f64 {
        self.b.iter().zip(x).fold(self.c, |acc, (b, v)| acc + b * v)
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.a * leaky_relu(self.beta, self.inner(x))
    }

    /// Range of `b·x + c` over a box.
    pub fn inner_range(&self, domain: &Box) -> (f64, f64) {
        let (mut lo, mut hi) = (self.c, self.c);
        for ((b, l), h) in self.b.iter().zip(&domain.lo).zip(&domain.hi) {
            if *b >= 0.0 {
                lo += b * l;
                hi += b * h;
            } else {
                lo += b * h;
                hi += b * l;
            }
        }
        (lo, hi)
    }

    /// Range of the whole term over a box.
    pub fn range(&self, domain: &Box) -> (f64, f64) {
        let (zl, zh) = self.inner_range(domain);
        let (l, h) = (leaky_relu(self.beta, zl), leaky_relu(self.beta, zh));
        if self.a >= 0.0 {
            (self.a * l, self.a * h)
        } else {
            (self.a * h, self.a * l)
        }
    }

    /// Bound on the ℓ¹ norm of the gradient.
    pub fn grad_l1(&self) -> f64 {
        self.a.abs() * self.beta.max(1.0) * self.b.iter().map(|v| v.abs()).sum::<f64>()
    }
}

/// `constant + Σ aᵢ · lr_{βᵢ}(bᵢ·x + cᵢ)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RidgeSum {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub terms: Vec<RidgeTerm>,
}

impl RidgeSum {
    pub fn constant(c: f64) -> Self {
        RidgeSum {
            constant: c,
            terms: Vec::new(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !self.constant.is_finite() {
            return Err(Error::invalid("non-finite ridge constant"));
        }
        for t in &self.terms {
            t.validate()?;
            if t.b.len() != dim {
                return Err(Error::invalid(format!(
                    "ridge term has {} weights, expected {dim}",
                    t.b.len()
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().fold(self.constant, |acc, t| acc + t.eval(x))
    }

    /// Sound enclosure of the sum over a box.
    pub fn range(&self, domain: &Box) -> (f64, f64) {
        self.terms.iter().fold((self.constant, self.constant), |(l, h), t| {
            let (a, b) = t.range(domain);
            (l + a, h + b)
        })
    }

    pub fn grad_l1(&self) -> f64 {
        self.terms.iter().map(RidgeTerm::grad_l1).sum()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.a == 0.0)
    }

    pub fn scaled(&self, k: f64) -> RidgeSum {
        RidgeSum {
            constant: self.constant * k,
            terms: self
                .terms
                .iter()
                .map(|t| RidgeTerm { a: t.a * k, ..t.clone() })
                .collect(),
        }
    }

    pub fn negated(&self) -> RidgeSum {
        self.scaled(-1.0)
    }

    /// Concatenation of both sums with like features merged.
    pub fn plus(&self, other: &RidgeSum) -> RidgeSum {
        let mut out = RidgeSum {
            constant: self.constant + other.constant,
            terms: self.terms.clone(),
        };
        out.terms.extend(other.terms.iter().cloned());
        out.merged()
    }

    /// Merges terms sharing `(b, c, β)` and drops zero coefficients.
    pub fn merged(&self) -> RidgeSum {
        let mut terms: Vec<RidgeTerm> = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            match terms
                .iter_mut()
                .find(|u| u.b == t.b && u.c == t.c && u.beta == t.beta)
            {
                Some(u) => u.a += t.a,
                None => terms.push(t.clone()),
            }
        }
        terms.retain(|t| t.a != 0.0);
        RidgeSum {
            constant: self.constant,
            terms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_and_range() {
        let t = RidgeTerm { a: 2.0, b: vec![1.0, -1.0], c: 0.5, beta: 0.1 };
        assert_eq!(t.eval(&[1.0, 0.0]), 3.0);
        assert!((t.eval(&[0.0, 1.0]) - 2.0 * 0.1 * -0.5).abs() < 1e-15);
        let (lo, hi) = t.range(&Box::unit(2));
        assert!((lo + 0.1).abs() < 1e-15 && (hi - 3.0).abs() < 1e-15);
        let s = RidgeSum { constant: 1.0, terms: vec![t.clone(), t.clone()] };
        assert_eq!(s.merged().terms.len(), 1);
        assert_eq!(s.eval(&[1.0, 0.0]), 7.0);
        assert!(s.plus(&s.negated()).terms.is_empty());
    }

    #[test]
    fn json_shape() {
        let s: RidgeSum = serde_json::from_str(
            r#"{"constant": 0, "terms": [{"a": 1, "b": [2], "c": 3, "beta": 0.5}]}"#,
        )
        .unwrap();
        assert_eq!(s.terms[0].b, vec![2.0]);
        assert!(RidgeSum { constant: 0.0, terms: vec![RidgeTerm { a: 1.0, b: vec![1.0], c: 0.0, beta: -1.0 }] }
            .validate(1)
            .is_err());
    }
}
