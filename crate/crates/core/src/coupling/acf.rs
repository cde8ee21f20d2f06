//! Affine coupling flows `x_d ↦ exp(s(x'))·x_d + t(x')` and the ridge-add builders.

use serde::{Deserialize, Serialize};

use super::fit::{fit_ridge, FitOptions};
use super::flow::{CouplingFlow, FlowOp};
use super::ridge::{RidgeSum, RidgeTerm};
use crate::error::{Error, Result};
use crate::netcore::{Box, Network};
use crate::pwl1d::{compile_increasing_pwl, pwl_approximate};

/// Shared share of the tolerance given to each lossy piece (log, exp, correction).
const PIECE_SHARE: f64 = 0.3;
/// Term budget for the fitted shift correction.
const CORRECTION_TERMS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfSpec {
    pub d: usize,
    #[serde(default)]
    pub s: RidgeSum,
    #[serde(default)]
    pub t: RidgeSum,
}

impl AcfSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::invalid("coupling dimension must be positive"));
        }
        self.s.validate(self.d - 1)?;
        self.t.validate(self.d - 1)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let last = self.d - 1;
        y[last] = self.s.eval(&x[..last]).exp() * x[last] + self.t.eval(&x[..last]);
        y
    }

    /// The analytic inverse `x_d ↦ exp(−s)·x_d − t·exp(−s)` with the second
    /// part fitted on `prefix` as a ridge sum.
    pub fn inverse(&self, prefix: &Box, tol: f64) -> Result<AcfSpec> {
        let t_inv = |x: &[f64]| -self.t.eval(x) * (-self.s.eval(x)).exp();
        let fit = fit_ridge(&t_inv, prefix, CORRECTION_TERMS, tol, &FitOptions::default())?;
        Ok(AcfSpec { d: self.d, s: self.s.negated(), t: fit.sum })
    }
}

/// Value of `s` when it does not depend on the prefix.
fn constant_value(s: &RidgeSum, prefix: &Box) -> Option<f64> {
    let varies = s.terms.iter().any(|t| t.a != 0.0 && t.b.iter().enumerate().any(|(i, b)| *b != 0.0 && prefix.width(i) > 0.0));
    (!varies).then(|| s.eval(&prefix.lo))
}

fn check_box(d: usize, domain: &Box) -> Result<()> {
    if domain.dim() != d {
        return Err(Error::Dimension { layer: 0, expected: d, got: domain.dim() });
    }
    if !domain.is_bounded() {
        return Err(Error::invalid("box must be bounded"));
    }
    Ok(())
}

/// Width-d Leaky-ReLU network for `x_d += a·lr_β(b·x' + c)`; exact up to rounding.
pub fn build_ridge_add(d: usize, term: &RidgeTerm, domain: &Box) -> Result<Network> {
    check_box(d, domain)?;
    if term.b.len() + 1 != d {
        return Err(Error::Dimension { layer: 0, expected: d - 1, got: term.b.len() });
    }
    let mut flow = CouplingFlow::new(d);
    flow.push(FlowOp::RidgeAdd(term.clone()));
    flow.to_leaky_network(domain)
}

/// Width-d Leaky-ReLU network for `x_d += t(x')`, two layers per term.
pub fn build_translation_add(d: usize, t: &RidgeSum, domain: &Box) -> Result<Network> {
    check_box(d, domain)?;
    t.validate(d - 1)?;
    let mut flow = CouplingFlow::new(d);
    flow.push_translation(t);
    flow.to_leaky_network(domain)
}

/// Flow approximating the coupling map on `domain` within `tol`.
///
/// The last coordinate is shifted to `[1, ·]` before the logarithm; the
/// leftover `−M·(exp(s) − 1)` from undoing the shift is fitted and added.
pub fn acf_flow(spec: &AcfSpec, domain: &Box, tol: f64) -> Result<CouplingFlow> {
    spec.validate()?;
    check_box(spec.d, domain)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let d = spec.d;
    let last = d - 1;
    let prefix = domain.prefix(last);
    let mut flow = CouplingFlow::new(d);
    if let Some(k) = constant_value(&spec.s, &prefix) {
        flow.push_last_affine(k.exp(), 0.0);
        flow.push_translation(&spec.t);
        return Ok(flow);
    }

    let (s_lo, s_hi) = spec.s.range(&prefix);
    let m = 1.0 - domain.lo[last];
    let y_max = domain.hi[last] + m;
    let e_log = PIECE_SHARE * tol / (y_max * s_hi.exp());
    let e_exp = PIECE_SHARE * tol;

    flow.push_last_affine(1.0, m);
    let log = pwl_approximate(&f64::ln, 1.0, y_max, e_log)?;
    flow.push_scalar_network(&compile_increasing_pwl(&log)?);
    flow.push_translation(&spec.s);
    let pad = 2.0 * e_log + 1e-9;
    let exp = pwl_approximate(&f64::exp, s_lo - pad, y_max.ln() + s_hi + pad, e_exp)?;
    flow.push_scalar_network(&compile_increasing_pwl(&exp)?);
    flow.push_last_affine(1.0, -m);
    flow.push_translation(&spec.t);

    if m != 0.0 {
        let corr = |x: &[f64]| -m * (spec.s.eval(x).exp() - 1.0);
        let opts = FitOptions { initial_knots: kinks(&spec.s, &prefix), ..FitOptions::default() };
        let fit = fit_ridge(&corr, &prefix, CORRECTION_TERMS, PIECE_SHARE * tol, &opts)?;
        flow.push_translation(&fit.sum);
    }
    Ok(flow)
}

/// Width-d Leaky-ReLU network approximating the coupling map on `domain`.
pub fn compile_acf(spec: &AcfSpec, domain: &Box, tol: f64) -> Result<Network> {
    acf_flow(spec, domain, tol)?.to_leaky_network(domain)
}

// Hinge locations of `s` along the single active prefix coordinate, if any.
fn kinks(s: &RidgeSum, prefix: &Box) -> Vec<f64> {
    let active = prefix.active_dims();
    if active.len() != 1 {
        return Vec::new();
    }
    let k = active[0];
    s.terms
        .iter()
        .filter(|t| t.b[k] != 0.0)
        .map(|t| {
            let rest: f64 = t.b.iter().enumerate().filter(|(i, _)| *i != k).map(|(i, b)| b * prefix.lo[i]).sum();
            -(t.c + rest) / t.b[k]
        })
        .filter(|p| *p > prefix.lo[k] && *p < prefix.hi[k])
        .collect()
}
