//! One contraction step of the slice ratio `target / g(·, α₂)`.

use crate::coupling::{fit_on_samples, CouplingFlow, FitOptions, FlowOp, RidgeSum};
use crate::error::{Error, Result};
use crate::netcore::{leaky_relu, Box};

/// Sharpening problem over the prefix grid.
///
/// `g` is the last coordinate of `flow`; it vanishes on the `α₁` slice and is
/// non-positive below it. `target` holds the wanted values of `g` on the `α₂`
/// slice at each prefix node, and `gamma` is the largest grid ratio
/// `target / g(·, α₂)`.
#[derive(Debug, Clone)]
pub struct SharpenState {
    pub flow: CouplingFlow,
    pub gamma: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub nodes: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    /// `g(node, α₂)` for every node.
    pub current: Vec<f64>,
    pub max_terms: usize,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub gamma_old: f64,
    pub gamma_new: f64,
    /// `gamma_old^{2/3}`.
    pub bound: f64,
    /// Residual of the fitted offset `h` on the nodes.
    pub fit_error: f64,
    /// `max(0, gamma_new − bound)`.
    pub fit_slack: f64,
    /// Offset subtracted before the wrap and added back after it.
    pub h: RidgeSum,
    /// Slope applied above `h`, `gamma_old^{1/3}`.
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub enum StepOutcome {
    Stepped(SharpenState, StepReport),
    /// `gamma ≤ 1`; the state is returned unchanged.
    Converged(SharpenState),
}

impl SharpenState {
    /// State with explicit node targets; `current` is read off `flow`.
    pub fn from_targets(flow: CouplingFlow, alpha1: f64, alpha2: f64, nodes: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        if nodes.len() != target.len() || nodes.is_empty() {
            return Err(Error::invalid("one target per prefix node is required"));
        }
        if !(alpha1 < alpha2) {
            return Err(Error::invalid("slices must satisfy alpha1 < alpha2"));
        }
        let current: Vec<f64> = nodes
            .iter()
            .map(|p| {
                let mut x = p.clone();
                x.push(alpha2);
                flow.eval_last(&x)
            })
            .collect();
        for (p, (t, c)) in nodes.iter().zip(target.iter().zip(&current)) {
            if !(*t > 0.0 && *c > 0.0) {
                return Err(Error::NonMonotone { at: p.first().copied().unwrap_or(alpha2) });
            }
        }
        let max_terms = nodes.len().clamp(8, 256);
        let mut st = SharpenState { flow, gamma: 1.0, alpha1, alpha2, nodes, target, current, max_terms };
        st.gamma = st.ratios().into_iter().fold(f64::NEG_INFINITY, f64::max);
        Ok(st)
    }

    /// State whose target is `b(p)·g(p, α₂)` on a `grid_res` lattice of the unit prefix cube.
    pub fn from_ratio(flow: CouplingFlow, alpha1: f64, alpha2: f64, grid_res: usize, b: &dyn Fn(&[f64]) -> f64) -> Result<Self> {
        let nodes = Box::unit(flow.d - 1).grid(grid_res);
        let at = |p: &[f64]| {
            let mut x = p.to_vec();
            x.push(alpha2);
            flow.eval_last(&x)
        };
        let target = nodes.iter().map(|p| b(p) * at(p)).collect();
        SharpenState::from_targets(flow, alpha1, alpha2, nodes, target)
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.target.iter().zip(&self.current).map(|(t, c)| t / c).collect()
    }

    /// Largest node error `|g(·, α₂) − target|`.
    pub fn slice_error(&self) -> f64 {
        self.target.iter().zip(&self.current).fold(0.0f64, |m, (t, c)| m.max((t - c).abs()))
    }

    /// Steps needed to bring `gamma` below `1 + delta` if every step attains
    /// the `2/3` power exactly.
    pub fn predicted_steps(gamma: f64, delta: f64) -> usize {
        if gamma <= 1.0 + delta {
            return 0;
        }
        (((1.0 + delta).ln() / gamma.ln()).ln() / (2.0f64 / 3.0).ln()).ceil().max(0.0) as usize
    }
}

/// Performs one sharpening step.
pub fn sharpen_step(state: &SharpenState, fit: &FitOptions) -> Result<StepOutcome> {
    let gamma = state.gamma;
    if gamma <= 1.0 {
        return Ok(StepOutcome::Converged(state.clone()));
    }
    let scale = gamma.cbrt();
    let upper = scale * scale;
    let ratios = state.ratios();
    let in_low: Vec<bool> = ratios.iter().map(|r| *r <= scale).collect();
    let in_high: Vec<bool> = ratios.iter().map(|r| *r >= upper).collect();
    let dist = |p: &[f64], mask: &[bool]| {
        state
            .nodes
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(q, _)| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let any_low = in_low.iter().any(|m| *m);
    let h_nodes: Vec<f64> = state
        .nodes
        .iter()
        .zip(&state.current)
        .map(|(p, g)| {
            let phi = if !any_low {
                1.0
            } else {
                let (d0, d1) = (dist(p, &in_low), dist(p, &in_high));
                if d0 + d1 == 0.0 { 1.0 } else { d0 / (d0 + d1) }
            };
            (1.0 - phi) * g
        })
        .collect();
    let prefix = Box::unit(state.flow.d - 1);
    let h = fit_on_samples(&state.nodes, &h_nodes, &prefix, state.max_terms, fit)?;

    let mut flow = state.flow.clone();
    flow.push_translation(&h.sum.negated());
    flow.push(FlowOp::Wrap {
        pre_scale: 1.0,
        pre_shift: 0.0,
        beta: 1.0 / scale,
        post_scale: scale,
        post_shift: 0.0,
    });
    flow.push_translation(&h.sum);

    let current: Vec<f64> = state
        .nodes
        .iter()
        .zip(&state.current)
        .map(|(p, g)| {
            let hv = h.sum.eval(p);
            scale * leaky_relu(1.0 / scale, g - hv) + hv
        })
        .collect();
    let mut next = SharpenState { flow, current, ..state.clone() };
    next.gamma = next.ratios().into_iter().fold(f64::NEG_INFINITY, f64::max);
    let report = StepReport {
        gamma_old: gamma,
        gamma_new: next.gamma,
        bound: upper,
        fit_error: h.validation_error,
        fit_slack: (next.gamma - upper).max(0.0),
        h: h.sum,
        scale,
    };
    Ok(StepOutcome::Stepped(next, report))
}
