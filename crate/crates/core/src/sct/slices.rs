//! Slice induction: matching a single-coordinate transformation on `N + 1`
//! slices of the last coordinate with a width-d Leaky-ReLU network.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sharpen::{sharpen_step, SharpenState, StepOutcome};
use crate::coupling::{fit_on_samples, CouplingFlow, FitOptions, FlowOp, RidgeSum};
use crate::error::{Error, Result};
use crate::netcore::{ActivationTag, AffineMap, Box, Layer, Network};

type Tau = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `x ↦ (x₁, …, x_{d−1}, τ(x))` with `τ` strictly increasing in `x_d`.
#[derive(Clone)]
pub struct SctOracle {
    pub d: usize,
    pub tau: Tau,
}

impl SctOracle {
    pub fn new(d: usize, tau: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        SctOracle { d, tau: Arc::new(tau) }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        y[self.d - 1] = (self.tau)(x);
        y
    }
}

impl std::fmt::Debug for SctOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SctOracle").field("d", &self.d).finish_non_exhaustive()
    }
}

/// Sampled slice values `u[i][j] = τ(prefix_grid[j], i/N)` in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceTable {
    #[serde(rename = "N")]
    pub n: usize,
    pub prefix_grid: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SctOptions {
    /// Prefix lattice resolution; `None` picks 65 for one prefix coordinate
    /// and fewer for more.
    pub grid_res: Option<usize>,
    pub max_steps: usize,
    pub fit: FitOptions,
}

impl Default for SctOptions {
    fn default() -> Self {
        SctOptions { grid_res: None, max_steps: 60, fit: FitOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub struct SctCompiled {
    pub network: Network,
    pub flow: CouplingFlow,
    /// Largest error on the prefix nodes for each slice `0..=N`.
    pub slice_errors: Vec<f64>,
    /// Same, on the cell-centred prefix lattice (between nodes).
    pub off_node_slice_errors: Vec<f64>,
    /// Sharpening steps spent on each slice `1..=N`.
    pub steps: Vec<usize>,
    /// `gamma` before each step, per slice.
    pub gamma_traces: Vec<Vec<f64>>,
    /// Largest increment of `τ` between neighbouring slices on the nodes.
    pub inter_slice_variation: f64,
    pub table: SliceTable,
}

fn default_res(prefix_dims: usize) -> usize {
    match prefix_dims {
        0 => 1,
        1 => 65,
        2 => 17,
        _ => 5,
    }
}

/// Flow state for every slice ordinate and node, updated op by op.
struct Cache {
    states: Vec<Vec<Vec<f64>>>,
}

impl Cache {
    fn apply(&mut self, flow: &mut CouplingFlow, ops: Vec<FlowOp>) {
        for op in ops {
            for row in self.states.iter_mut() {
                for v in row.iter_mut() {
                    crate::coupling::apply_flow_op(&op, v);
                }
            }
            flow.push(op);
        }
    }

    fn last(&self, i: usize) -> Vec<f64> {
        self.states[i].iter().map(|v| *v.last().expect("d ≥ 1")).collect()
    }
}

fn translation_ops(d: usize, t: &RidgeSum) -> Vec<FlowOp> {
    let mut f = CouplingFlow::new(d);
    f.push_translation(t);
    f.ops
}

/// Compiles `oracle` on `domain` so that every slice `x_d = lo_d + i·w_d/N`
/// is matched within `tol` on the prefix nodes; the map stays strictly
/// increasing in `x_d`.
pub fn compile_sct_leakyrelu(oracle: &SctOracle, domain: &Box, n: usize, tol: f64) -> Result<SctCompiled> {
    compile_sct_with(oracle, domain, n, tol, &SctOptions::default())
}

pub fn compile_sct_with(oracle: &SctOracle, domain: &Box, n: usize, tol: f64, opts: &SctOptions) -> Result<SctCompiled> {
    let d = oracle.d;
    if d == 0 || domain.dim() != d {
        return Err(Error::Dimension { layer: 0, expected: d, got: domain.dim() });
    }
    if n < 1 {
        return Err(Error::invalid("slice count must be at least 1"));
    }
    if !(tol > 0.0) || !domain.is_bounded() || domain.width(d - 1) <= 0.0 {
        return Err(Error::invalid("need a positive tolerance and a bounded box with non-empty last side"));
    }
    let last = d - 1;
    let widths: Vec<f64> = (0..d).map(|i| domain.width(i)).collect();
    let denorm = |z: &[f64]| -> Vec<f64> { z.iter().enumerate().map(|(i, v)| domain.lo[i] + widths[i] * v).collect() };
    let tau = |z: &[f64]| (oracle.tau)(&denorm(z));

    let nodes = Box::unit(last).grid(opts.grid_res.unwrap_or_else(|| default_res(last)));
    let slice = |i: usize| i as f64 / n as f64;
    let at = |p: &[f64], t: f64| {
        let mut x = p.to_vec();
        x.push(t);
        x
    };
    let u: Vec<Vec<f64>> = (0..=n).map(|i| nodes.iter().map(|p| tau(&at(p, slice(i)))).collect()).collect();
    let mut variation = 0.0f64;
    for i in 0..n {
        for (j, p) in nodes.iter().enumerate() {
            let inc = u[i + 1][j] - u[i][j];
            if !(inc > 0.0) {
                return Err(Error::NonMonotone { at: denorm(&at(p, slice(i)))[last] });
            }
            variation = variation.max(inc);
        }
    }

    let prefix = Box::unit(last);
    let mut cache = Cache {
        states: (0..=n).map(|i| nodes.iter().map(|p| at(p, slice(i))).collect()).collect(),
    };
    let mut flow = CouplingFlow::new(d);
    let base = fit_on_samples(&nodes, &u[0], &prefix, nodes.len(), &opts.fit)?;
    cache.apply(&mut flow, translation_ops(d, &base.sum));

    let mut steps = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for n0 in 0..n {
        let low = cache.last(n0);
        let v = fit_on_samples(&nodes, &low, &prefix, nodes.len(), &opts.fit)?;
        cache.apply(&mut flow, translation_ops(d, &v.sum.negated()));
        let target: Vec<f64> = nodes.iter().zip(&u[n0 + 1]).map(|(p, u1)| u1 - v.sum.eval(p)).collect();
        let current = cache.last(n0 + 1);
        let min_ratio = target.iter().zip(&current).map(|(t, c)| t / c).fold(f64::INFINITY, f64::min);
        if !(min_ratio > 0.0) {
            return Err(Error::NonMonotone { at: domain.lo[last] + widths[last] * slice(n0 + 1) });
        }
        if min_ratio < 1.0 {
            // β·lr_{1/β} shrinks the positive part so every ratio is at least one.
            cache.apply(&mut flow, vec![FlowOp::Wrap {
                pre_scale: 1.0,
                pre_shift: 0.0,
                beta: 1.0 / min_ratio,
                post_scale: min_ratio,
                post_shift: 0.0,
            }]);
        }
        let start = CouplingFlow::new(d);
        let mut st = SharpenState::from_targets(start, slice(n0), slice(n0 + 1), nodes.clone(), target.clone())
            .map_err(|_| Error::NonMonotone { at: domain.lo[last] + widths[last] * slice(n0 + 1) })?;
        st.current = cache.last(n0 + 1);
        st.gamma = st.ratios().into_iter().fold(f64::NEG_INFINITY, f64::max);
        let max_target = target.iter().cloned().fold(0.0, f64::max);
        let delta = 0.5 * tol / max_target;
        let mut trace = vec![st.gamma];
        let mut count = 0;
        while st.gamma - 1.0 >= delta {
            if count == opts.max_steps {
                return Err(Error::Budget {
                    tol,
                    best: st.slice_error(),
                    context: format!("slice {} after {count} sharpening steps", n0 + 1),
                });
            }
            match sharpen_step(&st, &opts.fit)? {
                StepOutcome::Stepped(mut next, rep) => {
                    let mut ops = translation_ops(d, &rep.h.negated());
                    ops.push(FlowOp::Wrap { pre_scale: 1.0, pre_shift: 0.0, beta: 1.0 / rep.scale, post_scale: rep.scale, post_shift: 0.0 });
                    ops.extend(translation_ops(d, &rep.h));
                    cache.apply(&mut flow, ops);
                    next.flow = CouplingFlow::new(d);
                    next.current = cache.last(n0 + 1);
                    next.gamma = next.ratios().into_iter().fold(f64::NEG_INFINITY, f64::max);
                    st = next;
                    trace.push(st.gamma);
                    count += 1;
                }
                StepOutcome::Converged(_) => break,
            }
        }
        cache.apply(&mut flow, translation_ops(d, &v.sum));
        steps.push(count);
        traces.push(trace);
    }

    // Conjugate by the box normalization.
    let pre = AffineMap::diagonal(
        &widths.iter().map(|w| if *w > 0.0 { 1.0 / w } else { 0.0 }).collect::<Vec<_>>(),
        (0..d).map(|i| if widths[i] > 0.0 { -domain.lo[i] / widths[i] } else { 0.0 }).collect(),
    );
    let mut post_diag: Vec<f64> = widths.clone();
    post_diag[last] = 1.0;
    let mut post_bias = domain.lo.clone();
    post_bias[last] = 0.0;
    let mut full = CouplingFlow::new(d);
    full.push(FlowOp::Affine(pre));
    full.extend(&flow.simplified());
    full.push(FlowOp::Affine(AffineMap::diagonal(&post_diag, post_bias)));
    let mut network = full.to_leaky_network(domain)?;
    if network.depth() == 0 {
        // Keep the emitted width at d even when no bend was needed.
        let layer = Layer::new(network.final_affine.clone(), ActivationTag::LeakyRelu(1.0));
        network = Network::new(d, vec![layer], AffineMap::identity(d))?;
    }

    let mut slice_errors = Vec::with_capacity(n + 1);
    let mut off_node = Vec::with_capacity(n + 1);
    let between = if last == 0 { Vec::new() } else { prefix.shifted_grid(nodes.len().max(2) - 1) };
    for i in 0..=n {
        let mut e = 0.0f64;
        for (j, p) in nodes.iter().enumerate() {
            let y = network.evaluate(&denorm(&at(p, slice(i))))?;
            e = e.max((y[last] - u[i][j]).abs());
        }
        slice_errors.push(e);
        let mut e = 0.0f64;
        for p in &between {
            let x = denorm(&at(p, slice(i)));
            e = e.max((network.evaluate(&x)?[last] - (oracle.tau)(&x)).abs());
        }
        off_node.push(e);
    }
    Ok(SctCompiled {
        network,
        flow: full,
        slice_errors,
        off_node_slice_errors: off_node,
        steps,
        gamma_traces: traces,
        inter_slice_variation: variation,
        table: SliceTable { n, prefix_grid: nodes, u },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pwl1d::{compile_increasing_pwl, PwlFunction};

    #[test]
    fn identity_needs_no_sharpening() {
        let oracle = SctOracle::new(2, |x| x[1]);
        let out = compile_sct_leakyrelu(&oracle, &Box::unit(2), 4, 1e-3).unwrap();
        assert_eq!(out.network.width(), 2);
        assert!(out.steps.iter().all(|s| *s == 0));
        assert!(out.slice_errors.iter().all(|e| *e < 1e-12));
    }

    #[test]
    fn one_dim_pwl_matches_exact_compiler() {
        let pwl = PwlFunction::from_knots(&[0.0, 0.25, 0.5, 0.75, 1.0], &[0.0, 0.1, 0.6, 0.7, 1.5]).unwrap();
        let exact = compile_increasing_pwl(&pwl).unwrap();
        let p = pwl.clone();
        let oracle = SctOracle::new(1, move |x| p.eval(x[0]));
        let out = compile_sct_leakyrelu(&oracle, &Box::unit(1), 4, 1e-3).unwrap();
        assert_eq!(out.network.width(), 1);
        for i in 0..=4 {
            let x = [i as f64 / 4.0];
            let want = exact.evaluate(&x).unwrap()[0];
            assert!((out.network.evaluate(&x).unwrap()[0] - want).abs() < 1e-3);
        }
    }

    #[test]
    fn bent_slices_in_two_dims() {
        let tau = |x: &[f64]| x[1] + 0.25 * (std::f64::consts::PI * x[0]).sin() * x[1] * (1.0 - x[1]);
        let oracle = SctOracle::new(2, tau);
        let out = compile_sct_leakyrelu(&oracle, &Box::unit(2), 8, 1e-2).unwrap();
        assert_eq!(out.network.width(), 2);
        for i in 0..=8 {
            for p in crate::netcore::linspace(0.0, 1.0, 33) {
                let x = [p, i as f64 / 8.0];
                assert!((out.network.evaluate(&x).unwrap()[1] - tau(&x)).abs() < 1e-2);
            }
        }
        let json = serde_json::to_value(&out.table).unwrap();
        assert_eq!(json["N"], 8);
    }

    #[test]
    fn rejects_decreasing_oracle() {
        let oracle = SctOracle::new(1, |x| -x[0]);
        assert!(matches!(
            compile_sct_leakyrelu(&oracle, &Box::unit(1), 4, 1e-2),
            Err(Error::NonMonotone { .. })
        ));
    }
}
