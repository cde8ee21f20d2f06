//! Last-coordinate flows: sequences of maps that leave `x_{1:d-1}` alone
//! (apart from whole-vector affine stages) and update `x_d`.
//!
//! A flow has exact semantics and two exact network realizations: a width-d
//! Leaky-ReLU network using positivity shifts on the pass-through channels,
//! and a width-(d+1) ReLU network using one scratch channel.

use serde::{Deserialize, Serialize};

use super::ridge::{RidgeSum, RidgeTerm};
use crate::error::{Error, Result};
use crate::netcore::{leaky_relu, ActivationTag, AffineMap, Box, Layer, Network};

/// Pass-through channels are shifted so that they stay at least this large.
const POSITIVE_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowOp {
    /// Whole-vector affine map on ℝ^d.
    Affine(AffineMap),
    /// `x_d += a·lr_β(b·x_{1:d-1} + c)`.
    RidgeAdd(RidgeTerm),
    /// `x_d ← post_scale·lr_β(pre_scale·x_d + pre_shift) + post_shift`.
    Wrap {
        pre_scale: f64,
        pre_shift: f64,
        beta: f64,
        post_scale: f64,
        post_shift: f64,
    },
    /// `x_d ← keep·x_d + a·relu(b·x + c)` with `b` over all d coordinates.
    /// Only the ReLU realization supports it.
    ReluUpdate { keep: f64, a: f64, b: Vec<f64>, c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFlow {
    pub d: usize,
    pub ops: Vec<FlowOp>,
}

impl CouplingFlow {
    pub fn new(d: usize) -> Self {
        CouplingFlow { d, ops: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("flow dimension must be positive"));
        }
        for (i, op) in self.ops.iter().enumerate() {
            let ok = match op {
                FlowOp::Affine(a) => a.validate().is_ok() && a.in_dim() == self.d && a.out_dim() == self.d,
                FlowOp::RidgeAdd(t) => t.validate().is_ok() && t.b.len() == self.d - 1,
                FlowOp::Wrap { beta, .. } => beta.is_finite() && *beta > 0.0,
                FlowOp::ReluUpdate { b, .. } => b.len() == self.d,
            };
            if !ok {
                return Err(Error::invalid(format!("flow op {i} is malformed")));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, op: FlowOp) {
        self.ops.push(op);
    }

    pub fn extend(&mut self, other: &CouplingFlow) {
        self.ops.extend(other.ops.iter().cloned());
    }

    /// `x_d ← scale·x_d + shift`.
    pub fn push_last_affine(&mut self, scale: f64, shift: f64) {
        let mut diag = vec![1.0; self.d];
        diag[self.d - 1] = scale;
        let mut bias = vec![0.0; self.d];
        bias[self.d - 1] = shift;
        self.push(FlowOp::Affine(AffineMap::diagonal(&diag, bias)));
    }

    /// `x_d += t(x_{1:d-1})`, one op per term plus a constant shift.
    pub fn push_translation(&mut self, t: &RidgeSum) {
        for term in &t.terms {
            if term.a != 0.0 {
                self.push(FlowOp::RidgeAdd(term.clone()));
            }
        }
        if t.constant != 0.0 {
            self.push_last_affine(1.0, t.constant);
        }
    }

    /// Applies the increasing scalar chain of a compiled width-1 network to `x_d`.
    pub(crate) fn push_scalar_network(&mut self, net: &Network) {
        let chain = crate::pwl1d::ScalarChain::from_network(net);
        if chain.steps.is_empty() {
            self.push_last_affine(chain.out.0, chain.out.1);
            return;
        }
        let n = chain.steps.len();
        for (k, (scale, shift, beta)) in chain.steps.iter().enumerate() {
            let (post_scale, post_shift) = if k + 1 == n { chain.out } else { (1.0, 0.0) };
            self.push(FlowOp::Wrap {
                pre_scale: *scale,
                pre_shift: *shift,
                beta: *beta,
                post_scale,
                post_shift,
            });
        }
    }

    /// Same map with each run of consecutive ridge adds merged into one sum.
    pub fn simplified(&self) -> CouplingFlow {
        let mut out = CouplingFlow::new(self.d);
        let mut run = RidgeSum::default();
        for op in &self.ops {
            match op {
                FlowOp::RidgeAdd(t) => run.terms.push(t.clone()),
                other => {
                    out.push_translation(&std::mem::take(&mut run).merged());
                    out.push(other.clone());
                }
            }
        }
        out.push_translation(&run.merged());
        out
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for op in &self.ops {
            apply_op(op, &mut v);
        }
        v
    }

    /// Last coordinate of [`eval`](Self::eval).
    pub fn eval_last(&self, x: &[f64]) -> f64 {
        *self.eval(x).last().expect("flow dimension is positive")
    }

    /// Number of nonlinear ops.
    pub fn nonlinear_ops(&self) -> usize {
        self.ops.iter().filter(|o| !matches!(o, FlowOp::Affine(_))).count()
    }

    /// Sound enclosure of the state before each op, followed by the output box.
    pub fn bounds(&self, domain: &Box) -> Vec<Box> {
        let mut out = Vec::with_capacity(self.ops.len() + 1);
        let mut cur = domain.clone();
        for op in &self.ops {
            out.push(cur.clone());
            cur = op_image(op, &cur, self.d);
        }
        out.push(cur);
        out
    }

    /// ∞-norm Lipschitz bound of the whole flow.
    pub fn lipschitz(&self) -> f64 {
        self.ops
            .iter()
            .map(|op| match op {
                FlowOp::Affine(a) => a.inf_norm().max(1.0),
                FlowOp::RidgeAdd(t) => 1.0 + t.grad_l1(),
                FlowOp::Wrap { pre_scale, beta, post_scale, .. } => {
                    (pre_scale * post_scale).abs() * beta.max(1.0)
                }
                FlowOp::ReluUpdate { keep, a, b, .. } => {
                    keep.abs() + a.abs() * b.iter().map(|v| v.abs()).sum::<f64>()
                }
            })
            .map(|l| l.max(1.0))
            .product()
    }

    /// Width-d Leaky-ReLU realization over `domain`.
    pub fn to_leaky_network(&self, domain: &Box) -> Result<Network> {
        self.check_domain(domain)?;
        let d = self.d;
        let last = d - 1;
        let bounds = self.bounds(domain);
        let mut layers: Vec<Layer> = Vec::new();
        // Maps the current hidden vector to the flow state.
        let mut pending = AffineMap::identity(d);
        for (op, b) in self.ops.iter().zip(&bounds) {
            match op {
                FlowOp::Affine(a) => pending = a.compose(&pending),
                FlowOp::RidgeAdd(t) => {
                    let Some(i) = pivot(&t.b) else {
                        let k = t.a * leaky_relu(t.beta, t.c);
                        pending = last_shift(d, k).compose(&pending);
                        continue;
                    };
                    if t.a == 0.0 {
                        continue;
                    }
                    if t.beta <= 0.0 {
                        return Err(Error::invalid("relu ridge terms need the relu realization"));
                    }
                    let (add_lo, _) = t.range(&b.prefix(last));
                    let mut shifts: Vec<f64> = (0..d).map(|j| POSITIVE_FLOOR - b.lo[j]).collect();
                    shifts[last] -= add_lo.min(0.0);
                    // Slot i carries b·x' + c, every other slot is shifted positive.
                    let mut w1 = shifted_identity(d, &shifts);
                    w1.weight[i] = padded(&t.b, d);
                    w1.bias[i] = t.c;
                    layers.push(Layer::new(w1.compose(&pending), ActivationTag::LeakyRelu(t.beta)));
                    let mut w2 = AffineMap::identity(d);
                    w2.weight[last][i] = t.a;
                    layers.push(Layer::new(w2, ActivationTag::LeakyRelu(1.0 / t.beta)));
                    // Undo the shifts and the pivot substitution.
                    let mut u = unshift(d, &shifts);
                    let mut row = vec![0.0; d];
                    let mut bias = -t.c;
                    for j in 0..last {
                        if j != i {
                            row[j] = -t.b[j] / t.b[i];
                            bias += t.b[j] * shifts[j];
                        }
                    }
                    row[i] = 1.0 / t.b[i];
                    u.weight[i] = row;
                    u.bias[i] = bias / t.b[i];
                    pending = u;
                }
                FlowOp::Wrap { pre_scale, pre_shift, beta, post_scale, post_shift } => {
                    if *beta == 1.0 {
                        let s = post_scale * pre_scale;
                        let c = post_scale * pre_shift + post_shift;
                        pending = last_affine(d, s, c).compose(&pending);
                        continue;
                    }
                    let shifts: Vec<f64> = (0..d).map(|j| POSITIVE_FLOOR - b.lo[j]).collect();
                    let mut w = shifted_identity(d, &shifts);
                    w.weight[last][last] = *pre_scale;
                    w.bias[last] = *pre_shift;
                    layers.push(Layer::new(w.compose(&pending), ActivationTag::LeakyRelu(*beta)));
                    let mut u = unshift(d, &shifts);
                    u.weight[last][last] = *post_scale;
                    u.bias[last] = *post_shift;
                    pending = u;
                }
                FlowOp::ReluUpdate { .. } => {
                    return Err(Error::invalid(
                        "relu updates have no width-d leaky-relu realization",
                    ))
                }
            }
        }
        Network::new(d, layers, pending)
    }

    /// Width-(d+1) ReLU realization over `domain`; the extra channel is scratch.
    pub fn to_relu_network(&self, domain: &Box) -> Result<Network> {
        self.check_domain(domain)?;
        let d = self.d;
        let last = d - 1;
        let bounds = self.bounds(domain);
        let mut layers: Vec<Layer> = Vec::new();
        let mut pending = AffineMap::identity(d);
        for (op, b) in self.ops.iter().zip(&bounds) {
            // Scratch pre-activation as an affine function of the state, and the
            // new last coordinate as (coefficients on state, coefficient on relu, bias).
            let (scratch_row, scratch_bias, new_last, relu_coef, new_bias) = match op {
                FlowOp::Affine(a) => {
                    pending = a.compose(&pending);
                    continue;
                }
                FlowOp::RidgeAdd(t) => {
                    if pivot(&t.b).is_none() {
                        let k = t.a * leaky_relu(t.beta, t.c);
                        pending = last_shift(d, k).compose(&pending);
                        continue;
                    }
                    // a·lr_β(z) = aβ·z + a(1−β)·relu(z)
                    let row = padded(&t.b, d);
                    let mut nl: Vec<f64> = row.iter().map(|v| t.a * t.beta * v).collect();
                    nl[last] += 1.0;
                    (row, t.c, nl, t.a * (1.0 - t.beta), t.a * t.beta * t.c)
                }
                FlowOp::Wrap { pre_scale, pre_shift, beta, post_scale, post_shift } => {
                    let mut row = vec![0.0; d];
                    row[last] = *pre_scale;
                    let mut nl = vec![0.0; d];
                    nl[last] = post_scale * beta * pre_scale;
                    (
                        row,
                        *pre_shift,
                        nl,
                        post_scale * (1.0 - beta),
                        post_scale * beta * pre_shift + post_shift,
                    )
                }
                FlowOp::ReluUpdate { keep, a, b: w, c } => {
                    let mut nl = vec![0.0; d];
                    nl[last] = *keep;
                    (w.clone(), *c, nl, *a, 0.0)
                }
            };
            let shifts: Vec<f64> = (0..d).map(|j| POSITIVE_FLOOR - b.lo[j]).collect();
            let mut w = shifted_identity(d, &shifts);
            w.weight.push(scratch_row);
            w.bias.push(scratch_bias);
            layers.push(Layer::new(w.compose(&pending), ActivationTag::Relu));
            // Read-out: hidden (d+1) -> state (d).
            let mut u = AffineMap {
                weight: vec![vec![0.0; d + 1]; d],
                bias: vec![0.0; d],
            };
            for j in 0..last {
                u.weight[j][j] = 1.0;
                u.bias[j] = -shifts[j];
            }
            // new_last · (h_{0..d} − shifts) + relu_coef · h_d + new_bias
            let mut bias = new_bias;
            for j in 0..d {
                u.weight[last][j] = new_last[j];
                bias -= new_last[j] * shifts[j];
            }
            u.weight[last][d] = relu_coef;
            u.bias[last] = bias;
            pending = u;
        }
        Network::new(d, layers, pending)
    }

    fn check_domain(&self, domain: &Box) -> Result<()> {
        self.validate()?;
        if domain.dim() != self.d {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.d,
                got: domain.dim(),
            });
        }
        if !domain.is_bounded() {
            return Err(Error::invalid("domain must be bounded"));
        }
        Ok(())
    }
}

pub(crate) fn apply_op(op: &FlowOp, v: &mut Vec<f64>) {
    let last = v.len() - 1;
    match op {
        FlowOp::Affine(a) => *v = a.apply(v),
        FlowOp::RidgeAdd(t) => v[last] += t.eval(&v[..last]),
        FlowOp::Wrap { pre_scale, pre_shift, beta, post_scale, post_shift } => {
            v[last] = post_scale * leaky_relu(*beta, pre_scale * v[last] + pre_shift) + post_shift
        }
        FlowOp::ReluUpdate { keep, a, b, c } => {
            let z = b.iter().zip(v.iter()).fold(*c, |acc, (w, x)| acc + w * x);
            v[last] = keep * v[last] + a * z.max(0.0);
        }
    }
}

fn op_image(op: &FlowOp, b: &Box, d: usize) -> Box {
    let last = d - 1;
    let mut out = b.clone();
    match op {
        FlowOp::Affine(a) => return a.image_box(b),
        FlowOp::RidgeAdd(t) => {
            let (l, h) = t.range(&b.prefix(last));
            out.lo[last] += l;
            out.hi[last] += h;
        }
        FlowOp::Wrap { pre_scale, pre_shift, beta, post_scale, post_shift } => {
            let (z1, z2) = (pre_scale * b.lo[last] + pre_shift, pre_scale * b.hi[last] + pre_shift);
            let (z1, z2) = (z1.min(z2), z1.max(z2));
            let (y1, y2) = (
                post_scale * leaky_relu(*beta, z1) + post_shift,
                post_scale * leaky_relu(*beta, z2) + post_shift,
            );
            out.lo[last] = y1.min(y2);
            out.hi[last] = y1.max(y2);
        }
        FlowOp::ReluUpdate { keep, a, b: w, c } => {
            let t = RidgeTerm { a: 1.0, b: w.clone(), c: *c, beta: 1.0 };
            let (zl, zh) = t.inner_range(b);
            let (r1, r2) = (zl.max(0.0) * a, zh.max(0.0) * a);
            let (k1, k2) = (keep * b.lo[last], keep * b.hi[last]);
            out.lo[last] = k1.min(k2) + r1.min(r2);
            out.hi[last] = k1.max(k2) + r1.max(r2);
        }
    }
    out
}

// Largest-magnitude prefix weight; `None` when the term is constant.
fn pivot(b: &[f64]) -> Option<usize> {
    b.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .max_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap())
        .map(|(i, _)| i)
}

fn padded(b: &[f64], d: usize) -> Vec<f64> {
    let mut row = b.to_vec();
    row.resize(d, 0.0);
    row
}

fn shifted_identity(d: usize, shifts: &[f64]) -> AffineMap {
    AffineMap::diagonal(&vec![1.0; d], shifts.to_vec())
}

fn unshift(d: usize, shifts: &[f64]) -> AffineMap {
    AffineMap::diagonal(&vec![1.0; d], shifts.iter().map(|s| -s).collect())
}

fn last_affine(d: usize, scale: f64, shift: f64) -> AffineMap {
    let mut diag = vec![1.0; d];
    diag[d - 1] = scale;
    let mut bias = vec![0.0; d];
    bias[d - 1] = shift;
    AffineMap::diagonal(&diag, bias)
}

fn last_shift(d: usize, k: f64) -> AffineMap {
    last_affine(d, 1.0, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_flow() -> CouplingFlow {
        let mut f = CouplingFlow::new(3);
        f.push(FlowOp::RidgeAdd(RidgeTerm { a: 1.5, b: vec![0.7, -2.0], c: 0.3, beta: 0.2 }));
        f.push(FlowOp::Wrap { pre_scale: 2.0, pre_shift: -0.5, beta: 0.3, post_scale: 0.5, post_shift: 1.0 });
        f.push(FlowOp::Affine(AffineMap::new(
            vec![vec![1.0, 0.2, 0.0], vec![0.0, 1.0, 0.1], vec![0.3, 0.0, 1.0]],
            vec![0.1, -0.2, 0.0],
        ).unwrap()));
        f.push(FlowOp::RidgeAdd(RidgeTerm { a: -0.8, b: vec![0.0, 1.0], c: -0.4, beta: 3.0 }));
        f
    }

    #[test]
    fn leaky_and_relu_realizations_match_semantics() {
        let f = sample_flow();
        let domain = Box::cube(3, -1.0, 1.0);
        let leaky = f.to_leaky_network(&domain).unwrap();
        let relu = f.to_relu_network(&domain).unwrap();
        assert_eq!(leaky.width(), 3);
        assert_eq!(relu.width(), 4);
        assert_eq!(leaky.depth(), 5);
        for x in domain.grid(7) {
            let want = f.eval(&x);
            for net in [&leaky, &relu] {
                let got = net.evaluate(&x).unwrap();
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12, "{g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn bounds_enclose_samples() {
        let f = sample_flow();
        let domain = Box::cube(3, -1.0, 1.0);
        let out = f.bounds(&domain).pop().unwrap();
        for x in domain.grid(9) {
            assert!(out.contains(&f.eval(&x), 1e-12));
        }
    }

    #[test]
    fn relu_update_only_in_relu_backend() {
        let mut f = CouplingFlow::new(2);
        f.push(FlowOp::ReluUpdate { keep: 0.0, a: 2.0, b: vec![1.0, 1.0], c: -0.5 });
        let domain = Box::unit(2);
        assert!(f.to_leaky_network(&domain).is_err());
        let net = f.to_relu_network(&domain).unwrap();
        let y = net.evaluate(&[0.4, 0.6]).unwrap();
        assert!((y[0] - 0.4).abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let f = sample_flow();
        let s = serde_json::to_string(&f).unwrap();
        let back: CouplingFlow = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
    }
}
