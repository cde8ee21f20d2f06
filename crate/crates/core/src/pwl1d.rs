//! Increasing piecewise-linear scalar functions: exact compilation into
//! width-1 Leaky-ReLU chains, adaptive interpolation of monotone oracles,
//! and rewriting of increasing-activation networks into Leaky-ReLU ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{ActivationTag, AffineMap, Box, Layer, Network};

/// Knot budget shared by the adaptive interpolators.
pub const DEFAULT_MAX_KNOTS: usize = 20_000;

/// Continuous piecewise-linear function on ℝ.
///
/// `slopes[k]` is the slope left of `breakpoints[k]` (and `slopes[n]` the
/// slope right of the last breakpoint); `anchor` fixes the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlFunction {
    pub breakpoints: Vec<f64>,
    pub slopes: Vec<f64>,
    pub anchor: (f64, f64),
}

impl PwlFunction {
    pub fn new(breakpoints: Vec<f64>, slopes: Vec<f64>, anchor: (f64, f64)) -> Result<Self> {
        let f = PwlFunction {
            breakpoints,
            slopes,
            anchor,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slopes.len() != self.breakpoints.len() + 1 {
            return Err(Error::invalid(format!(
                "{} breakpoints need {} slopes, got {}",
                self.breakpoints.len(),
                self.breakpoints.len() + 1,
                self.slopes.len()
            )));
        }
        if self
            .breakpoints
            .iter()
            .chain(&self.slopes)
            .chain([&self.anchor.0, &self.anchor.1])
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("non-finite PWL parameter"));
        }
        if self.breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        Ok(())
    }

    /// Piecewise-linear interpolant through `(xs[i], ys[i])`, extended
    /// linearly beyond the end knots.
    pub fn from_knots(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(Error::invalid("knot arrays must be non-empty and equal length"));
        }
        if xs.len() == 1 {
            return PwlFunction::new(vec![], vec![1.0], (xs[0], ys[0]));
        }
        let slopes: Vec<f64> = xs
            .windows(2)
            .zip(ys.windows(2))
            .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
            .collect();
        let mut bps = xs[1..xs.len() - 1].to_vec();
        let mut sl = slopes;
        if bps.is_empty() {
            return PwlFunction::new(vec![], sl, (xs[0], ys[0]));
        }
        // `sl` has one slope per segment, which is already n_breakpoints + 1.
        let f = PwlFunction::new(std::mem::take(&mut bps), std::mem::take(&mut sl), (xs[0], ys[0]))?;
        Ok(f.simplified())
    }

    pub fn is_increasing(&self) -> bool {
        self.slopes.iter().all(|s| *s > 0.0)
    }

    /// Values at each breakpoint.
    pub fn knot_values(&self) -> Vec<f64> {
        let n = self.breakpoints.len();
        if n == 0 {
            return vec![];
        }
        let (x0, f0) = self.anchor;
        let bp = &self.breakpoints;
        // Anchor lies on segment k, i.e. between breakpoints k-1 and k.
        let k = bp.partition_point(|b| *b < x0);
        let mut v = vec![0.0; n];
        let pivot = if k < n {
            v[k] = f0 + self.slopes[k] * (bp[k] - x0);
            k
        } else {
            v[n - 1] = f0 - self.slopes[n] * (x0 - bp[n - 1]);
            n - 1
        };
        for j in pivot + 1..n {
            v[j] = v[j - 1] + self.slopes[j] * (bp[j] - bp[j - 1]);
        }
        for j in (0..pivot).rev() {
            v[j] = v[j + 1] - self.slopes[j + 1] * (bp[j + 1] - bp[j]);
        }
        v
    }

    /// Removes breakpoints whose adjacent slopes coincide.
    pub fn simplified(&self) -> PwlFunction {
        let values = self.knot_values();
        let mut bps = Vec::new();
        let mut slopes = vec![self.slopes[0]];
        let mut anchor = self.anchor;
        for (k, b) in self.breakpoints.iter().enumerate() {
            let (l, r) = (*slopes.last().unwrap(), self.slopes[k + 1]);
            if (l - r).abs() <= 1e-12 * l.abs().max(r.abs()) {
                continue;
            }
            bps.push(*b);
            slopes.push(r);
            anchor = (*b, values[k]);
        }
        PwlFunction {
            breakpoints: bps,
            slopes,
            anchor,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        eval_pwl_with(self, &self.knot_values(), x)
    }
}

fn eval_pwl_with(f: &PwlFunction, values: &[f64], x: f64) -> f64 {
    if f.breakpoints.is_empty() {
        return f.anchor.1 + f.slopes[0] * (x - f.anchor.0);
    }
    let k = f.breakpoints.partition_point(|b| *b < x);
    if k == 0 {
        values[0] + f.slopes[0] * (x - f.breakpoints[0])
    } else {
        values[k - 1] + f.slopes[k] * (x - f.breakpoints[k - 1])
    }
}

/// Evaluates `f` at `x`.
pub fn eval_pwl(f: &PwlFunction, x: f64) -> f64 {
    f.eval(x)
}

/// Width-1 Leaky-ReLU network computing `f` exactly, one layer per breakpoint.
///
/// Layer `k` wraps the running function `f_{k-1}` (which agrees with `f` up
/// to breakpoint `α_k` and continues with slope `γ₁`) as
/// `(γ₂/γ₁)·lr_{γ₁/γ₂}(f_{k-1} − f(α_k)) + f(α_k)`.
pub fn compile_increasing_pwl(f: &PwlFunction) -> Result<Network> {
    f.validate()?;
    if !f.is_increasing() {
        return Err(Error::invalid("compile_increasing_pwl needs strictly positive slopes"));
    }
    let f = f.simplified();
    let values = f.knot_values();
    if f.breakpoints.is_empty() {
        let (x0, y0) = f.anchor;
        let map = AffineMap::new(vec![vec![f.slopes[0]]], vec![y0 - f.slopes[0] * x0])?;
        return Ok(Network::affine(map));
    }
    // Running affine read-out of the hidden scalar: f_k(x) = scale·h + offset.
    let mut scale = f.slopes[0];
    let mut offset = values[0] - f.slopes[0] * f.breakpoints[0];
    let mut layers = Vec::with_capacity(f.breakpoints.len());
    for k in 0..f.breakpoints.len() {
        let (g1, g2) = (f.slopes[k], f.slopes[k + 1]);
        layers.push(Layer::new(
            AffineMap::new(vec![vec![scale]], vec![offset - values[k]])?,
            ActivationTag::LeakyRelu(g1 / g2),
        ));
        scale = g2 / g1;
        offset = values[k];
    }
    Network::new(1, layers, AffineMap::new(vec![vec![scale]], vec![offset])?)
}

/// Options for [`adaptive_interpolate`].
#[derive(Debug, Clone)]
pub struct InterpOptions {
    pub max_knots: usize,
    pub require_increasing: bool,
    pub initial_knots: Vec<f64>,
}

impl Default for InterpOptions {
    fn default() -> Self {
        InterpOptions {
            max_knots: DEFAULT_MAX_KNOTS,
            require_increasing: false,
            initial_knots: Vec::new(),
        }
    }
}

/// Knots and values of a piecewise-linear interpolant plus its measured error.
#[derive(Debug, Clone)]
pub struct Interpolant {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest deviation seen on the validation points.
    pub max_error: f64,
}

#[derive(Debug, Clone)]
struct Segment {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    err: f64,
    arg: f64,
}

// Interior check points per segment: spacing is 1/8 of the segment.
const CHECKS: usize = 8;

fn measure(g: &dyn Fn(f64) -> f64, x0: f64, x1: f64, y0: f64, y1: f64) -> (f64, f64) {
    let (mut err, mut arg) = (0.0, 0.5 * (x0 + x1));
    for j in 1..CHECKS {
        let t = j as f64 / CHECKS as f64;
        let x = x0 + (x1 - x0) * t;
        let e = (g(x) - (y0 + (y1 - y0) * t)).abs();
        if e > err {
            err = e;
            arg = x;
        }
    }
    (err, arg)
}

/// Adaptive piecewise-linear interpolation of `g` on `[a, b]` to sup error `tol`.
///
/// Knots are inserted into the worst segment, either at its worst check
/// point or at the intersection of the neighbouring segments' lines
/// (whichever leaves the smaller error); the result is then validated on a
/// uniform grid at least four times finer than the knot count.
pub fn adaptive_interpolate(
    g: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    opts: &InterpOptions,
) -> Result<Interpolant> {
    if !(a.is_finite() && b.is_finite()) || a > b {
        return Err(Error::invalid(format!("bad interval [{a}, {b}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if a == b {
        return Ok(Interpolant {
            knots: vec![a],
            values: vec![g(a)],
            max_error: 0.0,
        });
    }
    let mut xs: Vec<f64> = vec![a, b];
    xs.extend(opts.initial_knots.iter().filter(|k| **k > a && **k < b));
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xs.dedup();
    let ys: Vec<f64> = xs.iter().map(|x| g(*x)).collect();
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::invalid("oracle returned a non-finite value"));
    }
    let mut segs: Vec<Segment> = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| {
            let (err, arg) = measure(g, x[0], x[1], y[0], y[1]);
            Segment {
                x0: x[0],
                x1: x[1],
                y0: y[0],
                y1: y[1],
                err,
                arg,
            }
        })
        .collect();
    if opts.require_increasing {
        if let Some(s) = segs.iter().find(|s| s.y1 <= s.y0) {
            return Err(Error::NonMonotone { at: s.x0 });
        }
    }
    let target = 0.5 * tol;
    loop {
        // Refine until every segment passes its local checks.
        loop {
            let (idx, worst) = segs
                .iter()
                .enumerate()
                .fold((0, -1.0), |acc, (i, s)| if s.err > acc.1 { (i, s.err) } else { acc });
            if worst <= target {
                break;
            }
            if segs.len() + 1 >= opts.max_knots {
                return Err(Error::Budget {
                    tol,
                    best: worst,
                    context: format!("knot budget {} exhausted", opts.max_knots),
                });
            }
            let s = segs[idx].clone();
            let candidate = split_point(&segs, idx);
            let mut best: Option<(f64, Segment, Segment)> = None;
            for x in [Some(s.arg), candidate].into_iter().flatten() {
                if !(x > s.x0 && x < s.x1) {
                    continue;
                }
                let y = g(x);
                if !y.is_finite() {
                    return Err(Error::invalid("oracle returned a non-finite value"));
                }
                if opts.require_increasing && !(s.y0 < y && y < s.y1) {
                    return Err(Error::NonMonotone { at: x });
                }
                let (e0, a0) = measure(g, s.x0, x, s.y0, y);
                let (e1, a1) = measure(g, x, s.x1, y, s.y1);
                let l = Segment { x0: s.x0, x1: x, y0: s.y0, y1: y, err: e0, arg: a0 };
                let r = Segment { x0: x, x1: s.x1, y0: y, y1: s.y1, err: e1, arg: a1 };
                if best.as_ref().map_or(true, |b| e0.max(e1) < b.0) {
                    best = Some((e0.max(e1), l, r));
                }
            }
            let Some((_, l, r)) = best else {
                // Segment too short to split in floating point.
                segs[idx].err = 0.0;
                continue;
            };
            segs[idx] = l;
            segs.insert(idx + 1, r);
        }
        // Global validation on a uniform grid.
        let n_val = (4 * (segs.len() + 1)).max(1024);
        let mut worst = (0.0, a, 0usize);
        let mut seg = 0;
        for k in 0..=n_val {
            let x = a + (b - a) * k as f64 / n_val as f64;
            while seg + 1 < segs.len() && x > segs[seg].x1 {
                seg += 1;
            }
            let s = &segs[seg];
            let t = (x - s.x0) / (s.x1 - s.x0);
            let e = (g(x) - (s.y0 + (s.y1 - s.y0) * t)).abs();
            if e > worst.0 {
                worst = (e, x, seg);
            }
        }
        if worst.0 <= tol {
            let mut knots: Vec<f64> = segs.iter().map(|s| s.x0).collect();
            let mut values: Vec<f64> = segs.iter().map(|s| s.y0).collect();
            let last = segs.last().unwrap();
            knots.push(last.x1);
            values.push(last.y1);
            let max_error = segs.iter().map(|s| s.err).fold(worst.0, f64::max);
            return Ok(Interpolant {
                knots,
                values,
                max_error,
            });
        }
        // A validation point exposed a miss: force that segment to split there.
        let s = &mut segs[worst.2];
        s.err = worst.0.max(target * 2.0);
        s.arg = worst.1;
    }
}

// Intersection of the lines through the neighbouring segments, if any.
fn split_point(segs: &[Segment], idx: usize) -> Option<f64> {
    if idx == 0 || idx + 1 >= segs.len() {
        return None;
    }
    let (l, r) = (&segs[idx - 1], &segs[idx + 1]);
    let sl = (l.y1 - l.y0) / (l.x1 - l.x0);
    let sr = (r.y1 - r.y0) / (r.x1 - r.x0);
    if (sl - sr).abs() < 1e-14 * (sl.abs() + sr.abs() + 1e-300) {
        return None;
    }
    // y = l.y1 + sl (x - l.x1) = r.y0 + sr (x - r.x0)
    let x = (r.y0 - l.y1 + sl * l.x1 - sr * r.x0) / (sl - sr);
    x.is_finite().then_some(x)
}

/// Increasing PWL approximant of a monotone oracle on `[a, b]` with sup error ≤ `tol`.
pub fn pwl_approximate(g: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<PwlFunction> {
    let opts = InterpOptions {
        require_increasing: true,
        ..InterpOptions::default()
    };
    let it = adaptive_interpolate(g, a, b, tol, &opts)?;
    PwlFunction::from_knots(&it.knots, &it.values)
}

/// Scalar Leaky-ReLU chain extracted from a compiled width-1 network:
/// `h ↦ scale_k·h + shift_k`, then `lr_{β_k}`, and a final read-out.
#[derive(Debug, Clone)]
pub(crate) struct ScalarChain {
    pub steps: Vec<(f64, f64, f64)>,
    pub out: (f64, f64),
}

impl ScalarChain {
    pub fn from_network(net: &Network) -> ScalarChain {
        let steps = net
            .layers
            .iter()
            .map(|l| {
                let beta = match l.activation {
                    ActivationTag::LeakyRelu(b) => b,
                    _ => 1.0,
                };
                (l.affine.weight[0][0], l.affine.bias[0], beta)
            })
            .collect();
        ScalarChain {
            steps,
            out: (net.final_affine.weight[0][0], net.final_affine.bias[0]),
        }
    }
}

/// Rewrites a network whose activations are one strictly increasing custom
/// σ (plus Identity / Leaky-ReLU layers) into a Leaky-ReLU network of the
/// same width, with sup error on `domain` within `tol`.
pub fn generalize_activation(net: &Network, domain: &Box, tol: f64) -> Result<Network> {
    net.validate()?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mut sigma: Option<String> = None;
    for l in &net.layers {
        match &l.activation {
            ActivationTag::Custom(name) => {
                let act = crate::netcore::lookup_activation(name)?;
                if !act.strictly_increasing {
                    return Err(Error::NonMonotoneActivation(name.clone()));
                }
                match &sigma {
                    Some(s) if s != name => {
                        return Err(Error::invalid("network mixes different custom activations"))
                    }
                    _ => sigma = Some(name.clone()),
                }
            }
            ActivationTag::Relu => return Err(Error::invalid("relu layers cannot be rewritten")),
            _ => {}
        }
    }
    let Some(sigma) = sigma else {
        return Ok(net.clone());
    };
    let act = crate::netcore::lookup_activation(&sigma)?;
    let trace = net.propagate_intervals(domain)?;

    // Input range of each custom layer (union over coordinates, padded).
    let ranges: Vec<Option<(f64, f64)>> = net
        .layers
        .iter()
        .zip(&trace.layers)
        .map(|(l, b)| {
            matches!(l.activation, ActivationTag::Custom(_)).then(|| {
                let lo = b.pre.lo.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = b.pre.hi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let pad = 0.05 * (hi - lo) + 1e-6;
                (lo - pad, hi + pad)
            })
        })
        .collect();
    if ranges
        .iter()
        .flatten()
        .any(|(l, h)| !(l.is_finite() && h.is_finite()))
    {
        return Err(Error::Budget {
            tol,
            best: f64::INFINITY,
            context: "interval propagation blew up".into(),
        });
    }

    // Lipschitz constant of each activation on its range, then downstream products.
    let lip_act: Vec<f64> = net
        .layers
        .iter()
        .zip(&ranges)
        .map(|(l, r)| match (&l.activation, r) {
            (ActivationTag::Custom(_), Some((lo, hi))) => (0..=256)
                .map(|k| act.derivative_at(lo + (hi - lo) * k as f64 / 256.0).abs())
                .fold(0.0, f64::max),
            (ActivationTag::LeakyRelu(b), _) => b.max(1.0),
            _ => 1.0,
        })
        .collect();
    let n = net.layers.len();
    let mut downstream = vec![0.0; n];
    let mut acc = net.final_affine.inf_norm();
    for k in (0..n).rev() {
        downstream[k] = acc;
        acc *= net.layers[k].affine.inf_norm() * lip_act[k];
    }
    let n_custom = ranges.iter().flatten().count() as f64;

    let mut layers: Vec<Layer> = Vec::new();
    let mut pending: Option<AffineMap> = None;
    for (k, layer) in net.layers.iter().enumerate() {
        let eff = match &pending {
            Some(p) => layer.affine.compose(p),
            None => layer.affine.clone(),
        };
        pending = None;
        let Some((lo, hi)) = ranges[k] else {
            layers.push(Layer::new(eff, layer.activation.clone()));
            continue;
        };
        let eps = 0.5 * tol / (n_custom * downstream[k].max(1e-300));
        let g = |x: f64| act.apply(x);
        let pwl = pwl_approximate(&g, lo, hi, eps)?;
        let chain = ScalarChain::from_network(&compile_increasing_pwl(&pwl)?);
        let width = eff.out_dim();
        let mut cur = eff;
        for (scale, shift, beta) in &chain.steps {
            let w = cur
                .weight
                .iter()
                .map(|r| r.iter().map(|v| v * scale).collect())
                .collect();
            let b = cur.bias.iter().map(|v| v * scale + shift).collect();
            layers.push(Layer::new(AffineMap { weight: w, bias: b }, ActivationTag::LeakyRelu(*beta)));
            cur = AffineMap::identity(width);
        }
        let (s, c) = chain.out;
        let readout = AffineMap::diagonal(&vec![s; width], vec![c; width]);
        pending = Some(readout.compose(&cur));
    }
    let final_affine = match &pending {
        Some(p) => net.final_affine.compose(p),
        None => net.final_affine.clone(),
    };
    Network::new(net.input_dim, layers, final_affine)
}
