//! Lifts of single-coordinate maps into wider ReLU and general-σ networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{random_features, solve_features, CouplingFlow, FlowOp, RidgeSum};
use crate::error::{Error, Result};
use crate::netcore::{lookup_activation, ActivationTag, AffineMap, Box, CustomActivation, Layer, Network};

/// Smallest usable `σ'(α)`.
pub const MIN_DERIVATIVE: f64 = 1e-8;
/// Steepness range of random σ features (in box-width units).
const SIGMA_SCALES: (f64, f64) = (0.5, 40.0);

/// `constant + linear·x + Σ a_k σ(b_k·x + c_k)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SigmaRidge {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub linear: Vec<f64>,
    #[serde(default)]
    pub terms: Vec<SigmaTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaTerm {
    pub a: f64,
    pub b: Vec<f64>,
    pub c: f64,
}

impl SigmaTerm {
    fn inner(&self, x: &[f64]) -> f64 {
        self.b.iter().zip(x).fold(self.c, |acc, (b, v)| acc + b * v)
    }

    fn inner_range(&self, domain: &Box) -> (f64, f64) {
        self.b.iter().enumerate().fold((self.c, self.c), |(l, h), (i, b)| {
            let (p, q) = (b * domain.lo[i], b * domain.hi[i]);
            (l + p.min(q), h + p.max(q))
        })
    }
}

impl SigmaRidge {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.linear.is_empty() || self.linear.len() == d) || self.terms.iter().any(|t| t.b.len() != d) {
            return Err(Error::invalid(format!("sigma ridge coefficients must have length {d}")));
        }
        Ok(())
    }

    pub fn eval(&self, sigma: &CustomActivation, x: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(x).map(|(a, v)| a * v).sum();
        self.terms.iter().fold(self.constant + lin, |acc, t| acc + t.a * sigma.apply(t.inner(x)))
    }
}

fn sigma_range(name: &str, sigma: &CustomActivation, lo: f64, hi: f64) -> (f64, f64) {
    if let Some((a, b)) = ActivationTag::Custom(name.to_string()).image(lo, hi) {
        return (a.min(b), a.max(b));
    }
    let vals: Vec<f64> = crate::netcore::linspace(lo, hi, 129).into_iter().map(|z| sigma.apply(z)).collect();
    let (a, b) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let pad = 0.1 * (b - a) + 1e-12;
    (a - pad, b + pad)
}

/// Width-(d+1) ReLU network for `x ↦ (x', τ(x))` with `τ` a ridge sum on ℝ^d.
///
/// Terms that do not bend on `domain` become affine. At most one term may
/// bend while depending on `x_d`; the others accumulate into the last channel.
pub fn lift_relu(tau: &RidgeSum, domain: &Box) -> Result<Network> {
    let d = domain.dim();
    if d == 0 || !domain.is_bounded() {
        return Err(Error::invalid("lift needs a bounded box of positive dimension"));
    }
    tau.validate(d)?;
    let last = d - 1;
    let mut lin = vec![0.0; d];
    let mut constant = tau.constant;
    let mut bent_last = None;
    let mut rest = RidgeSum::default();
    for t in tau.terms.iter().filter(|t| t.a != 0.0) {
        let (zl, zh) = t.inner_range(domain);
        let slope = if zl >= 0.0 {
            1.0
        } else if zh <= 0.0 {
            t.beta
        } else if t.b[last] != 0.0 {
            if bent_last.is_some() {
                return Err(Error::invalid("at most one ridge term may bend in the last coordinate"));
            }
            bent_last = Some(t.clone());
            continue;
        } else {
            rest.terms.push(crate::coupling::RidgeTerm { b: t.b[..last].to_vec(), ..t.clone() });
            continue;
        };
        for (l, b) in lin.iter_mut().zip(&t.b) {
            *l += t.a * slope * b;
        }
        constant += t.a * slope * t.c;
    }
    let mut flow = CouplingFlow::new(d);
    let mut keep = lin[last];
    if let Some(t) = bent_last {
        // a·lr_β(z) = aβ·z + a(1−β)·relu(z)
        for (l, b) in lin.iter_mut().zip(&t.b) {
            *l += t.a * t.beta * b;
        }
        constant += t.a * t.beta * t.c;
        keep = lin[last];
        flow.push(FlowOp::ReluUpdate { keep, a: t.a * (1.0 - t.beta), b: t.b.clone(), c: t.c });
        keep = 1.0;
    }
    let mut row = AffineMap::identity(d);
    row.weight[last] = lin.clone();
    row.weight[last][last] = keep;
    row.bias[last] = constant;
    flow.push(FlowOp::Affine(row));
    flow.push_translation(&rest);
    lift_relu_flow(&flow, domain)
}

/// Width-(d+1) ReLU realization of a flow.
pub fn lift_relu_flow(flow: &CouplingFlow, domain: &Box) -> Result<Network> {
    let mut flow = flow.clone();
    if flow.nonlinear_ops() == 0 {
        flow.push(FlowOp::ReluUpdate { keep: 1.0, a: 0.0, b: vec![0.0; flow.d], c: 0.0 });
    }
    flow.to_relu_network(domain)
}

#[derive(Debug, Clone)]
pub struct GeneralLift {
    pub network: Network,
    /// Encoding scale of the carried channels.
    pub epsilon: f64,
    /// Grid-measured error against `(x', τ(x))`.
    pub measured_error: f64,
}

/// Width-(d+2) σ network for `x ↦ (x', τ(x))`.
///
/// Carried values ride through σ as `σ(εv + α)` and are read back as
/// `(σ(·) − σ(α))/(ε·σ'(α))`; one channel evaluates the next term and one
/// holds the running sum. `ε` is halved until the sampled error meets `tol`.
pub fn lift_general(sigma: &str, tau: &SigmaRidge, domain: &Box, tol: f64) -> Result<GeneralLift> {
    let d = domain.dim();
    if d == 0 || !domain.is_bounded() {
        return Err(Error::invalid("lift needs a bounded box of positive dimension"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    tau.validate(d)?;
    let act = lookup_activation(sigma)?;
    let alpha = act
        .alpha
        .ok_or_else(|| Error::invalid(format!("`{sigma}` has no registered point with non-zero slope")))?;
    let slope = act.derivative_at(alpha);
    if !(slope.abs() >= MIN_DERIVATIVE) {
        return Err(Error::invalid(format!("σ'({alpha}) = {slope:e} is below {MIN_DERIVATIVE:e}")));
    }
    let res = ((2000f64).powf(1.0 / domain.active_dims().len().max(1) as f64) as usize).max(2);
    let samples = domain.grid(res);
    let want: Vec<Vec<f64>> = samples
        .iter()
        .map(|x| {
            let mut y = x.clone();
            y[d - 1] = tau.eval(&act, x);
            y
        })
        .collect();
    let mut eps = 0.25;
    let mut best = f64::INFINITY;
    for _ in 0..48 {
        let network = build_general(sigma, &act, alpha, slope, tau, domain, eps)?;
        let err = samples.iter().zip(&want).try_fold(0.0f64, |m, (x, w)| {
            let y = network.evaluate(x)?;
            Ok::<f64, Error>(y.iter().zip(w).fold(m, |m, (a, b)| m.max((a - b).abs())))
        })?;
        if err <= tol {
            return Ok(GeneralLift { network, epsilon: eps, measured_error: err });
        }
        if err.is_finite() && err > 4.0 * best {
            // Rounding now dominates; smaller ε only hurts.
            break;
        }
        best = best.min(err);
        eps *= 0.5;
    }
    Err(Error::Budget { tol, best, context: format!("carrying channels through `{sigma}`") })
}

fn build_general(
    name: &str,
    act: &CustomActivation,
    alpha: f64,
    slope: f64,
    tau: &SigmaRidge,
    domain: &Box,
    eps: f64,
) -> Result<Network> {
    let d = domain.dim();
    let (comp, acc) = (d, d + 1);
    let s_alpha = act.apply(alpha);
    let terms = &tau.terms;
    let layers_n = terms.len().max(1);
    let centre = |lo: f64, hi: f64| (0.5 * (lo + hi), (0.5 * (hi - lo)).max(1e-300).max(1e-9 * lo.abs().max(hi.abs())).max(1e-12));
    let xs: Vec<(f64, f64)> = (0..d).map(|j| centre(domain.lo[j], domain.hi[j])).collect();

    // Range of the running sum held at each layer.
    let mut linear = tau.linear.clone();
    linear.resize(d, 0.0);
    let (mut lo, mut hi) = (tau.constant, tau.constant);
    for (j, l) in linear.iter().enumerate() {
        let (p, q) = (l * domain.lo[j], l * domain.hi[j]);
        lo += p.min(q);
        hi += p.max(q);
    }
    let mut acc_ranges = vec![centre(lo, hi)];
    for t in terms.iter().take(layers_n - 1) {
        let (zl, zh) = t.inner_range(domain);
        let (sl, sh) = sigma_range(name, act, zl, zh);
        let (p, q) = (t.a * sl, t.a * sh);
        lo += p.min(q);
        hi += p.max(q);
        acc_ranges.push(centre(lo, hi));
    }

    // Hidden (d+2) → carried values [x, σ(term), sum].
    let decode = |k: usize| {
        let mut diag = vec![1.0; d + 2];
        let mut bias = vec![0.0; d + 2];
        for j in 0..d {
            diag[j] = xs[j].1 / (eps * slope);
            bias[j] = xs[j].0 - xs[j].1 * s_alpha / (eps * slope);
        }
        let (m, h) = acc_ranges[k];
        diag[acc] = h / (eps * slope);
        bias[acc] = m - h * s_alpha / (eps * slope);
        AffineMap::diagonal(&diag, bias)
    };
    // Carried values (or raw x for k = 0) → pre-activations of layer k.
    let encode = |k: usize| {
        let in_dim = if k == 0 { d } else { d + 2 };
        let mut w = vec![vec![0.0; in_dim]; d + 2];
        let mut bias = vec![0.0; d + 2];
        for j in 0..d {
            w[j][j] = eps / xs[j].1;
            bias[j] = alpha - eps * xs[j].0 / xs[j].1;
        }
        if let Some(t) = terms.get(k) {
            w[comp][..d].copy_from_slice(&t.b);
            bias[comp] = t.c;
        }
        let (m, h) = acc_ranges[k];
        if k == 0 {
            for j in 0..d {
                w[acc][j] = eps * linear[j] / h;
            }
            bias[acc] = alpha + eps * (tau.constant - m) / h;
        } else {
            w[acc][acc] = eps / h;
            w[acc][comp] = eps * terms[k - 1].a / h;
            bias[acc] = alpha - eps * m / h;
        }
        AffineMap { weight: w, bias }
    };
    let tag = ActivationTag::Custom(name.to_string());
    let mut layers = Vec::with_capacity(layers_n);
    for k in 0..layers_n {
        let map = if k == 0 { encode(0) } else { encode(k).compose(&decode(k - 1)) };
        layers.push(Layer::new(map, tag.clone()));
    }
    let mut out = AffineMap { weight: vec![vec![0.0; d + 2]; d], bias: vec![0.0; d] };
    for j in 0..d - 1 {
        out.weight[j][j] = 1.0;
    }
    out.weight[d - 1][acc] = 1.0;
    if let Some(t) = terms.last() {
        out.weight[d - 1][comp] = t.a;
    }
    Network::new(d, layers, out.compose(&decode(layers_n - 1)))
}

/// Least-squares σ-ridge fit of scattered samples with growing term counts.
/// The fit is accepted once both the training and the held-out residual are
/// within `tol`.
pub fn fit_sigma_ridge(
    sigma: &str,
    train: (&[Vec<f64>], &[f64]),
    valid: (&[Vec<f64>], &[f64]),
    domain: &Box,
    max_terms: usize,
    tol: f64,
    seed: u64,
) -> Result<(SigmaRidge, f64)> {
    let act = lookup_activation(sigma)?;
    let d = domain.dim();
    let active = domain.active_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    let mut count = 16.min(max_terms.max(1));
    loop {
        let feats: Vec<(Vec<f64>, f64)> = random_features(domain, &active, count + active.len(), SIGMA_SCALES, &mut rng)
            .into_iter()
            .skip(active.len())
            .collect();
        let m = feats.len();
        let phi = |x: &[f64], j: usize| {
            if j < m {
                act.apply(feats[j].0.iter().zip(x).fold(feats[j].1, |a, (b, v)| a + b * v))
            } else {
                x[j - m]
            }
        };
        let coef = solve_features(train.0, train.1, phi, m + d)?;
        let ridge = SigmaRidge {
            constant: coef[m + d],
            linear: coef[m..m + d].to_vec(),
            terms: feats.iter().zip(&coef).map(|((b, c), a)| SigmaTerm { a: *a, b: b.clone(), c: *c }).collect(),
        };
        let err = [train, valid].iter().fold(0.0f64, |e, (pts, vals)| {
            pts.iter().zip(vals.iter()).fold(e, |e, (p, v)| e.max((ridge.eval(&act, p) - v).abs()))
        });
        if err <= tol {
            return Ok((ridge, err));
        }
        best = best.min(err);
        if count >= max_terms {
            break;
        }
        count = (count * 2).min(max_terms);
    }
    Err(Error::Budget { tol, best, context: format!("`{sigma}` ridge fit with {max_terms} terms, seed {seed}") })
}
