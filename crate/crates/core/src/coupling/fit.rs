//! Least-squares fitting of ridge sums.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ridge::{RidgeSum, RidgeTerm};
use crate::error::{Error, Result};
use crate::netcore::{leaky_relu, Box};
use crate::pwl1d::{adaptive_interpolate, InterpOptions};

/// Training lattices hold roughly this many points.
const TRAIN_POINTS: f64 = 4000.0;
/// Steepness range of random hinge features (in box-width units).
const HINGE_SCALES: (f64, f64) = (1.0, 4.0);

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub seed: u64,
    /// Shared β of every fitted term; `0` gives ReLU terms.
    pub beta: f64,
    /// Extra knots for the one-dimensional path.
    pub initial_knots: Vec<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            seed: 0,
            beta: 0.01,
            initial_knots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub sum: RidgeSum,
    /// Grid-measured error on the validation lattice.
    pub validation_error: f64,
    pub seed: u64,
}

/// Fits `oracle` on `domain` by a ridge sum with at most `max_terms` terms.
///
/// Functions of a single active coordinate are interpolated adaptively and
/// converted exactly to hinge terms; otherwise random hinge directions are
/// fitted by least squares with a growing term count.
pub fn fit_ridge(
    oracle: &dyn Fn(&[f64]) -> f64,
    domain: &Box,
    max_terms: usize,
    tol: f64,
    opts: &FitOptions,
) -> Result<RidgeFit> {
    check_args(domain, tol, opts)?;
    let domain = &collapse_unused(oracle, domain);
    let active = domain.active_dims();
    let constant_at = |x: &[f64]| RidgeFit {
        sum: RidgeSum::constant(oracle(x)),
        validation_error: 0.0,
        seed: opts.seed,
    };
    if active.is_empty() {
        return Ok(constant_at(&domain.lo));
    }
    let probe = domain.grid(grid_res(active.len()).min(33));
    let v0 = oracle(&probe[0]);
    if probe.iter().all(|p| oracle(p) == v0) {
        return Ok(constant_at(&domain.lo));
    }

    let mut best_err = f64::INFINITY;
    if active.len() == 1 {
        match fit_one_dim(oracle, domain, active[0], max_terms, tol, opts) {
            Ok(fit) if fit.validation_error <= tol => return Ok(fit),
            Ok(fit) => best_err = fit.validation_error,
            Err(Error::Budget { best, .. }) => best_err = best,
            Err(e) => return Err(e),
        }
    }

    let train = domain.grid(grid_res(active.len()));
    let values: Vec<f64> = train.iter().map(|p| oracle(p)).collect();
    let valid = domain.shifted_grid(grid_res(active.len()));
    let valid_values: Vec<f64> = valid.iter().map(|p| oracle(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut count = 8.min(max_terms.max(1));
    let mut best: Option<RidgeFit> = None;
    loop {
        let features = random_features(domain, &active, count, HINGE_SCALES, &mut rng);
        let sum = least_squares(&train, &values, &features, opts.beta)?;
        let err = max_error(&sum, &valid, &valid_values).max(max_error(&sum, &train, &values));
        if err < best_err || best.is_none() {
            best_err = best_err.min(err);
            best = Some(RidgeFit { sum, validation_error: err, seed: opts.seed });
        }
        if err <= tol {
            return Ok(best.expect("set above"));
        }
        if count >= max_terms {
            break;
        }
        count = (count * 2).min(max_terms);
    }
    Err(Error::Budget {
        tol,
        best: best_err,
        context: format!("ridge fit with {max_terms} terms, seed {}", opts.seed),
    })
}

/// Fits scattered samples. With one active coordinate the result interpolates
/// the samples exactly (piecewise linearly); otherwise it is the least-squares
/// fit with `max_terms` random hinges. The reported error is the sample residual.
pub fn fit_on_samples(
    points: &[Vec<f64>],
    values: &[f64],
    domain: &Box,
    max_terms: usize,
    opts: &FitOptions,
) -> Result<RidgeFit> {
    check_args(domain, 1.0, opts)?;
    if points.len() != values.len() || points.is_empty() {
        return Err(Error::invalid("sample arrays must be non-empty and equal length"));
    }
    let active = domain.active_dims();
    let v0 = values[0];
    let sum = if active.is_empty() || values.iter().all(|v| *v == v0) {
        RidgeSum::constant(values.iter().sum::<f64>() / values.len() as f64)
    } else if active.len() == 1 {
        let k = active[0];
        let mut pairs: Vec<(f64, f64)> = points.iter().map(|p| p[k]).zip(values.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.dedup_by(|a, b| a.0 == b.0);
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        hinge_sum(&xs, &ys, domain, k, opts.beta)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let count = max_terms.min(points.len()).max(1);
        let features = random_features(domain, &active, count, HINGE_SCALES, &mut rng);
        least_squares(points, values, &features, opts.beta)?
    };
    let err = max_error(&sum, points, values);
    Ok(RidgeFit { sum, validation_error: err, seed: opts.seed })
}

fn check_args(domain: &Box, tol: f64, opts: &FitOptions) -> Result<()> {
    if !domain.is_bounded() {
        return Err(Error::invalid("fit domain must be bounded"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if !(opts.beta >= 0.0 && opts.beta < 1.0) {
        return Err(Error::invalid("fit beta must lie in [0, 1)"));
    }
    Ok(())
}

/// Collapses coordinates the oracle ignores on a probe lattice to their lower end.
fn collapse_unused(oracle: &dyn Fn(&[f64]) -> f64, domain: &Box) -> Box {
    let mut out = domain.clone();
    let probe = domain.grid(3);
    for i in domain.active_dims() {
        let ignored = probe.iter().take(243).all(|p| {
            let mut q = p.clone();
            let base = oracle(&q);
            [domain.lo[i], domain.hi[i], 0.5 * (domain.lo[i] + domain.hi[i])].iter().all(|v| {
                q[i] = *v;
                oracle(&q) == base
            })
        });
        if ignored {
            out.hi[i] = out.lo[i];
        }
    }
    out
}

fn grid_res(active: usize) -> usize {
    (TRAIN_POINTS.powf(1.0 / active as f64).floor() as usize).max(3)
}

fn fit_one_dim(
    oracle: &dyn Fn(&[f64]) -> f64,
    domain: &Box,
    k: usize,
    max_terms: usize,
    tol: f64,
    opts: &FitOptions,
) -> Result<RidgeFit> {
    let at = |t: f64| {
        let mut x = domain.lo.clone();
        x[k] = t;
        oracle(&x)
    };
    let iopts = InterpOptions {
        require_increasing: false,
        initial_knots: opts.initial_knots.clone(),
        ..InterpOptions::default()
    };
    let it = adaptive_interpolate(&at, domain.lo[k], domain.hi[k], tol, &iopts)?;
    let sum = hinge_sum(&it.knots, &it.values, domain, k, opts.beta)?;
    if sum.terms.len() > max_terms {
        return Err(Error::Budget {
            tol,
            best: f64::INFINITY,
            context: format!("interpolant needs {} terms, budget {max_terms}", sum.terms.len()),
        });
    }
    let check = crate::netcore::linspace(domain.lo[k], domain.hi[k], 2049);
    let conv = check.iter().fold(0.0f64, |m, t| {
        let mut x = domain.lo.clone();
        x[k] = *t;
        m.max((sum.eval(&x) - at(*t)).abs())
    });
    Ok(RidgeFit {
        sum,
        validation_error: it.max_error.max(conv),
        seed: opts.seed,
    })
}

/// Ridge sum equal to the piecewise-linear interpolant of `(xs, ys)` in
/// coordinate `k` on `domain`.
fn hinge_sum(xs: &[f64], ys: &[f64], domain: &Box, k: usize, beta: f64) -> Result<RidgeSum> {
    let dim = domain.dim();
    let unit = |c: f64, a: f64| {
        let mut b = vec![0.0; dim];
        b[k] = 1.0;
        RidgeTerm { a, b, c, beta }
    };
    if xs.len() == 1 {
        return Ok(RidgeSum::constant(ys[0]));
    }
    let slopes: Vec<f64> = xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0])).collect();
    // Linear part A·x + C; each hinge adds Δ·relu(x − p).
    let mut lin_a = slopes[0];
    let mut lin_c = ys[0] - slopes[0] * xs[0];
    let mut terms = Vec::new();
    for (j, p) in xs.iter().enumerate().take(xs.len() - 1).skip(1) {
        let delta = slopes[j] - slopes[j - 1];
        // Knots inserted on a straight piece carry only rounding noise.
        if delta.abs() <= 1e-9 * (slopes[j].abs() + slopes[j - 1].abs()) {
            continue;
        }
        // relu(z) = (lr_β(z) − βz) / (1 − β)
        let w = delta / (1.0 - beta);
        terms.push(unit(-p, w));
        lin_a -= w * beta;
        lin_c += w * beta * p;
    }
    // The linear part rides on an argument that stays ≥ 1 on the domain.
    let shift = 1.0 - domain.lo[k];
    if lin_a != 0.0 {
        terms.push(unit(shift, lin_a));
        lin_c -= lin_a * shift;
    }
    Ok(RidgeSum { constant: lin_c, terms })
}

/// Random hinge directions scaled to the box, hinge points uniform inside it.
/// The first features (up to the number of active coordinates) are linear.
pub(crate) fn random_features(
    domain: &Box,
    active: &[usize],
    count: usize,
    scales: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<f64>, f64)> {
    let dim = domain.dim();
    let mut out = Vec::with_capacity(count);
    for &i in active.iter().take(count) {
        let mut b = vec![0.0; dim];
        b[i] = 1.0 / domain.width(i);
        out.push((b, 1.0 - domain.lo[i] / domain.width(i)));
    }
    while out.len() < count {
        let mut b = vec![0.0; dim];
        let mut norm = 0.0;
        for &i in active {
            let g: f64 = rng.gen_range(-1.0..1.0);
            b[i] = g;
            norm += g * g;
        }
        let norm = norm.sqrt().max(1e-12);
        // Log-uniform steepness.
        let scale: f64 = rng.gen_range(scales.0.ln()..scales.1.ln()).exp();
        let mut c = 0.0;
        for &i in active {
            b[i] *= scale / (norm * domain.width(i));
            let p = domain.lo[i] + rng.gen::<f64>() * domain.width(i);
            c -= b[i] * p;
        }
        out.push((b, c));
    }
    out
}

fn least_squares(points: &[Vec<f64>], values: &[f64], features: &[(Vec<f64>, f64)], beta: f64) -> Result<RidgeSum> {
    let terms: Vec<RidgeTerm> = features
        .iter()
        .map(|(b, c)| RidgeTerm { a: 1.0, b: b.clone(), c: *c, beta })
        .collect();
    let coef = solve_features(points, values, |x, j| leaky_relu(beta, terms[j].inner(x)), terms.len())?;
    let mut sum = RidgeSum { constant: coef[terms.len()], terms };
    for (t, a) in sum.terms.iter_mut().zip(&coef) {
        t.a = *a;
    }
    sum.terms.retain(|t| t.a != 0.0);
    Ok(sum)
}

/// Regularised least squares for `Σ a_j φ_j(x) + a_m`; returns `m + 1`
/// coefficients, the last one being the constant.
pub(crate) fn solve_features(
    points: &[Vec<f64>],
    values: &[f64],
    phi: impl Fn(&[f64], usize) -> f64,
    m: usize,
) -> Result<Vec<f64>> {
    let n = points.len();
    let a = DMatrix::from_fn(n, m + 1, |r, j| if j == m { 1.0 } else { phi(&points[r], j) });
    let y = DVector::from_column_slice(values);
    let mut ata = a.transpose() * &a;
    let aty = a.transpose() * y;
    let lambda = 1e-12 * (ata.trace() / (m + 1) as f64).max(1e-300);
    for j in 0..=m {
        ata[(j, j)] += lambda;
    }
    let sol = match ata.clone().cholesky() {
        Some(ch) => ch.solve(&aty),
        None => ata
            .lu()
            .solve(&aty)
            .ok_or_else(|| Error::invalid("singular least-squares system"))?,
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("least-squares solution is not finite"));
    }
    Ok(sol.iter().copied().collect())
}

fn max_error(sum: &RidgeSum, points: &[Vec<f64>], values: &[f64]) -> f64 {
    points
        .iter()
        .zip(values)
        .fold(0.0f64, |m, (p, v)| m.max((sum.eval(p) - v).abs()))
}
