//! Grid sup-norm measurement and sampled property checks.
//!
//! All errors here are measured on finite lattices or samples; they are lower
//! bounds on the true sup-norm and are labelled as such.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Box, Network};

/// Caps the worker threads used for grid evaluation.
pub const THREADS_ENV: &str = "NARROWFORGE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub sup_error: f64,
    pub argmax: Vec<f64>,
    pub grid_res: usize,
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
    #[serde(default)]
    pub per_stage_errors: Vec<f64>,
    pub wall_time_s: f64,
    pub measure: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub within_tol: Option<bool>,
}

impl VerifyReport {
    /// Records `tol` and whether the measured error meets it.
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = Some(tol);
        self.within_tol = Some(self.sup_error <= tol);
        self
    }
}

fn with_pool<T: Send>(job: impl FnOnce() -> T + Send) -> T {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0);
    match cap.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(job),
        None => job(),
    }
}

/// Largest ∞-norm deviation between `net` and `oracle` on the uniform
/// `grid_res`-per-side lattice of `domain`. Ties keep the first lattice point.
pub fn sup_error(
    net: &Network,
    oracle: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    domain: &Box,
    grid_res: usize,
) -> Result<VerifyReport> {
    let start = Instant::now();
    if grid_res < 2 {
        return Err(Error::invalid("grid resolution must be at least 2"));
    }
    if domain.dim() != net.input_dim {
        return Err(Error::Dimension { layer: 0, expected: net.input_dim, got: domain.dim() });
    }
    let points = domain.grid(grid_res);
    let errors: Vec<Result<f64>> = with_pool(|| {
        points
            .par_iter()
            .map(|x| {
                let y = net.evaluate(x)?;
                let want = oracle(x);
                if want.len() != y.len() {
                    return Err(Error::Dimension { layer: net.depth(), expected: y.len(), got: want.len() });
                }
                Ok(y.iter().zip(&want).fold(0.0f64, |m, (a, b)| {
                    let e = (a - b).abs();
                    if e.is_nan() { f64::INFINITY } else { m.max(e) }
                }))
            })
            .collect()
    });
    let mut best = (0.0f64, 0usize);
    for (i, e) in errors.into_iter().enumerate() {
        let e = e?;
        if e > best.0 {
            best = (e, i);
        }
    }
    Ok(VerifyReport {
        sup_error: best.0,
        argmax: points[best.1].clone(),
        grid_res,
        width: net.width(),
        depth: net.depth(),
        seed: 0,
        per_stage_errors: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
        measure: "grid-measured".to_string(),
        tol: None,
        within_tol: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCheck {
    pub ok: bool,
    /// Ordered inputs `(x, x')` with `x_d < x'_d` whose outputs fail to increase.
    pub counterexample: Option<(Vec<f64>, Vec<f64>)>,
    pub seed: u64,
}

/// Samples prefix points and ordered last-coordinate pairs and checks that
/// the last output strictly increases.
pub fn check_monotone_last(net: &Network, domain: &Box, samples: usize, seed: u64) -> Result<MonotoneCheck> {
    let d = domain.dim();
    if d == 0 || d != net.input_dim || net.output_dim() != d {
        return Err(Error::Dimension { layer: 0, expected: net.input_dim, got: d });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let mut x: Vec<f64> = (0..d).map(|i| domain.lo[i] + rng.gen::<f64>() * domain.width(i)).collect();
        let mut x2 = x.clone();
        let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        x[d - 1] = domain.lo[d - 1] + a * domain.width(d - 1);
        x2[d - 1] = domain.lo[d - 1] + b * domain.width(d - 1);
        if x2[d - 1] <= x[d - 1] {
            continue;
        }
        let (y, y2) = (net.evaluate(&x)?, net.evaluate(&x2)?);
        if !(y2[d - 1] > y[d - 1]) {
            return Ok(MonotoneCheck { ok: false, counterexample: Some((x, x2)), seed });
        }
    }
    Ok(MonotoneCheck { ok: true, counterexample: None, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertibleCheck {
    pub ok: bool,
    pub max_error: f64,
    /// Set when the network cannot be inverted layer by layer.
    pub reason: Option<String>,
    pub seed: u64,
}

/// Round-trips random points through `evaluate` and `invert_evaluate`.
pub fn check_invertible(net: &Network, domain: &Box, samples: usize, tol: f64, seed: u64) -> Result<InvertibleCheck> {
    if domain.dim() != net.input_dim {
        return Err(Error::Dimension { layer: 0, expected: net.input_dim, got: domain.dim() });
    }
    if let Err(e) = net.check_invertible() {
        return Ok(InvertibleCheck {
            ok: false,
            max_error: f64::INFINITY,
            reason: Some(format!("not invertible by construction: {e}")),
            seed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x: Vec<f64> = (0..domain.dim()).map(|i| domain.lo[i] + rng.gen::<f64>() * domain.width(i)).collect();
        let back = net.invert_evaluate(&net.evaluate(&x)?)?;
        worst = x.iter().zip(&back).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok(InvertibleCheck { ok: worst <= tol, max_error: worst, reason: None, seed })
}

/// True when `net` is no wider than `bound`.
pub fn check_width(net: &Network, bound: usize) -> bool {
    net.width() <= bound
}
