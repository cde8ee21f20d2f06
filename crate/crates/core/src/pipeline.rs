//! End-to-end assembly `project ∘ H ∘ include` with width accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coupling::{compile_inn, InnProgram, InnStage};
use crate::error::{Error, Result};
use crate::netcore::{AffineMap, Box, Network};
use crate::sct::{fit_sigma_ridge, lift_general, lift_relu_flow};

/// Term budget for each fitted σ-ridge stage.
const SIGMA_TERMS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActivationClass {
    LeakyRelu,
    Relu,
    /// A registered custom activation.
    General(String),
}

impl FromStr for ActivationClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leaky-relu" | "leaky_relu" => Ok(ActivationClass::LeakyRelu),
            "relu" => Ok(ActivationClass::Relu),
            _ => match s.strip_prefix("general:") {
                Some(name) if !name.is_empty() => Ok(ActivationClass::General(name.to_string())),
                _ => Err(Error::invalid(format!("unknown activation class `{s}`"))),
            },
        }
    }
}

impl fmt::Display for ActivationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationClass::LeakyRelu => write!(f, "leaky-relu"),
            ActivationClass::Relu => write!(f, "relu"),
            ActivationClass::General(n) => write!(f, "general:{n}"),
        }
    }
}

/// Extra width over the embedding dimension.
pub fn alpha_of(cls: &ActivationClass) -> usize {
    match cls {
        ActivationClass::LeakyRelu => 0,
        ActivationClass::Relu => 1,
        ActivationClass::General(_) => 2,
    }
}

pub fn embedding_dim(n: usize, m: usize) -> usize {
    (2 * n + 1).max(m)
}

pub fn min_width_bound(n: usize, m: usize, cls: &ActivationClass) -> usize {
    embedding_dim(n, m) + alpha_of(cls)
}

/// Zero-padding `ℝⁿ → ℝᵈ`.
pub fn include(n: usize, d: usize) -> Result<Network> {
    if d < n {
        return Err(Error::invalid(format!("cannot include dimension {n} into {d}")));
    }
    let weight = (0..d).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    Ok(Network::affine(AffineMap { weight, bias: vec![0.0; d] }))
}

/// First `m` coordinates of `ℝᵈ`.
pub fn project(d: usize, m: usize) -> Result<Network> {
    if m > d {
        return Err(Error::invalid(format!("cannot project dimension {d} onto {m}")));
    }
    let weight = (0..m).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    Ok(Network::affine(AffineMap { weight, bias: vec![0.0; m] }))
}

/// A map `ℝⁿ → ℝᵐ` given through a program on `ℝᵈ`, `d = max(2n+1, m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffeoTarget {
    pub n: usize,
    pub m: usize,
    pub program: InnProgram,
}

impl DiffeoTarget {
    pub fn d(&self) -> usize {
        embedding_dim(self.n, self.m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::invalid("input and output dimensions must be positive"));
        }
        if self.program.d != self.d() {
            return Err(Error::Dimension { layer: 0, expected: self.d(), got: self.program.d });
        }
        self.program.validate()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut z = x.to_vec();
        z.resize(self.d(), 0.0);
        let mut y = self.program.eval(&z);
        y.truncate(self.m);
        y
    }

    fn embedded_box(&self, domain: &Box) -> Box {
        let mut lo = domain.lo.clone();
        let mut hi = domain.hi.clone();
        lo.resize(self.d(), 0.0);
        hi.resize(self.d(), 0.0);
        Box::new_unchecked(lo, hi)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineCompiled {
    pub network: Network,
    pub width_bound: usize,
    pub embedding_dim: usize,
    /// Largest deviation on the held-out sample lattice.
    pub measured_error: f64,
}

/// Compiles the target on `domain ⊂ ℝⁿ` for the given activation class.
///
/// The program is compiled on `domain × {0}`, which is exactly the image of
/// the inclusion.
pub fn compile_pipeline(target: &DiffeoTarget, cls: &ActivationClass, domain: &Box, tol: f64) -> Result<PipelineCompiled> {
    target.validate()?;
    if domain.dim() != target.n {
        return Err(Error::Dimension { layer: 0, expected: target.n, got: domain.dim() });
    }
    if !domain.is_bounded() || !(tol > 0.0) {
        return Err(Error::invalid("need a bounded box and a positive tolerance"));
    }
    let d = target.d();
    let embedded = target.embedded_box(domain);
    let h = match cls {
        ActivationClass::LeakyRelu => compile_inn(&target.program, &embedded, tol)?.network,
        ActivationClass::Relu => {
            let inn = compile_inn(&target.program, &embedded, tol)?;
            if inn.flow.nonlinear_ops() == 0 {
                inn.network
            } else {
                lift_relu_flow(&inn.flow, &embedded)?
            }
        }
        ActivationClass::General(name) => compile_general(&target.program, name, domain, &embedded, tol)?,
    };
    let network = Network::compose(&project(d, target.m)?, &Network::compose(&h, &include(target.n, d)?)?)?;
    let width_bound = min_width_bound(target.n, target.m, cls);
    assert!(
        network.width() <= width_bound,
        "width {} exceeds the bound {width_bound}",
        network.width()
    );
    let check = domain.shifted_grid(sample_res(target.n) - 1);
    let mut measured_error = 0.0f64;
    for x in &check {
        let y = network.evaluate(x)?;
        for (a, b) in y.iter().zip(target.eval(x)) {
            measured_error = measured_error.max((a - b).abs());
        }
    }
    Ok(PipelineCompiled { network, width_bound, embedding_dim: d, measured_error })
}

fn sample_res(n: usize) -> usize {
    ((1600f64).powf(1.0 / n as f64) as usize).max(3)
}

// Every coupling stage becomes a fitted σ-ridge lifted to width d+2; affine
// stages fold into the neighbouring layers.
fn compile_general(prog: &InnProgram, sigma: &str, domain: &Box, embedded: &Box, tol: f64) -> Result<Network> {
    let d = prog.d;
    let last = d - 1;
    let res = sample_res(domain.dim());
    let lift = |pts: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        pts.into_iter()
            .map(|mut p| {
                p.resize(d, 0.0);
                p
            })
            .collect()
    };
    let mut train = lift(domain.grid(res));
    let mut valid = lift(domain.shifted_grid(res - 1));
    let boxes = prog.stage_boxes(embedded, tol);
    let lips = prog.lipschitz(&boxes);
    let coupling = prog.stages.iter().filter(|s| !matches!(s, InnStage::Affine(_))).count().max(1) as f64;
    let mut net = Network::identity(d);
    for (k, st) in prog.stages.iter().enumerate() {
        let next = |pts: &[Vec<f64>]| pts.iter().map(|p| prog.eval_stage(st, p)).collect::<Vec<_>>();
        if let InnStage::Affine(a) = st {
            net = net.then_affine(a)?;
        } else {
            let downstream: f64 = lips[k + 1..].iter().product();
            let eps = 0.9 * tol / (coupling * downstream);
            let incr = |pts: &[Vec<f64>]| -> Vec<f64> {
                pts.iter().map(|p| prog.eval_stage(st, p)[last] - p[last]).collect()
            };
            let (ty, vy) = (incr(&train), incr(&valid));
            let features = feature_box(&boxes[k]);
            let (mut ridge, _) =
                fit_sigma_ridge(sigma, (&train, &ty), (&valid, &vy), &features, SIGMA_TERMS, 0.5 * eps, 0)
                    .map_err(|e| e.at_stage(k))?;
            ridge.linear[last] += 1.0;
            let lifted = lift_general(sigma, &ridge, &boxes[k], 0.5 * eps).map_err(|e| e.at_stage(k))?;
            net = Network::compose(&lifted.network, &net)?;
        }
        train = next(&train);
        valid = next(&valid);
    }
    Ok(net)
}

// Random feature directions are scaled by box widths; thin sides are widened
// so features stay tame off the sample manifold.
fn feature_box(b: &Box) -> Box {
    let wmax = (0..b.dim()).map(|i| b.width(i)).fold(0.0, f64::max).max(1e-9);
    let (mut lo, mut hi) = (b.lo.clone(), b.hi.clone());
    for i in 0..b.dim() {
        let pad = (0.25 * wmax - b.width(i)).max(0.0) / 2.0;
        lo[i] -= pad;
        hi[i] += pad;
    }
    Box::new_unchecked(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{RidgeSum, RidgeTerm};

    #[test]
    fn width_bounds() {
        assert_eq!(alpha_of(&ActivationClass::LeakyRelu), 0);
        assert_eq!(alpha_of(&ActivationClass::Relu), 1);
        assert_eq!(alpha_of(&"general:tanh".parse().unwrap()), 2);
        assert_eq!(min_width_bound(2, 3, &ActivationClass::Relu), 6);
        assert_eq!(min_width_bound(1, 7, &ActivationClass::LeakyRelu), 7);
        assert_eq!(min_width_bound(1, 1, &ActivationClass::General("tanh".into())), 5);
    }

    #[test]
    fn include_and_project() {
        assert_eq!(include(1, 3).unwrap().evaluate(&[5.0]).unwrap(), vec![5.0, 0.0, 0.0]);
        assert_eq!(project(3, 1).unwrap().evaluate(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0]);
        let round = Network::compose(&project(4, 2).unwrap(), &include(2, 4).unwrap()).unwrap();
        assert_eq!(round.evaluate(&[0.3, -7.0]).unwrap(), vec![0.3, -7.0]);
        assert!(include(3, 2).is_err());
        assert!(project(2, 3).is_err());
    }

    fn acf_target() -> DiffeoTarget {
        let s = RidgeSum { constant: 0.1, terms: vec![RidgeTerm { a: 0.5, b: vec![1.0, 0.0], c: -0.5, beta: 0.2 }] };
        let t = RidgeSum { constant: 0.0, terms: vec![RidgeTerm { a: 0.3, b: vec![2.0, 0.0], c: -0.4, beta: 0.1 }] };
        let swap = AffineMap::new(
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]],
            vec![0.0; 3],
        )
        .unwrap();
        // x₁ rides in the last slot while the prefix holds (0, 0).
        let s2 = RidgeSum { constant: 0.0, terms: vec![RidgeTerm { a: 0.4, b: vec![0.0, 1.0], c: 0.0, beta: 0.5 }] };
        DiffeoTarget {
            n: 1,
            m: 1,
            program: InnProgram {
                d: 3,
                stages: vec![
                    InnStage::Acf { s, t },
                    InnStage::Affine(swap.clone()),
                    InnStage::Acf { s: s2, t: RidgeSum::constant(0.2) },
                    InnStage::Affine(swap),
                ],
            },
        }
    }

    #[test]
    fn affine_program_is_exact_for_every_class() {
        let a = AffineMap::new(vec![vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.5], vec![0.0, 0.0, 1.0]], vec![1.0, 0.0, 0.0]).unwrap();
        let target = DiffeoTarget { n: 1, m: 2, program: InnProgram { d: 3, stages: vec![InnStage::Affine(a)] } };
        for cls in ["leaky-relu", "relu", "general:tanh"] {
            let cls: ActivationClass = cls.parse().unwrap();
            let out = compile_pipeline(&target, &cls, &Box::unit(1), 1e-3).unwrap();
            assert!(out.network.width() <= out.width_bound);
            assert!(out.measured_error <= 1e-9);
        }
    }

    #[test]
    fn acf_target_all_classes() {
        let target = acf_target();
        let tol = 1e-2;
        for (cls, w) in [("leaky-relu", 3), ("relu", 4), ("general:tanh", 5)] {
            let cls: ActivationClass = cls.parse().unwrap();
            let out = compile_pipeline(&target, &cls, &Box::unit(1), tol).unwrap();
            assert!(out.network.width() <= w, "{cls}: width {}", out.network.width());
            assert!(out.measured_error <= tol, "{cls}: error {}", out.measured_error);
        }
    }
}
