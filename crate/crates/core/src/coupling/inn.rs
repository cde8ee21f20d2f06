//! Programs alternating invertible affines with coupling stages.

use serde::{Deserialize, Serialize};

use super::acf::{acf_flow, AcfSpec};
use super::flow::{CouplingFlow, FlowOp};
use super::ridge::RidgeSum;
use crate::error::{Error, Result};
use crate::netcore::{AffineMap, Box, Network};

/// Share of the tolerance spent on lossy stages; the rest absorbs rounding.
const LOSSY_SHARE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnStage {
    Affine(AffineMap),
    Acf {
        #[serde(default)]
        s: RidgeSum,
        #[serde(default)]
        t: RidgeSum,
    },
    /// A single-coordinate transformation already in flow form.
    Sct(CouplingFlow),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnProgram {
    pub d: usize,
    pub stages: Vec<InnStage>,
}

#[derive(Debug, Clone)]
pub struct InnCompiled {
    pub network: Network,
    pub flow: CouplingFlow,
    /// Error budget handed to each stage (0 for exact stages).
    pub budgets: Vec<f64>,
    /// Enclosure of each stage's input, padded by the tolerance.
    pub stage_boxes: Vec<Box>,
}

impl InnStage {
    fn acf(&self, d: usize) -> Option<AcfSpec> {
        match self {
            InnStage::Acf { s, t } => Some(AcfSpec { d, s: s.clone(), t: t.clone() }),
            _ => None,
        }
    }
}

impl InnProgram {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("program dimension must be positive"));
        }
        for (k, stage) in self.stages.iter().enumerate() {
            let res = match stage {
                InnStage::Affine(a) => check_affine(a, self.d),
                InnStage::Acf { .. } => stage.acf(self.d).expect("acf stage").validate(),
                InnStage::Sct(f) if f.d != self.d => Err(Error::Dimension { layer: 0, expected: self.d, got: f.d }),
                InnStage::Sct(f) => f.validate(),
            };
            res.map_err(|e| e.at_stage(k))?;
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.stages.iter().fold(x.to_vec(), |v, st| self.eval_stage(st, &v))
    }

    pub(crate) fn eval_stage(&self, stage: &InnStage, v: &[f64]) -> Vec<f64> {
        match stage {
            InnStage::Affine(a) => a.apply(v),
            InnStage::Acf { .. } => stage.acf(self.d).expect("acf stage").eval(v),
            InnStage::Sct(f) => f.eval(v),
        }
    }

    /// Enclosures of every stage input and of the final output, each
    /// widened by `pad`.
    pub fn stage_boxes(&self, domain: &Box, pad: f64) -> Vec<Box> {
        let widen = |b: Box| Box::new_unchecked(b.lo.iter().map(|v| v - pad).collect(), b.hi.iter().map(|v| v + pad).collect());
        let mut out = vec![widen(domain.clone())];
        for st in &self.stages {
            let cur = out.last().expect("non-empty");
            let next = match st {
                InnStage::Affine(a) => a.image_box(cur),
                InnStage::Acf { s, t } => {
                    let last = self.d - 1;
                    let p = cur.prefix(last);
                    let (s_lo, s_hi) = s.range(&p);
                    let (t_lo, t_hi) = t.range(&p);
                    let cands = [
                        s_lo.exp() * cur.lo[last],
                        s_lo.exp() * cur.hi[last],
                        s_hi.exp() * cur.lo[last],
                        s_hi.exp() * cur.hi[last],
                    ];
                    let mut b = cur.clone();
                    b.lo[last] = cands.iter().cloned().fold(f64::INFINITY, f64::min) + t_lo;
                    b.hi[last] = cands.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + t_hi;
                    b
                }
                InnStage::Sct(f) => f.bounds(cur).pop().expect("output box"),
            };
            out.push(widen(next));
        }
        out
    }

    /// Stage-wise inverse; coupling shifts are refitted on the stage boxes.
    pub fn inverse(&self, domain: &Box, tol: f64) -> Result<InnProgram> {
        self.validate()?;
        let boxes = self.stage_boxes(domain, 0.0);
        let mut stages = Vec::with_capacity(self.stages.len());
        for (k, st) in self.stages.iter().enumerate().rev() {
            let inv = match st {
                InnStage::Affine(a) => InnStage::Affine(a.inverse().ok_or_else(|| {
                    Error::NotInvertible { layer: k, reason: "singular affine stage".into() }
                })?),
                InnStage::Acf { .. } => {
                    let spec = st.acf(self.d).expect("acf stage").inverse(&boxes[k].prefix(self.d - 1), tol).map_err(|e| e.at_stage(k))?;
                    InnStage::Acf { s: spec.s, t: spec.t }
                }
                InnStage::Sct(_) => return Err(Error::invalid("flow stages have no closed-form inverse").at_stage(k)),
            };
            stages.push(inv);
        }
        Ok(InnProgram { d: self.d, stages })
    }

    // ∞-norm Lipschitz bound of each stage over its input box.
    pub(crate) fn lipschitz(&self, boxes: &[Box]) -> Vec<f64> {
        let last = self.d - 1;
        self.stages
            .iter()
            .zip(boxes)
            .map(|(st, b)| match st {
                InnStage::Affine(a) => a.inf_norm().max(1.0),
                InnStage::Acf { s, t } => {
                    let xd = b.lo[last].abs().max(b.hi[last].abs());
                    let es = s.range(&b.prefix(last)).1.exp();
                    (es * (1.0 + xd * s.grad_l1()) + t.grad_l1()).max(1.0)
                }
                InnStage::Sct(f) => f.lipschitz(),
            })
            .collect()
    }
}

fn check_affine(a: &AffineMap, d: usize) -> Result<()> {
    a.validate()?;
    if a.in_dim() != d || a.out_dim() != d {
        return Err(Error::Dimension { layer: 0, expected: d, got: a.in_dim() });
    }
    if !a.is_invertible() {
        return Err(Error::NotInvertible {
            layer: 0,
            reason: format!("smallest singular value {:e}", a.min_singular_value()),
        });
    }
    Ok(())
}

/// Compiles the program into one width-d Leaky-ReLU network on `domain`.
///
/// The tolerance is split across lossy coupling stages in inverse proportion
/// to the Lipschitz bound of everything downstream.
pub fn compile_inn(prog: &InnProgram, domain: &Box, tol: f64) -> Result<InnCompiled> {
    prog.validate()?;
    if domain.dim() != prog.d {
        return Err(Error::Dimension { layer: 0, expected: prog.d, got: domain.dim() });
    }
    if !domain.is_bounded() {
        return Err(Error::invalid("box must be bounded"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let boxes = prog.stage_boxes(domain, tol);
    let lips = prog.lipschitz(&boxes);
    let lossy: Vec<bool> = prog
        .stages
        .iter()
        .zip(&boxes)
        .map(|(st, b)| match st {
            InnStage::Acf { s, .. } => s.range(&b.prefix(prog.d - 1)).0 != s.range(&b.prefix(prog.d - 1)).1,
            _ => false,
        })
        .collect();
    let n_lossy = lossy.iter().filter(|l| **l).count().max(1) as f64;
    let mut flow = CouplingFlow::new(prog.d);
    let mut budgets = Vec::with_capacity(prog.stages.len());
    for (k, st) in prog.stages.iter().enumerate() {
        let downstream: f64 = lips[k + 1..].iter().product();
        let eps = if lossy[k] { LOSSY_SHARE * tol / (n_lossy * downstream) } else { 0.0 };
        budgets.push(eps);
        match st {
            InnStage::Affine(a) => flow.push(FlowOp::Affine(a.clone())),
            InnStage::Acf { .. } => {
                let spec = st.acf(prog.d).expect("acf stage");
                let stage_tol = if lossy[k] { eps } else { tol };
                flow.extend(&acf_flow(&spec, &boxes[k], stage_tol).map_err(|e| e.at_stage(k))?);
            }
            InnStage::Sct(f) => flow.extend(f),
        }
    }
    let network = flow.to_leaky_network(domain)?;
    Ok(InnCompiled { network, flow, budgets, stage_boxes: boxes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{compile_acf, RidgeTerm};

    fn sup(net: &Network, f: impl Fn(&[f64]) -> Vec<f64>, domain: &Box, res: usize) -> f64 {
        domain.grid(res).iter().fold(0.0f64, |m, x| {
            let y = net.evaluate(x).unwrap();
            y.iter().zip(f(x)).fold(m, |m, (a, b)| m.max((a - b).abs()))
        })
    }

    fn acf_stage() -> InnStage {
        InnStage::Acf {
            s: RidgeSum { constant: 0.0, terms: vec![RidgeTerm { a: 0.6, b: vec![1.0], c: -0.4, beta: 0.3 }] },
            t: RidgeSum { constant: 0.1, terms: vec![RidgeTerm { a: -0.5, b: vec![2.0], c: -1.0, beta: 0.2 }] },
        }
    }

    #[test]
    fn inverse_affines_cancel() {
        let a = AffineMap::new(vec![vec![2.0, 1.0], vec![0.5, 1.0]], vec![0.3, -0.1]).unwrap();
        let prog = InnProgram { d: 2, stages: vec![InnStage::Affine(a.clone()), InnStage::Affine(a.inverse().unwrap())] };
        let out = compile_inn(&prog, &Box::unit(2), 1e-3).unwrap();
        assert_eq!(out.network.depth(), 0);
        assert!(sup(&out.network, |x| x.to_vec(), &Box::unit(2), 11) < 1e-9);
    }

    #[test]
    fn single_acf_matches_compile_acf() {
        let prog = InnProgram { d: 2, stages: vec![acf_stage()] };
        let domain = Box::unit(2);
        let out = compile_inn(&prog, &domain, 1e-3).unwrap();
        let spec = acf_stage().acf(2).unwrap();
        assert_eq!(out.flow, acf_flow(&spec, &out.stage_boxes[0], out.budgets[0]).unwrap());
        let direct = compile_acf(&spec, &out.stage_boxes[0], out.budgets[0]).unwrap();
        for x in domain.grid(9) {
            let (a, b) = (out.network.evaluate(&x).unwrap(), direct.evaluate(&x).unwrap());
            assert!((a[1] - b[1]).abs() < 1e-12 && (a[0] - x[0]).abs() < 1e-12, "{a:?} {b:?} {x:?}");
        }
    }

    #[test]
    fn round_trip_with_inverse() {
        let a = AffineMap::new(vec![vec![1.0, 0.4], vec![-0.3, 1.0]], vec![0.0, 0.2]).unwrap();
        let prog = InnProgram { d: 2, stages: vec![InnStage::Affine(a), acf_stage()] };
        let domain = Box::unit(2);
        let tol = 1e-2;
        let inv = prog.inverse(&domain, tol / 4.0).unwrap();
        let mut both = prog.clone();
        both.stages.extend(inv.stages);
        let out = compile_inn(&both, &domain, tol).unwrap();
        assert_eq!(out.network.width(), 2);
        assert!(sup(&out.network, |x| x.to_vec(), &domain, 41) < 2.0 * tol);
    }

    #[test]
    fn singular_stage_reports_index() {
        let bad = AffineMap::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![0.0, 0.0]).unwrap();
        let prog = InnProgram { d: 2, stages: vec![acf_stage(), InnStage::Affine(bad)] };
        match compile_inn(&prog, &Box::unit(2), 1e-3) {
            Err(Error::Stage { stage: 1, source }) => assert!(matches!(*source, Error::NotInvertible { .. })),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn program_json_shape() {
        let src = r#"{"d": 2, "stages": [{"affine": {"weight": [[1, 0], [0, 1]], "bias": [0, 0]}}, {"acf": {"s": {"constant": 0, "terms": []}, "t": {"constant": 1, "terms": []}}}]}"#;
        let prog: InnProgram = serde_json::from_str(src).unwrap();
        assert_eq!(prog.eval(&[0.5, 0.5]), vec![0.5, 1.5]);
    }
}
