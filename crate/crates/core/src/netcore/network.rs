use serde::{Deserialize, Serialize};

use super::activation::{leaky_relu, ActivationTag};
use super::{AffineMap, Box};
use crate::error::{Error, Result};

/// One affine map followed by a componentwise activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(flatten)]
    pub affine: AffineMap,
    pub activation: ActivationTag,
}

impl Layer {
    pub fn new(affine: AffineMap, activation: ActivationTag) -> Self {
        Layer { affine, activation }
    }
}

/// `final ∘ σ_N ∘ A_N ∘ … ∘ σ_1 ∘ A_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    #[serde(rename = "final")]
    pub final_affine: AffineMap,
}

/// Interval enclosure of one activation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub pre: Box,
    pub post: Box,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTrace {
    pub layers: Vec<LayerBounds>,
    pub output: Box,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>, final_affine: AffineMap) -> Result<Self> {
        let net = Network {
            input_dim,
            layers,
            final_affine,
        };
        net.validate()?;
        Ok(net)
    }

    /// A network with no activation layers.
    pub fn affine(map: AffineMap) -> Self {
        Network {
            input_dim: map.in_dim(),
            layers: Vec::new(),
            final_affine: map,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::affine(AffineMap::identity(n))
    }

    /// Checks the dimension chain and every activation tag.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        let mut dim = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine.validate()?;
            layer.activation.validate()?;
            if layer.affine.in_dim() != dim {
                return Err(Error::Dimension {
                    layer: i,
                    expected: dim,
                    got: layer.affine.in_dim(),
                });
            }
            if layer.affine.out_dim() == 0 {
                return Err(Error::invalid(format!("layer {i} has zero width")));
            }
            dim = layer.affine.out_dim();
        }
        self.final_affine.validate()?;
        if self.final_affine.in_dim() != dim || self.final_affine.out_dim() == 0 {
            return Err(Error::Dimension {
                layer: self.layers.len(),
                expected: dim,
                got: self.final_affine.in_dim(),
            });
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.final_affine.out_dim()
    }

    /// Number of activation layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Largest intermediate dimension (0 for affine-only networks).
    pub fn width(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.affine.out_dim())
            .max()
            .unwrap_or(0)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.affine.apply(&h);
            apply_activation(&layer.activation, &mut h)?;
        }
        Ok(self.final_affine.apply(&h))
    }

    /// Post-activation vectors of every layer, then the output.
    pub fn evaluate_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.affine.apply(&h);
            apply_activation(&layer.activation, &mut h)?;
            out.push(h.clone());
        }
        out.push(self.final_affine.apply(&h));
        Ok(out)
    }

    /// `outer ∘ inner`, fusing `inner.final` into `outer`'s first affine.
    pub fn compose(outer: &Network, inner: &Network) -> Result<Network> {
        if inner.output_dim() != outer.input_dim {
            return Err(Error::Dimension {
                layer: inner.layers.len(),
                expected: outer.input_dim,
                got: inner.output_dim(),
            });
        }
        let mut layers = inner.layers.clone();
        let final_affine = match outer.layers.split_first() {
            None => outer.final_affine.compose(&inner.final_affine),
            Some((first, rest)) => {
                layers.push(Layer::new(
                    first.affine.compose(&inner.final_affine),
                    first.activation.clone(),
                ));
                layers.extend(rest.iter().cloned());
                outer.final_affine.clone()
            }
        };
        Ok(Network {
            input_dim: inner.input_dim,
            layers,
            final_affine,
        })
    }

    /// Pre-composes an affine map: `self ∘ map`.
    pub fn after_affine(&self, map: &AffineMap) -> Result<Network> {
        Network::compose(self, &Network::affine(map.clone()))
    }

    /// Post-composes an affine map: `map ∘ self`.
    pub fn then_affine(&self, map: &AffineMap) -> Result<Network> {
        Network::compose(&Network::affine(map.clone()), self)
    }

    /// Inverse image of `y`, solved layer by layer.
    pub fn invert_evaluate(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_invertible()?;
        if y.len() != self.output_dim() {
            return Err(Error::Dimension {
                layer: self.layers.len(),
                expected: self.output_dim(),
                got: y.len(),
            });
        }
        let n = self.layers.len();
        let mut h = self
            .final_affine
            .solve(y)
            .ok_or_else(|| singular(n))?;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            for v in h.iter_mut() {
                *v = layer.activation.inverse(*v)?;
            }
            h = layer.affine.solve(&h).ok_or_else(|| singular(i))?;
        }
        Ok(h)
    }

    /// Checks the structural preconditions of `invert_evaluate`.
    pub fn check_invertible(&self) -> Result<()> {
        let affines = self
            .layers
            .iter()
            .map(|l| &l.affine)
            .chain(std::iter::once(&self.final_affine));
        for (i, a) in affines.enumerate() {
            if !a.is_square() {
                return Err(Error::NotInvertible {
                    layer: i,
                    reason: format!("weight is {}x{}", a.out_dim(), a.in_dim()),
                });
            }
            let s = a.min_singular_value();
            if s <= super::affine::INVERTIBILITY_THRESHOLD {
                return Err(Error::NotInvertible {
                    layer: i,
                    reason: format!("smallest singular value {s:e}"),
                });
            }
        }
        for l in &self.layers {
            match &l.activation {
                ActivationTag::LeakyRelu(_) | ActivationTag::Identity => {}
                ActivationTag::Relu => return Err(Error::NonMonotoneActivation("relu".into())),
                ActivationTag::Custom(name) => {
                    let act = super::lookup_activation(name)?;
                    if !act.strictly_increasing {
                        return Err(Error::NonMonotoneActivation(name.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Sound interval enclosure of every layer and of the output over `input`.
    pub fn propagate_intervals(&self, input: &Box) -> Result<IntervalTrace> {
        if input.dim() != self.input_dim {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.input_dim,
                got: input.dim(),
            });
        }
        let mut cur = input.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pre = widen(layer.affine.image_box(&cur));
            let mut lo = Vec::with_capacity(pre.dim());
            let mut hi = Vec::with_capacity(pre.dim());
            for (&l, &h) in pre.lo.iter().zip(&pre.hi) {
                let (a, b) = layer
                    .activation
                    .image(l, h)
                    .unwrap_or_else(|| sampled_image(&layer.activation, l, h));
                lo.push(a);
                hi.push(b);
            }
            let post = Box::new_unchecked(lo, hi);
            cur = post.clone();
            layers.push(LayerBounds { pre, post });
        }
        let output = widen(self.final_affine.image_box(&cur));
        Ok(IntervalTrace { layers, output })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Network> {
        let net: Network = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }
}

fn singular(layer: usize) -> Error {
    Error::NotInvertible {
        layer,
        reason: "singular solve".into(),
    }
}

pub(crate) fn apply_activation(tag: &ActivationTag, h: &mut [f64]) -> Result<()> {
    match tag {
        ActivationTag::LeakyRelu(b) => h.iter_mut().for_each(|v| *v = leaky_relu(*b, *v)),
        ActivationTag::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
        ActivationTag::Identity => {}
        ActivationTag::Custom(name) => {
            let act = super::lookup_activation(name)?;
            h.iter_mut().for_each(|v| *v = act.apply(*v));
        }
    }
    Ok(())
}

// Outward rounding slack so float evaluation traces stay inside the boxes.
fn widen(b: Box) -> Box {
    let lo = b.lo.iter().map(|v| v - 1e-12 * (1.0 + v.abs())).collect();
    let hi = b.hi.iter().map(|v| v + 1e-12 * (1.0 + v.abs())).collect();
    Box::new_unchecked(lo, hi)
}

// Non-monotone customs have no closed-form image; a dense sample is the best we can do.
fn sampled_image(tag: &ActivationTag, lo: f64, hi: f64) -> (f64, f64) {
    let mut v = [0.0];
    let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..=1024 {
        v[0] = lo + (hi - lo) * k as f64 / 1024.0;
        if apply_activation(tag, &mut v).is_ok() {
            a = a.min(v[0]);
            b = b.max(v[0]);
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaky_1d(beta: f64) -> Network {
        Network::new(
            1,
            vec![Layer::new(AffineMap::identity(1), ActivationTag::LeakyRelu(beta))],
            AffineMap::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_leaky_examples() {
        let id = Network::identity(2);
        assert_eq!(id.evaluate(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
        assert_eq!(leaky_1d(0.5).evaluate(&[-2.0]).unwrap(), vec![-1.0]);
        assert_eq!(id.width(), 0);
        assert_eq!(leaky_1d(0.5).width(), 1);
    }

    #[test]
    fn dimension_errors_name_the_layer() {
        let bad = Network {
            input_dim: 2,
            layers: vec![
                Layer::new(AffineMap::identity(2), ActivationTag::Relu),
                Layer::new(AffineMap::identity(3), ActivationTag::Relu),
            ],
            final_affine: AffineMap::identity(3),
        };
        match bad.validate() {
            Err(Error::Dimension { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Network::identity(2).evaluate(&[1.0]).is_err());
    }

    #[test]
    fn compose_fuses_and_adds_depth() {
        let a = leaky_1d(0.5);
        let b = leaky_1d(0.25);
        let c = Network::compose(&a, &b).unwrap();
        assert_eq!(c.depth(), 2);
        for x in [-3.0, -0.1, 0.0, 2.0] {
            let seq = a.evaluate(&b.evaluate(&[x]).unwrap()).unwrap();
            assert_eq!(c.evaluate(&[x]).unwrap(), seq);
        }
        let ii = Network::compose(&Network::identity(2), &Network::identity(2)).unwrap();
        assert_eq!(ii, Network::identity(2));
    }

    #[test]
    fn inversion_examples() {
        assert_eq!(Network::identity(2).invert_evaluate(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let net = leaky_1d(0.3);
        for x in [-5.0, 0.0, 5.0] {
            let y = net.evaluate(&[x]).unwrap();
            assert!((net.invert_evaluate(&y).unwrap()[0] - x).abs() < 1e-15);
        }
        let relu = Network::new(
            1,
            vec![Layer::new(AffineMap::identity(1), ActivationTag::Relu)],
            AffineMap::identity(1),
        )
        .unwrap();
        assert!(matches!(
            relu.invert_evaluate(&[1.0]),
            Err(Error::NonMonotoneActivation(_))
        ));
        let singular = Network::affine(AffineMap::linear(vec![vec![1.0, 1.0], vec![1.0, 1.0]]));
        assert!(matches!(
            singular.invert_evaluate(&[1.0, 1.0]),
            Err(Error::NotInvertible { layer: 0, .. })
        ));
    }

    #[test]
    fn interval_examples() {
        let id = Network::identity(2).propagate_intervals(&Box::unit(2)).unwrap();
        assert!(id.output.lo.iter().all(|v| (v - 0.0).abs() < 1e-11));
        assert!(id.output.hi.iter().all(|v| (v - 1.0).abs() < 1e-11));
        let aff = Network::affine(AffineMap::new(vec![vec![2.0]], vec![1.0]).unwrap());
        let t = aff.propagate_intervals(&Box::unit(1)).unwrap();
        assert!((t.output.lo[0] - 1.0).abs() < 1e-11 && (t.output.hi[0] - 3.0).abs() < 1e-11);
    }

    #[test]
    fn truncated_json_is_rejected() {
        let s = leaky_1d(0.5).to_json();
        let cut = &s[..s.len() / 2];
        assert!(matches!(Network::from_json(cut), Err(Error::Parse { .. })));
    }
}
