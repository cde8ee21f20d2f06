//! Activation tags and the registry of named custom activations.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Componentwise activation attached to a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationTag {
    /// `x` for `x >= 0`, `beta * x` otherwise. `beta > 0`.
    LeakyRelu(f64),
    Relu,
    Identity,
    /// A scalar function looked up by name in the activation registry.
    Custom(String),
}

/// Leaky-ReLU with slope `beta` on the negative half-line.
#[inline]
pub fn leaky_relu(beta: f64, x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        beta * x
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A registered scalar activation.
#[derive(Clone)]
pub struct CustomActivation {
    pub eval: ScalarFn,
    pub derivative: Option<ScalarFn>,
    /// Point where the activation is C¹ with non-vanishing derivative.
    pub alpha: Option<f64>,
    pub strictly_increasing: bool,
}

impl std::fmt::Debug for CustomActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CustomActivation")
            .field("alpha", &self.alpha)
            .field("strictly_increasing", &self.strictly_increasing)
            .finish_non_exhaustive()
    }
}

impl CustomActivation {
    pub fn new(eval: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        CustomActivation {
            eval: Arc::new(eval),
            derivative: None,
            alpha: None,
            strictly_increasing: false,
        }
    }

    pub fn increasing(mut self) -> Self {
        self.strictly_increasing = true;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_derivative(mut self, d: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.derivative = Some(Arc::new(d));
        self
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    /// Derivative at `x`, from the registered closure or a central difference.
    pub fn derivative_at(&self, x: f64) -> f64 {
        match &self.derivative {
            Some(d) => d(x),
            None => {
                let h = 1e-5 * (1.0 + x.abs());
                (self.apply(x + h) - self.apply(x - h)) / (2.0 * h)
            }
        }
    }

    /// Inverse by bracketing and bisection. Only valid for increasing activations.
    pub fn inverse(&self, y: f64) -> Option<f64> {
        if !self.strictly_increasing || !y.is_finite() {
            return None;
        }
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        let mut tries = 0;
        while self.apply(lo) > y {
            lo *= 2.0;
            tries += 1;
            if tries > 1100 {
                return None;
            }
        }
        tries = 0;
        while self.apply(hi) < y {
            hi *= 2.0;
            tries += 1;
            if tries > 1100 {
                return None;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.apply(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

fn registry() -> &'static RwLock<HashMap<String, CustomActivation>> {
    static REG: OnceLock<RwLock<HashMap<String, CustomActivation>>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut m = HashMap::new();
        m.insert(
            "tanh".to_string(),
            CustomActivation::new(f64::tanh)
                .increasing()
                .with_alpha(0.0)
                .with_derivative(|x: f64| 1.0 - x.tanh().powi(2)),
        );
        m.insert(
            "sigmoid".to_string(),
            CustomActivation::new(|x: f64| 1.0 / (1.0 + (-x).exp()))
                .increasing()
                .with_alpha(0.0)
                .with_derivative(|x: f64| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 - s)
                }),
        );
        m.insert(
            "softplus".to_string(),
            CustomActivation::new(|x: f64| if x > 30.0 { x } else { x.exp().ln_1p() })
                .increasing()
                .with_alpha(0.0)
                .with_derivative(|x: f64| 1.0 / (1.0 + (-x).exp())),
        );
        m.insert(
            "linear".to_string(),
            CustomActivation::new(|x| x)
                .increasing()
                .with_alpha(0.0)
                .with_derivative(|_| 1.0),
        );
        RwLock::new(m)
    })
}

/// Register (or replace) a named custom activation.
pub fn register_activation(name: &str, act: CustomActivation) {
    registry()
        .write()
        .expect("activation registry poisoned")
        .insert(name.to_string(), act);
}

pub fn lookup_activation(name: &str) -> Result<CustomActivation> {
    registry()
        .read()
        .expect("activation registry poisoned")
        .get(name)
        .cloned()
        .ok_or_else(|| Error::UnknownActivation(name.to_string()))
}

impl ActivationTag {
    pub fn validate(&self) -> Result<()> {
        match self {
            ActivationTag::LeakyRelu(b) if !(b.is_finite() && *b > 0.0) => Err(Error::invalid(
                format!("leaky-relu slope must be positive and finite, got {b}"),
            )),
            ActivationTag::Custom(name) => lookup_activation(name).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Scalar inverse of a strictly increasing activation.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        match self {
            ActivationTag::LeakyRelu(b) => Ok(leaky_relu(1.0 / b, y)),
            ActivationTag::Identity => Ok(y),
            ActivationTag::Relu => Err(Error::NonMonotoneActivation("relu".into())),
            ActivationTag::Custom(n) => {
                let act = lookup_activation(n)?;
                if !act.strictly_increasing {
                    return Err(Error::NonMonotoneActivation(n.clone()));
                }
                act.inverse(y)
                    .ok_or_else(|| Error::invalid(format!("`{n}` has no preimage for {y}")))
            }
        }
    }

    /// Image of `[lo, hi]` under a monotone activation; `None` for non-monotone customs.
    pub fn image(&self, lo: f64, hi: f64) -> Option<(f64, f64)> {
        match self {
            ActivationTag::LeakyRelu(b) => Some((leaky_relu(*b, lo), leaky_relu(*b, hi))),
            ActivationTag::Relu => Some((lo.max(0.0), hi.max(0.0))),
            ActivationTag::Identity => Some((lo, hi)),
            ActivationTag::Custom(n) => {
                let act = lookup_activation(n).ok()?;
                act.strictly_increasing
                    .then(|| (act.apply(lo), act.apply(hi)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_inverse_round_trips() {
        let beta = 0.3;
        for x in [-5.0, 0.0, 5.0] {
            assert_eq!(leaky_relu(1.0 / beta, leaky_relu(beta, x)), x);
        }
    }

    #[test]
    fn serde_shapes() {
        let tags = vec![
            ActivationTag::LeakyRelu(0.5),
            ActivationTag::Relu,
            ActivationTag::Identity,
            ActivationTag::Custom("tanh".into()),
        ];
        let s = serde_json::to_string(&tags).unwrap();
        assert_eq!(s, r#"[{"leaky_relu":0.5},"relu","identity",{"custom":"tanh"}]"#);
        let back: Vec<ActivationTag> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, tags);
    }

    #[test]
    fn custom_inverse_by_bisection() {
        let t = ActivationTag::Custom("tanh".into());
        let y = 0.25f64.tanh();
        assert!((t.inverse(y).unwrap() - 0.25).abs() < 1e-12);
        assert!(ActivationTag::Relu.inverse(1.0).is_err());
    }

    #[test]
    fn rejects_bad_beta() {
        assert!(ActivationTag::LeakyRelu(0.0).validate().is_err());
        assert!(ActivationTag::LeakyRelu(-1.0).validate().is_err());
        assert!(ActivationTag::Custom("nope".into()).validate().is_err());
    }
}
