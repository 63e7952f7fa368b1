//! Scalar building blocks with hand-coded derivatives.

use serde::de::value::MapDeserializer;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Scalar function `ℝ → ℝ` with first and second derivatives.
///
/// In config files a parameterless member can be written by name
/// (`f_tilde = "square"`); members with parameters use a table with a
/// `name` key (`f_tilde = { name = "softplus_call", strike = 1.0, width = 0.1 }`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ScalarFn {
    Identity,
    Square,
    NegSquare,
    Sin,
    Cos,
    Tanh,
    /// `exp(min(x, cap))`.
    ExpClipped { cap: f64 },
    /// `w·ln(1 + exp((x − K)/w))`, a smoothed call payoff.
    SoftplusCall { strike: f64, width: f64 },
    /// `1 / (1 + exp(−(x − c)/w))`.
    Logistic { center: f64, width: f64 },
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl ScalarFn {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Identity => x,
            ScalarFn::Square => x * x,
            ScalarFn::NegSquare => -x * x,
            ScalarFn::Sin => x.sin(),
            ScalarFn::Cos => x.cos(),
            ScalarFn::Tanh => x.tanh(),
            ScalarFn::ExpClipped { cap } => x.min(cap).exp(),
            ScalarFn::SoftplusCall { strike, width } => width * softplus((x - strike) / width),
            ScalarFn::Logistic { center, width } => sigmoid((x - center) / width),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Identity => 1.0,
            ScalarFn::Square => 2.0 * x,
            ScalarFn::NegSquare => -2.0 * x,
            ScalarFn::Sin => x.cos(),
            ScalarFn::Cos => -x.sin(),
            ScalarFn::Tanh => 1.0 - x.tanh().powi(2),
            ScalarFn::ExpClipped { cap } => {
                if x < cap {
                    x.exp()
                } else {
                    0.0
                }
            }
            ScalarFn::SoftplusCall { strike, width } => sigmoid((x - strike) / width),
            ScalarFn::Logistic { center, width } => {
                let s = sigmoid((x - center) / width);
                s * (1.0 - s) / width
            }
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Identity => 0.0,
            ScalarFn::Square => 2.0,
            ScalarFn::NegSquare => -2.0,
            ScalarFn::Sin => -x.sin(),
            ScalarFn::Cos => -x.cos(),
            ScalarFn::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            ScalarFn::ExpClipped { cap } => {
                if x < cap {
                    x.exp()
                } else {
                    0.0
                }
            }
            ScalarFn::SoftplusCall { strike, width } => {
                let s = sigmoid((x - strike) / width);
                s * (1.0 - s) / width
            }
            ScalarFn::Logistic { center, width } => {
                let s = sigmoid((x - center) / width);
                s * (1.0 - s) * (1.0 - 2.0 * s) / (width * width)
            }
        }
    }

    /// Bounded on all of ℝ.
    pub fn is_bounded(&self) -> bool {
        matches!(
            self,
            ScalarFn::Sin | ScalarFn::Cos | ScalarFn::Tanh | ScalarFn::Logistic { .. } | ScalarFn::ExpClipped { .. }
        )
    }

    /// Convex on all of ℝ.
    pub fn is_convex(&self) -> bool {
        matches!(
            self,
            ScalarFn::Identity | ScalarFn::Square | ScalarFn::SoftplusCall { .. }
        )
    }

    /// Nondecreasing on all of ℝ.
    pub fn is_increasing(&self) -> bool {
        matches!(
            self,
            ScalarFn::Identity
                | ScalarFn::Tanh
                | ScalarFn::ExpClipped { .. }
                | ScalarFn::SoftplusCall { .. }
                | ScalarFn::Logistic { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarFn::SoftplusCall { width, .. } | ScalarFn::Logistic { width, .. }
                if !(width > 0.0 && width.is_finite()) =>
            {
                Err(Error::param("width", "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Accepts either a bare member name or a `name`-tagged table.
pub fn de_scalar<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ScalarFn, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Bare(String),
        Full(ScalarFn),
    }
    match Repr::deserialize(d)? {
        Repr::Full(f) => Ok(f),
        Repr::Bare(name) => {
            let map = MapDeserializer::<_, serde::de::value::Error>::new(std::iter::once(("name", name)));
            ScalarFn::deserialize(map).map_err(serde::de::Error::custom)
        }
    }
}

/// Bounded weight `ρ(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum WeightFn {
    Constant { value: f64 },
    Linear { intercept: f64, slope: f64 },
    /// `exp(−rate·t)`.
    Exponential { rate: f64 },
}

impl Default for WeightFn {
    fn default() -> Self {
        WeightFn::Constant { value: 1.0 }
    }
}

impl WeightFn {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            WeightFn::Constant { value } => value,
            WeightFn::Linear { intercept, slope } => intercept + slope * t,
            WeightFn::Exponential { rate } => (-rate * t).exp(),
        }
    }
}

/// Function `g` of the monitored left limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum MonitorFn {
    Constant {
        value: f64,
    },
    WeightedSum {
        weights: Vec<f64>,
    },
    ApplyToMean {
        #[serde(deserialize_with = "de_scalar")]
        f: ScalarFn,
    },
}

impl Default for MonitorFn {
    fn default() -> Self {
        MonitorFn::Constant { value: 1.0 }
    }
}

impl MonitorFn {
    pub fn value(&self, xs: &[f64]) -> f64 {
        match self {
            MonitorFn::Constant { value } => *value,
            MonitorFn::WeightedSum { weights } => weights.iter().zip(xs).map(|(w, x)| w * x).sum(),
            MonitorFn::ApplyToMean { f } => f.value(xs.iter().sum::<f64>() / xs.len() as f64),
        }
    }
}
