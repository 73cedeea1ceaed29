//! Scalar activations and their parity splits.
//!
//! GELU is the exact `z * Phi(z)` with `Phi` computed from the error
//! function. For ReLU, GELU and SiLU the odd part is exactly `z / 2`, so
//! `sigma(z) = E(z) + z / 2` with `E` even.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Gelu,
    ReluSquared,
    Silu,
    Identity,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::Relu,
        ActivationKind::Gelu,
        ActivationKind::ReluSquared,
        ActivationKind::Silu,
        ActivationKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::ReluSquared => "relu_squared",
            ActivationKind::Silu => "silu",
            ActivationKind::Identity => "identity",
        }
    }

    /// Positive homogeneity degree `k` with `sigma(lambda z) = lambda^k sigma(z)`.
    pub fn degree(self) -> Option<u32> {
        match self {
            ActivationKind::Relu => Some(1),
            ActivationKind::ReluSquared => Some(2),
            _ => None,
        }
    }

    /// Whether the activation may be used as the gate of a gated block.
    pub fn is_gate_eligible(self) -> bool {
        !matches!(self, ActivationKind::ReluSquared)
    }

    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::Gelu => z * normal_cdf(z),
            ActivationKind::ReluSquared => {
                let r = z.max(0.0);
                r * r
            }
            ActivationKind::Silu => z * sigmoid(z),
            ActivationKind::Identity => z,
        }
    }

    /// Even part `E(z)` in `sigma(z) = E(z) + z / 2`.
    ///
    /// Only defined for activations whose odd part is exactly `z / 2`.
    pub fn even_part(self, z: f64) -> Result<f64> {
        match self {
            ActivationKind::Relu => Ok(0.5 * z.abs()),
            // Phi(z) - 1/2 = erf(z / sqrt 2) / 2, and erf is computed odd-symmetrically.
            ActivationKind::Gelu => Ok(0.5 * z * libm::erf(z * FRAC_1_SQRT_2)),
            // sigmoid(z) - 1/2 = tanh(z / 2) / 2
            ActivationKind::Silu => Ok(0.5 * z * (0.5 * z).tanh()),
            other => Err(Error::UnsupportedActivation {
                activation: other,
                context: "the parity split",
            }),
        }
    }

    /// First derivative; ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Gelu => normal_cdf(z) + z * normal_pdf(z),
            ActivationKind::ReluSquared => 2.0 * z.max(0.0),
            ActivationKind::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            ActivationKind::Identity => 1.0,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ActivationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!("unknown activation `{s}` (expected relu, gelu, relu_squared, silu or identity)")
            })
    }
}
