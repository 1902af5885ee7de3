use serde::{Deserialize, Serialize};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * tanh(softplus(x))`
    Mish,
    /// `x` for `x > 0`, `exp(x) - 1` otherwise (alpha = 1).
    Elu,
}

// Above this, tanh(softplus(x)) rounds to 1 and sigmoid(x) to 1.
const MISH_LINEAR: f64 = 20.0;

/// `(tanh(softplus(x)), 1 - tanh^2, sigmoid(x))` from a single `exp`, using
/// `tanh(ln(1 + e)) = n / (n + 2)` with `n = e (e + 2)`.
#[inline]
fn mish_parts(x: f64) -> (f64, f64, f64) {
    let e = x.exp();
    let n = e * (e + 2.0);
    let d = n + 2.0;
    (n / d, 4.0 * (n + 1.0) / (d * d), e / (1.0 + e))
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => {
                if x > MISH_LINEAR {
                    x
                } else {
                    x * mish_parts(x).0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => {
                if x > MISH_LINEAR {
                    1.0
                } else {
                    let (th, sech2, sig) = mish_parts(x);
                    th + x * sech2 * sig
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Mish => "mish",
            Activation::Elu => "elu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mish" => Some(Activation::Mish),
            "elu" => Some(Activation::Elu),
            _ => None,
        }
    }
}
