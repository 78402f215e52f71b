//! Activation functions together with their antiderivatives.
//!
//! The Hamiltonian uses the antiderivative `sigma_tilde`; the dynamics only
//! ever see `sigma = sigma_tilde'`. Each entry also carries its Lipschitz
//! constant, which the rank repair uses to size perturbations.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use super::linalg::Vector;
use super::quadrature::integrate_from_zero;
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    /// `(1 + e^{-x})^{-1}`
    Logistic,
    Softplus,
    Relu,
    /// Gaussian radial basis function `e^{-x^2/2} / sqrt(2 pi)`.
    Rbf,
    /// `sigma(x) = x`. Polynomial, so it is excluded from [`Activation::REGISTERED`];
    /// it exists to make the network linear in tests.
    Identity,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    /// Entries satisfying the non-polynomial, Lipschitz requirements.
    pub const REGISTERED: [Activation; 5] = [
        Activation::Tanh,
        Activation::Logistic,
        Activation::Softplus,
        Activation::Relu,
        Activation::Rbf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Logistic => "logistic",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
            Activation::Rbf => "rbf",
            Activation::Identity => "identity",
        }
    }

    #[inline]
    pub fn sigma(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Logistic => logistic(x),
            Activation::Softplus => softplus(x),
            Activation::Relu => x.max(0.0),
            Activation::Rbf => INV_SQRT_2PI * (-0.5 * x * x).exp(),
            Activation::Identity => x,
        }
    }

    /// Derivative of `sigma`. ReLU uses `sigma'(0) = 0`.
    #[inline]
    pub fn sigma_prime(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Logistic => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            Activation::Softplus => logistic(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Rbf => -x * INV_SQRT_2PI * (-0.5 * x * x).exp(),
            Activation::Identity => 1.0,
        }
    }

    /// Antiderivative of `sigma`, normalized as listed per variant.
    pub fn sigma_tilde(self, x: f64) -> f64 {
        match self {
            // log cosh, zero at the origin
            Activation::Tanh => log_cosh(x),
            Activation::Logistic => softplus(x),
            // no elementary closed form; zero at the origin
            Activation::Softplus => integrate_from_zero(softplus, x),
            Activation::Relu => {
                if x > 0.0 {
                    0.5 * x * x
                } else {
                    0.0
                }
            }
            Activation::Rbf => 0.5 * statrs::function::erf::erf(x / std::f64::consts::SQRT_2),
            Activation::Identity => 0.5 * x * x,
        }
    }

    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
            Activation::Logistic => 0.25,
            Activation::Softplus => 1.0,
            Activation::Relu => 1.0,
            Activation::Rbf => 1.0 / (2.0 * PI * std::f64::consts::E).sqrt(),
            Activation::Identity => 1.0,
        }
    }

    /// Bounded, with distinct finite limits at both infinities.
    pub fn is_sigmoidal(self) -> bool {
        matches!(self, Activation::Tanh | Activation::Logistic)
    }

    pub fn is_polynomial(self) -> bool {
        matches!(self, Activation::Identity)
    }

    /// Non-differentiable points of `sigma`.
    pub fn has_kink(self) -> bool {
        matches!(self, Activation::Relu)
    }

    pub fn apply(self, v: &Vector) -> Vector {
        v.map(|x| self.sigma(x))
    }

    pub fn apply_prime(self, v: &Vector) -> Vector {
        v.map(|x| self.sigma_prime(x))
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "logistic" | "sigmoid" => Ok(Activation::Logistic),
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            "rbf" => Ok(Activation::Rbf),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> impl Iterator<Item = f64> {
        (0..=100).map(|i| -4.0 + 0.08 * i as f64)
    }

    #[test]
    fn apply_examples() {
        let zero = Vector::zeros(2);
        assert_eq!(Activation::Tanh.apply(&zero), zero);
        assert_eq!(Activation::Logistic.sigma(0.0), 0.5);
        // tanh(1) reference value
        assert_eq!(Activation::Tanh.sigma(1.0), 0.7615941559557649);
    }

    #[test]
    fn sigma_tilde_differentiates_to_sigma() {
        let step = 1e-5;
        for act in Activation::REGISTERED {
            for x in grid() {
                if act.has_kink() && x.abs() < step {
                    continue;
                }
                let fd = (act.sigma_tilde(x + step) - act.sigma_tilde(x - step)) / (2.0 * step);
                let s = act.sigma(x);
                assert!(
                    (fd - s).abs() <= 1e-6 * s.abs().max(1.0),
                    "{act} at {x}: fd {fd} vs sigma {s}"
                );
            }
        }
    }

    #[test]
    fn sigma_prime_matches_finite_difference() {
        let step = 1e-5;
        for act in Activation::REGISTERED {
            for x in grid() {
                if act.has_kink() && x.abs() < 2.0 * step {
                    continue;
                }
                let fd = (act.sigma(x + step) - act.sigma(x - step)) / (2.0 * step);
                let d = act.sigma_prime(x);
                assert!(
                    (fd - d).abs() <= 1e-6 * d.abs().max(1.0),
                    "{act} at {x}: fd {fd} vs sigma' {d}"
                );
            }
        }
    }

    #[test]
    fn lipschitz_constants_hold_and_are_tight() {
        for act in Activation::REGISTERED {
            let l = act.lipschitz();
            let mut best: f64 = 0.0;
            for a in grid() {
                for b in grid() {
                    if a != b {
                        let ratio = (act.sigma(a) - act.sigma(b)).abs() / (a - b).abs();
                        assert!(ratio <= l * (1.0 + 1e-12), "{act}: {ratio} > {l}");
                        best = best.max(ratio);
                    }
                }
            }
            assert!(best > 0.95 * l, "{act}: constant {l} is loose ({best})");
            assert!(!act.is_polynomial());
        }
    }

    #[test]
    fn relu_kink_convention() {
        assert_eq!(Activation::Relu.sigma_prime(0.0), 0.0);
        assert_eq!(Activation::Relu.sigma_tilde(-3.0), 0.0);
        assert_eq!(Activation::Relu.sigma_tilde(2.0), 2.0);
    }

    #[test]
    fn softplus_antiderivative_far_out() {
        // int_0^x softplus = x^2/2 + pi^2/12 - int_x^inf log(1+e^-t) dt, tail ~ e^-x
        let x = 30.0;
        let expected = 0.5 * x * x + PI * PI / 12.0;
        assert!((Activation::Softplus.sigma_tilde(x) - expected).abs() < 1e-9);
        assert!((Activation::Softplus.sigma_tilde(-30.0) + PI * PI / 12.0).abs() < 1e-9);
    }

    #[test]
    fn names_round_trip() {
        for act in Activation::REGISTERED {
            assert_eq!(act.name().parse::<Activation>().unwrap(), act);
        }
        assert!("cubic".parse::<Activation>().is_err());
    }
}
