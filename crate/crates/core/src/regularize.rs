//! Yosida regularization of the sign graph and its smoothed variants.
//!
//! `psi_eps` is the Moreau-Yosida envelope of `|r|`, `phi_eps` its derivative
//! (the Yosida approximation of `sgn`), and [`MollifiedSign`] the convolution
//! of `phi_eps` with a compactly supported polynomial bump.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

/// Regularization triple: Yosida parameter, viscosity, mollification width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegParams {
    pub eps: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub tau: f64,
}

impl RegParams {
    pub fn new(eps: f64, delta: f64, tau: f64) -> Result<Self> {
        let p = Self { eps, delta, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return param(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return param(format!("delta must be nonnegative, got {}", self.delta));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return param(format!("tau must be nonnegative, got {}", self.tau));
        }
        Ok(())
    }

    pub fn nonlinearity(&self) -> MollifiedSign {
        mollify_phi(self.eps, self.tau)
    }
}

pub fn psi_eps(r: f64, eps: f64) -> f64 {
    let a = r.abs();
    if a <= eps {
        r * r / (2.0 * eps)
    } else {
        a - eps / 2.0
    }
}

pub fn phi_eps(r: f64, eps: f64) -> f64 {
    if r.abs() <= eps {
        r / eps
    } else {
        r.signum()
    }
}

/// Derivative of [`phi_eps`]; the kink `|r| = eps` takes the interior value.
pub fn phi_eps_prime(r: f64, eps: f64) -> f64 {
    if r.abs() <= eps {
        1.0 / eps
    } else {
        0.0
    }
}

/// Resolvent `(1 + eps sgn)^{-1}` via `J r = r - eps * phi_eps(r)`.
pub fn resolvent_j(r: f64, eps: f64) -> f64 {
    if r.abs() <= eps {
        0.0
    } else {
        r - eps * r.signum()
    }
}

/// `∫_0^r s^[p-1] φ'_eps(s) ds = min(|r|, eps)^p / (p eps)`.
pub fn zeta(r: f64, p: f64, eps: f64) -> f64 {
    r.abs().min(eps).powf(p) / (p * eps)
}

/// Scalar monotone nonlinearity with an a.e. derivative, as consumed by the
/// implicit solvers.
pub trait Nonlinearity: Sync {
    fn value(&self, r: f64) -> f64;
    fn derivative(&self, r: f64) -> f64;
}

/// `phi_eps` convolved with the triweight bump of half-width `tau`
/// (`tau = 0` is `phi_eps` itself).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifiedSign {
    eps: f64,
    tau: f64,
}

pub fn mollify_phi(eps: f64, tau: f64) -> MollifiedSign {
    MollifiedSign { eps, tau }
}

// Triweight kernel (35/32)(1 - x^2)^3 on [-1, 1] and its first two moments.
fn kernel_mass(u: f64) -> f64 {
    let u = u.clamp(-1.0, 1.0);
    let (u2, u3) = (u * u, u * u * u);
    35.0 / 32.0 * (u - u3 + 0.6 * u3 * u2 - u3 * u2 * u2 / 7.0) + 0.5
}

fn kernel_first_moment(u: f64) -> f64 {
    let u = u.clamp(-1.0, 1.0);
    let u2 = u * u;
    let u4 = u2 * u2;
    35.0 / 32.0 * (u2 / 2.0 - 0.75 * u4 + u4 * u2 / 2.0 - u4 * u4 / 8.0 - 0.125)
}

impl MollifiedSign {
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `(max(·, 0) * bump)(r)`.
    fn smoothed_ramp(&self, r: f64) -> f64 {
        let t = self.tau;
        if r >= t {
            r
        } else if r <= -t {
            0.0
        } else {
            r * kernel_mass(r / t) - t * kernel_first_moment(r / t)
        }
    }

    fn smoothed_step(&self, r: f64) -> f64 {
        let t = self.tau;
        if r >= t {
            1.0
        } else if r <= -t {
            0.0
        } else {
            kernel_mass(r / t)
        }
    }
}

impl Nonlinearity for MollifiedSign {
    fn value(&self, r: f64) -> f64 {
        if self.tau == 0.0 {
            return phi_eps(r, self.eps);
        }
        if r.abs() >= self.eps + self.tau {
            return r.signum();
        }
        // phi_eps(r) = (ramp(r + eps) - ramp(r - eps)) / eps - 1
        (self.smoothed_ramp(r + self.eps) - self.smoothed_ramp(r - self.eps)) / self.eps - 1.0
    }

    fn derivative(&self, r: f64) -> f64 {
        if self.tau == 0.0 {
            return phi_eps_prime(r, self.eps);
        }
        (self.smoothed_step(r + self.eps) - self.smoothed_step(r - self.eps)) / self.eps
    }
}
