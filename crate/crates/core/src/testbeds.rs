//! Builtin stochastic test functions with known mean and noise surfaces.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Additive floor on the 2d noise surface so the sampler and the
/// log-variance parameterization never see an exact zero.
pub const TOY2D_NOISE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Testbed {
    Toy1d,
    Toy2d,
}

impl Testbed {
    pub fn by_name(name: &str) -> Result<Testbed> {
        match name {
            "toy1d" => Ok(Testbed::Toy1d),
            "toy2d" => Ok(Testbed::Toy2d),
            other => Err(Error::Config(format!(
                "unknown builtin testbed '{other}' (available: toy1d, toy2d)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Testbed::Toy1d => "toy1d",
            Testbed::Toy2d => "toy2d",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Testbed::Toy1d => 1,
            Testbed::Toy2d => 2,
        }
    }

    /// Noiseless mean surface.
    pub fn mean(&self, x: &[f64]) -> f64 {
        match self {
            Testbed::Toy1d => toy1d_mean(x[0]),
            Testbed::Toy2d => toy2d_mean(x[0], x[1]),
        }
    }

    /// True noise variance surface.
    pub fn noise_var(&self, x: &[f64]) -> f64 {
        match self {
            Testbed::Toy1d => toy1d_noise_var(x[0]),
            Testbed::Toy2d => toy2d_noise_var(x[0], x[1]),
        }
    }

    /// One stochastic draw: mean plus Gaussian noise with the surface
    /// variance.
    pub fn sample(&self, x: &[f64], rng: &mut ChaCha12Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean(x) + self.noise_var(x).sqrt() * z
    }
}

/// 1d mean: f(x) = (6x - 2)^2 sin(12x - 4).
pub fn toy1d_mean(x: f64) -> f64 {
    let a = 6.0 * x - 2.0;
    a * a * (12.0 * x - 4.0).sin()
}

/// 1d noise variance: r(x) = (1.1 + sin(2 pi x))^2.
pub fn toy1d_noise_var(x: f64) -> f64 {
    let s = 1.1 + (2.0 * PI * x).sin();
    s * s
}

/// One draw from the 1d testbed.
pub fn toy1d(x: f64, rng: &mut ChaCha12Rng) -> f64 {
    Testbed::Toy1d.sample(&[x], rng)
}

/// 2d mean with matched signal bumps on the diagonal:
/// f = 20 [ a1 exp(-(a1^2 + a2^2)) + a3 exp(-(a3^2 + a4^2)) ],
/// a1 = 6 x1 - 4.1, a2 = 6 x2 - 4.1, a3 = 6 x1 - 1.7, a4 = 6 x2 - 1.7.
pub fn toy2d_mean(x1: f64, x2: f64) -> f64 {
    let a1 = 6.0 * x1 - 4.1;
    let a2 = 6.0 * x2 - 4.1;
    let a3 = 6.0 * x1 - 1.7;
    let a4 = 6.0 * x2 - 1.7;
    20.0 * (a1 / (a1 * a1 + a2 * a2).exp() + a3 / (a3 * a3 + a4 * a4).exp())
}

/// 2d noise variance: bivariate normal density with mean (0.7, 0.7) and
/// covariance 0.02 I, plus a small floor.
pub fn toy2d_noise_var(x1: f64, x2: f64) -> f64 {
    let sigma2 = 0.02;
    let q = ((x1 - 0.7) * (x1 - 0.7) + (x2 - 0.7) * (x2 - 0.7)) / (2.0 * sigma2);
    (1.0 / (2.0 * PI * sigma2)) * (-q).exp() + TOY2D_NOISE_FLOOR
}

/// One draw from the 2d testbed.
pub fn toy2d(x: &[f64; 2], rng: &mut ChaCha12Rng) -> f64 {
    Testbed::Toy2d.sample(x, rng)
}
