// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

//! Closed-form MAP texture updates and maximum-likelihood hyperparameter
//! updates for every texture prior family.
//!
//! Each texture update maximises, for one baseline with quadratic form
//! `q = uᴴ Ω⁻¹ u`,
//!
//! ```text
//! h(τ) = −q/τ − N ln τ + ln p(τ; φ)
//! ```
//!
//! where `N` is [`DATA_DIM`]. Setting `h'(τ) = 0` gives a quadratic in `τ`
//! for every family; the constants below are written in terms of `N`.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::noise::{PriorFamily, TexturePrior};
use crate::{Error, Result, DATA_DIM};

/// Lower bound on every texture estimate.
pub const TAU_FLOOR: f64 = 1e-8;
/// Bracket for the gamma / inverse-gamma shape parameter.
pub const SHAPE_MIN: f64 = 1e-3;
pub const SHAPE_MAX: f64 = 1e3;
/// Cap on the inverse-Gaussian shape and Laplace rate.
pub const RATE_MAX: f64 = 1e8;

const N: f64 = DATA_DIM as f64;

/// Gamma texture: positive root of `τ² + (N+1−a) b τ − b q = 0`.
pub fn tau_k(shape: f64, scale: f64, q: f64) -> f64 {
    let lin = (shape - (N + 1.0)) * scale;
    let disc = (lin * lin + 4.0 * scale * q).sqrt();
    let root = if lin >= 0.0 {
        (lin + disc) / 2.0
    } else {
        // lin < 0: rationalise to avoid cancellation.
        2.0 * scale * q / (disc - lin)
    };
    root.max(TAU_FLOOR)
}

/// Inverse-gamma texture: `(b + q) / (a + N + 1)`.
pub fn tau_student(shape: f64, scale: f64, q: f64) -> f64 {
    ((scale + q) / (shape + N + 1.0)).max(TAU_FLOOR)
}

/// Inverse-gamma texture with unit shape.
pub fn tau_cauchy(scale: f64, q: f64) -> f64 {
    tau_student(1.0, scale, q)
}

/// Exponential texture: positive root of `λτ² + Nτ − q = 0`.
pub fn tau_laplace(rate: f64, q: f64) -> f64 {
    let disc = (N * N + 4.0 * rate * q).sqrt();
    (2.0 * q / (disc + N)).max(TAU_FLOOR)
}

/// Unit-mean inverse-Gaussian texture: positive root of
/// `λτ² + (2N+3)τ − (2q + λ) = 0`.
pub fn tau_igcg(shape: f64, q: f64) -> f64 {
    let lin = 2.0 * N + 3.0;
    let c = 2.0 * q + shape;
    let disc = (lin * lin + 4.0 * shape * c).sqrt();
    (2.0 * c / (disc + lin)).max(TAU_FLOOR)
}

/// MAP texture for the active prior; the Gaussian family keeps `τ ≡ 1`.
pub fn map_texture(prior: &TexturePrior, q: f64) -> f64 {
    match *prior {
        TexturePrior::KGamma { shape, scale } => tau_k(shape, scale, q),
        TexturePrior::StudentT { shape, scale } => tau_student(shape, scale, q),
        TexturePrior::Cauchy { scale } => tau_cauchy(scale, q),
        TexturePrior::Laplace { rate } => tau_laplace(rate, q),
        TexturePrior::InverseGaussian { shape } => tau_igcg(shape, q),
        TexturePrior::GaussianFixed => 1.0,
    }
}

/// Digamma `Ψ(x) = d ln Γ(x) / dx` for `x > 0`: upward recurrence to
/// `x ≥ 6`, then the asymptotic series.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma needs a finite positive argument, got {x}")));
    }
    Ok(digamma_positive(x))
}

fn digamma_positive(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// Trigamma `Ψ'(x)` for `x > 0`, same scheme as [`digamma`].
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("trigamma needs a finite positive argument, got {x}")));
    }
    Ok(trigamma_positive(x))
}

fn trigamma_positive(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    acc + series
}

/// Why a hyperparameter landed on a bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clamp {
    /// Texture spread collapsed (e.g. all τ equal); effectively Gaussian.
    Upper,
    Lower,
}

/// Shape/scale fit of a gamma or inverse-gamma texture sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeScaleFit {
    pub shape: f64,
    pub scale: f64,
    pub clamp: Option<Clamp>,
}

/// Solves `ln a − Ψ(a) = stat` on `[SHAPE_MIN, SHAPE_MAX]`. The left side
/// decreases monotonically from +∞ to 0, so a positive statistic is
/// bracketed unless it falls outside the values at the ends.
fn solve_shape(stat: f64) -> (f64, Option<Clamp>) {
    let g = |a: f64| a.ln() - digamma_positive(a) - stat;
    if !(stat.is_finite()) || g(SHAPE_MAX) >= 0.0 {
        return (SHAPE_MAX, Some(Clamp::Upper));
    }
    if g(SHAPE_MIN) <= 0.0 {
        return (SHAPE_MIN, Some(Clamp::Lower));
    }
    let (mut lo, mut hi) = (SHAPE_MIN, SHAPE_MAX);
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut a = 0.5 * (lo + hi);
    for _ in 0..5 {
        let ga = g(a);
        let slope = 1.0 / a - trigamma_positive(a);
        if ga == 0.0 || slope == 0.0 {
            break;
        }
        let next = a - ga / slope;
        if !(next > lo && next < hi) || g(next).abs() >= ga.abs() {
            break;
        }
        a = next;
    }
    (a, None)
}

fn check_positive(tau: &[f64]) -> Result<()> {
    if tau.is_empty() {
        return Err(Error::InvalidParameter("no texture values to fit".into()));
    }
    if let Some(t) = tau.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::Domain(format!("texture must be positive and finite, got {t}")));
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Gamma ML: `b̂ = Σ τ / (B â)` with `â` solving
/// `−B Ψ(a) + Σ ln τ − B ln(Σ τ / (B a)) = 0`.
pub fn hyper_k(tau: &[f64]) -> Result<ShapeScaleFit> {
    check_positive(tau)?;
    let b = tau.len();
    let mean_tau = mean(tau.iter().copied(), b);
    let stat = (mean_tau.ln() - mean(tau.iter().map(|t| t.ln()), b)).max(0.0);
    let (shape, clamp) = solve_shape(stat);
    if clamp == Some(Clamp::Upper) {
        debug!("texture variance collapsed; effectively Gaussian (gamma shape clamped to {shape})");
    }
    Ok(ShapeScaleFit {
        shape,
        scale: mean_tau / shape,
        clamp,
    })
}

/// Residual of the gamma shape equation, `B`-scaled.
pub fn hyper_k_residual(tau: &[f64], shape: f64) -> f64 {
    let b = tau.len() as f64;
    let sum: f64 = tau.iter().sum();
    -b * digamma_positive(shape) + tau.iter().map(|t| t.ln()).sum::<f64>() - b * (sum / (b * shape)).ln()
}

/// Inverse-gamma ML: `b̂ = B â / Σ (1/τ)` with `â` solving
/// `−B Ψ(a) − Σ ln τ + B ln b̂ = 0`.
pub fn hyper_student(tau: &[f64]) -> Result<ShapeScaleFit> {
    check_positive(tau)?;
    let b = tau.len();
    let inv_sum: f64 = tau.iter().map(|t| 1.0 / t).sum();
    let ln_harmonic = (b as f64 / inv_sum).ln();
    let stat = (mean(tau.iter().map(|t| t.ln()), b) - ln_harmonic).max(0.0);
    let (shape, clamp) = solve_shape(stat);
    if clamp == Some(Clamp::Upper) {
        debug!("texture variance collapsed; effectively Gaussian (inverse-gamma shape clamped to {shape})");
    }
    Ok(ShapeScaleFit {
        shape,
        scale: b as f64 * shape / inv_sum,
        clamp,
    })
}

/// Residual of the inverse-gamma shape equation, `B`-scaled, with `b̂`
/// substituted.
pub fn hyper_student_residual(tau: &[f64], shape: f64) -> f64 {
    let b = tau.len() as f64;
    let inv_sum: f64 = tau.iter().map(|t| 1.0 / t).sum();
    let scale = b * shape / inv_sum;
    -b * digamma_positive(shape) - tau.iter().map(|t| t.ln()).sum::<f64>() + b * scale.ln()
}

/// Inverse-gamma scale with the shape pinned to 1: `b̂ = B / Σ (1/τ)`.
pub fn hyper_cauchy(tau: &[f64]) -> Result<f64> {
    check_positive(tau)?;
    Ok(tau.len() as f64 / tau.iter().map(|t| 1.0 / t).sum::<f64>())
}

/// Exponential ML: `λ̂ = B / Σ τ`.
pub fn hyper_laplace(tau: &[f64]) -> Result<f64> {
    check_positive(tau)?;
    Ok(tau.len() as f64 / tau.iter().sum::<f64>())
}

/// Unit-mean inverse-Gaussian ML: `λ̂ = B / Σ (τ − 1)²/τ`, capped at
/// [`RATE_MAX`].
pub fn hyper_igcg(tau: &[f64]) -> Result<(f64, Option<Clamp>)> {
    check_positive(tau)?;
    let denom: f64 = tau.iter().map(|t| (t - 1.0).powi(2) / t).sum();
    let lambda = tau.len() as f64 / denom;
    if !(lambda <= RATE_MAX) {
        debug!("texture variance collapsed; inverse-Gaussian shape clamped to {RATE_MAX}");
        return Ok((RATE_MAX, Some(Clamp::Upper)));
    }
    Ok((lambda, None))
}

/// Result of a hyperparameter update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperFit {
    pub prior: TexturePrior,
    pub clamp: Option<Clamp>,
}

/// ML hyperparameters of `family` given the current textures.
pub fn fit_hyperparameters(family: PriorFamily, tau: &[f64]) -> Result<HyperFit> {
    let (prior, clamp) = match family {
        PriorFamily::K => {
            let fit = hyper_k(tau)?;
            (TexturePrior::KGamma { shape: fit.shape, scale: fit.scale }, fit.clamp)
        }
        PriorFamily::Student => {
            let fit = hyper_student(tau)?;
            (TexturePrior::StudentT { shape: fit.shape, scale: fit.scale }, fit.clamp)
        }
        PriorFamily::Cauchy => (TexturePrior::Cauchy { scale: hyper_cauchy(tau)? }, None),
        PriorFamily::Laplace => (TexturePrior::Laplace { rate: hyper_laplace(tau)? }, None),
        PriorFamily::Igcg => {
            let (shape, clamp) = hyper_igcg(tau)?;
            (TexturePrior::InverseGaussian { shape }, clamp)
        }
        PriorFamily::Gaussian => (TexturePrior::GaussianFixed, None),
    };
    Ok(HyperFit { prior, clamp })
}

/// Hyperparameters used before any informative texture exists: shape 2 for
/// the gamma/inverse-gamma families with the scale matched to the sample
/// mean, rate/scale from the sample for the one-parameter families.
pub fn warm_start(family: PriorFamily, tau: &[f64]) -> Result<TexturePrior> {
    check_positive(tau)?;
    const SHAPE0: f64 = 2.0;
    let mean_tau = mean(tau.iter().copied(), tau.len());
    Ok(match family {
        // Gamma mean a·b.
        PriorFamily::K => TexturePrior::KGamma {
            shape: SHAPE0,
            scale: mean_tau / SHAPE0,
        },
        // Inverse-gamma mean b/(a−1).
        PriorFamily::Student => TexturePrior::StudentT {
            shape: SHAPE0,
            scale: mean_tau * (SHAPE0 - 1.0),
        },
        PriorFamily::Cauchy => TexturePrior::Cauchy { scale: hyper_cauchy(tau)? },
        PriorFamily::Laplace => TexturePrior::Laplace { rate: hyper_laplace(tau)? },
        PriorFamily::Igcg => TexturePrior::InverseGaussian { shape: 1.0 },
        PriorFamily::Gaussian => TexturePrior::GaussianFixed,
    })
}
