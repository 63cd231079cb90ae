// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

//! Residuals, conditional and joint log-likelihoods, and the speckle
//! covariance update.

use std::f64::consts::PI;

use crate::jones::{predict_all, FrequencyModel, ThetaVector, VisibilitySet};
use crate::noise::{SpeckleCovariance, TexturePrior, Whitener};
use crate::{Error, Mat4, Result, Vec4, C64, DATA_DIM};

/// Relative ridge added to a freshly estimated speckle covariance.
pub const SPECKLE_RIDGE: f64 = 1e-10;

/// `u_pq = x_pq − Σ_i s_{i,pq}(θ)` for every baseline.
pub fn residuals(x: &VisibilitySet, theta: &ThetaVector, model: &FrequencyModel) -> Result<Vec<Vec4>> {
    if x.n_baselines() != model.n_baselines() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} baselines, model has {}",
            x.n_baselines(),
            model.n_baselines()
        )));
    }
    let predicted = predict_all(theta, model)?;
    Ok(x.data.iter().zip(&predicted.data).map(|(a, b)| a - b).collect())
}

/// Residuals together with their quadratic forms `q_pq = u_pqᴴ Ω⁻¹ u_pq`.
#[derive(Clone, Debug)]
pub struct ResidualSet {
    pub u: Vec<Vec4>,
    pub q: Vec<f64>,
}

impl ResidualSet {
    pub fn new(u: Vec<Vec4>, omega: &SpeckleCovariance) -> Result<Self> {
        Ok(Self::with_whitener(u, &omega.whitener()?))
    }

    pub fn with_whitener(u: Vec<Vec4>, whitener: &Whitener) -> Self {
        let q = u.iter().map(|v| whitener.quadratic_form(v)).collect();
        Self { u, q }
    }

    pub fn n_baselines(&self) -> usize {
        self.u.len()
    }
}

fn check_tau(tau: &[f64], n: usize) -> Result<()> {
    if tau.len() != n {
        return Err(Error::DimensionMismatch(format!("{} textures for {n} baselines", tau.len())));
    }
    if let Some(t) = tau.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Domain(format!("texture must be positive, got {t}")));
    }
    Ok(())
}

/// `L_C = −Σ_pq [ q_pq/τ_pq + ln|π τ_pq Ω| ]` for one frequency.
pub fn log_likelihood_conditional(res: &ResidualSet, tau: &[f64], omega: &SpeckleCovariance) -> Result<f64> {
    check_tau(tau, res.n_baselines())?;
    let log_det = omega.whitener()?.log_det();
    let n = DATA_DIM as f64;
    Ok(-res
        .q
        .iter()
        .zip(tau)
        .map(|(q, t)| q / t + n * PI.ln() + n * t.ln() + log_det)
        .sum::<f64>())
}

/// `L_J = L_C + Σ_pq ln p(τ_pq; φ)`.
pub fn log_likelihood_joint(conditional: f64, tau: &[f64], prior: &TexturePrior) -> Result<f64> {
    prior.validate()?;
    let mut total = conditional;
    for &t in tau {
        total += prior.ln_density(t)?;
    }
    Ok(total)
}

/// Deterministic pairwise (tree) sum.
pub(crate) fn pairwise_sum(terms: &[Mat4]) -> Mat4 {
    match terms.len() {
        0 => Mat4::zeros(),
        1 => terms[0],
        n => {
            let (a, b) = terms.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// `(1/B) Σ_pq u_pq u_pqᴴ / τ_pq`, the maximiser of `L_C` in `Ω` before
/// trace normalisation.
pub fn speckle_ml(u: &[Vec4], tau: &[f64]) -> Result<SpeckleCovariance> {
    check_tau(tau, u.len())?;
    if u.is_empty() {
        return Err(Error::DegenerateCovariance);
    }
    let terms: Vec<Mat4> = u
        .iter()
        .zip(tau)
        .map(|(v, t)| v * v.adjoint() * C64::new(1.0 / t, 0.0))
        .collect();
    let sum = pairwise_sum(&terms) * C64::new(1.0 / u.len() as f64, 0.0);
    // Outer products are Hermitian by construction; symmetrise rounding.
    SpeckleCovariance::new((sum + sum.adjoint()) * C64::new(0.5, 0.0))
}

/// Speckle update: [`speckle_ml`] divided by its trace, with a ridge of
/// `SPECKLE_RIDGE` (relative to the trace) so it can be inverted, and
/// renormalised to unit trace.
pub fn update_speckle(u: &[Vec4], tau: &[f64]) -> Result<SpeckleCovariance> {
    let raw = speckle_ml(u, tau)?;
    let tr = raw.trace();
    if !(tr > 0.0) {
        return Err(Error::DegenerateCovariance);
    }
    let ridged = raw.matrix() * C64::new(1.0 / tr, 0.0) + Mat4::identity() * C64::new(SPECKLE_RIDGE, 0.0);
    SpeckleCovariance::new(ridged)?.normalized()
}
