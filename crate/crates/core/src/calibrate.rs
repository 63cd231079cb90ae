// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

//! The iterative MAP estimator (IMAPE) and the Gaussian least-squares
//! baseline.
//!
//! Each cycle updates, in order and for every frequency:
//!
//! 1. the Jones parameters θ, by weighted least squares (optionally tied
//!    across frequencies with consensus ADMM);
//! 2. the texture hyperparameters, by maximum likelihood on the current τ;
//! 3. the speckle covariance Ω, by its ML estimate divided by its trace;
//! 4. the textures τ, by their closed-form MAP values.
//!
//! The state after every cycle is a plain serialisable value, so a run can be
//! checkpointed and any cycle replayed from its predecessor with [`step`].

use std::path::Path;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::jones::{FrequencyModel, ThetaVector, VisibilitySet};
use crate::likelihood::{log_likelihood_conditional, log_likelihood_joint, residuals, speckle_ml, update_speckle, ResidualSet};
use crate::noise::{PriorFamily, SpeckleCovariance, TexturePrior};
use crate::scene::Scene;
use crate::solver::{consensus_admm, solve_theta, ConsensusModel, ConsensusOptions, SolverOptions, WeightedProblem};
use crate::texture::{fit_hyperparameters, map_texture, warm_start, Clamp};
use crate::{Error, Result, Vec4};

/// Observed visibilities together with the calibrator model at every
/// frequency.
#[derive(Clone, Debug)]
pub struct CalibrationData {
    pub frequencies_hz: Vec<f64>,
    pub models: Vec<FrequencyModel>,
    pub data: Vec<VisibilitySet>,
}

impl CalibrationData {
    /// Pairs one visibility set per scene frequency with the calibrator model.
    pub fn new(scene: &Scene, data: Vec<VisibilitySet>) -> Result<Self> {
        let models = scene
            .frequencies_hz
            .iter()
            .map(|&f| FrequencyModel::new(&scene.array, &scene.calibrators, f))
            .collect();
        Self::from_parts(models, data)
    }

    pub fn from_parts(models: Vec<FrequencyModel>, data: Vec<VisibilitySet>) -> Result<Self> {
        if models.is_empty() || models.len() != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} visibility sets for {} frequencies",
                data.len(),
                models.len()
            )));
        }
        for (m, x) in models.iter().zip(&data) {
            if m.n_ants() != x.n_ants || m.n_baselines() != x.n_baselines() {
                return Err(Error::DimensionMismatch(format!(
                    "visibilities for {} antennas, model has {}",
                    x.n_ants,
                    m.n_ants()
                )));
            }
            if m.n_dirs() != models[0].n_dirs() || m.n_ants() != models[0].n_ants() {
                return Err(Error::DimensionMismatch("frequencies disagree on the array or sky".into()));
            }
        }
        Ok(Self {
            frequencies_hz: models.iter().map(|m| m.frequency_hz).collect(),
            models,
            data,
        })
    }

    pub fn n_frequencies(&self) -> usize {
        self.models.len()
    }

    pub fn n_baselines(&self) -> usize {
        self.models[0].n_baselines()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImapeOptions {
    pub max_cycles: usize,
    /// Stop once the largest relative change of θ over a cycle is below this.
    pub tolerance: f64,
    pub solver: SolverOptions,
    /// Tie frequencies together with consensus ADMM in step 1.
    pub consensus: Option<ConsensusOptions>,
    /// Keep Ω at its initial value (used by the least-squares baseline).
    pub freeze_speckle: bool,
    /// Evaluate `L_J` around each of steps 2 to 4 and keep the values in the
    /// cycle history.
    pub record_blocks: bool,
}

impl Default for ImapeOptions {
    fn default() -> Self {
        Self {
            max_cycles: 50,
            tolerance: 1e-6,
            solver: SolverOptions::default(),
            consensus: None,
            freeze_speckle: false,
            record_blocks: false,
        }
    }
}

/// `L_J` of one frequency around each block update of a cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLikelihoods {
    /// Whether step 2 was a maximum-likelihood fit (false for the warm start
    /// of the first cycle).
    pub hyper_ml: bool,
    pub before_hyper: f64,
    pub after_hyper: f64,
    /// With the raw (unnormalised) ML speckle covariance.
    pub after_omega_raw: Option<f64>,
    pub after_omega: f64,
    pub after_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    /// `L_J` per frequency at the end of the cycle.
    pub log_likelihood: Vec<f64>,
    /// Largest relative change of θ over the cycle.
    pub theta_step: f64,
    pub hyperparameters: Vec<Vec<f64>>,
    pub clamps: Vec<Option<Clamp>>,
    pub omega_condition: Vec<f64>,
    pub solver_iterations: Vec<usize>,
    pub blocks: Option<Vec<BlockLikelihoods>>,
}

/// Everything the estimator carries from one cycle to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub family: PriorFamily,
    pub thetas: Vec<ThetaVector>,
    pub tau: Vec<Vec<f64>>,
    pub omega: Vec<SpeckleCovariance>,
    pub priors: Vec<TexturePrior>,
    pub cycle: usize,
    pub converged: bool,
    pub history: Vec<CycleRecord>,
}

impl CalibrationState {
    /// `Ω = I/4`, `τ = 1`, default hyperparameters of `family`.
    pub fn initial(family: PriorFamily, thetas: Vec<ThetaVector>, n_baselines: usize) -> Self {
        let nf = thetas.len();
        Self {
            family,
            thetas,
            tau: vec![vec![1.0; n_baselines]; nf],
            omega: vec![SpeckleCovariance::scaled_identity(); nf],
            priors: vec![family.initial_prior(); nf],
            cycle: 0,
            converged: false,
            history: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Last recorded total `L_J`, summed over frequencies.
    pub fn log_likelihood(&self) -> Option<f64> {
        self.history.last().map(|r| r.log_likelihood.iter().sum())
    }
}

fn joint_log_likelihood(u: &[Vec4], tau: &[f64], omega: &SpeckleCovariance, prior: &TexturePrior) -> Result<f64> {
    let res = ResidualSet::new(u.to_vec(), omega)?;
    log_likelihood_joint(log_likelihood_conditional(&res, tau, omega)?, tau, prior)
}

fn relative_change(old: &ThetaVector, new: &ThetaVector) -> f64 {
    let (a, b) = (old.to_vec(), new.to_vec());
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

fn validate_state(data: &CalibrationData, state: &CalibrationState) -> Result<()> {
    let nf = data.n_frequencies();
    if state.thetas.len() != nf || state.tau.len() != nf || state.omega.len() != nf || state.priors.len() != nf {
        return Err(Error::DimensionMismatch(format!("state does not describe {nf} frequencies")));
    }
    for (m, t) in data.models.iter().zip(&state.thetas) {
        m.check_theta(t)?;
    }
    Ok(())
}

struct FrequencyUpdate {
    prior: TexturePrior,
    clamp: Option<Clamp>,
    omega: SpeckleCovariance,
    tau: Vec<f64>,
    blocks: Option<BlockLikelihoods>,
    log_likelihood: f64,
}

/// Steps 2 to 4 at one frequency, with θ already updated.
fn update_noise_model(
    family: PriorFamily,
    first_cycle: bool,
    u: &[Vec4],
    tau: &[f64],
    omega: &SpeckleCovariance,
    prior: &TexturePrior,
    opts: &ImapeOptions,
) -> Result<FrequencyUpdate> {
    let gaussian = family == PriorFamily::Gaussian;
    let before_hyper = if opts.record_blocks {
        Some(joint_log_likelihood(u, tau, omega, prior)?)
    } else {
        None
    };

    // Step 2. With τ still at its initial constant value the ML fit is
    // degenerate, so the first cycle uses the moment-matched warm start.
    let (prior, clamp) = if gaussian {
        (TexturePrior::GaussianFixed, None)
    } else if first_cycle {
        (warm_start(family, tau)?, None)
    } else {
        let fit = fit_hyperparameters(family, tau)?;
        (fit.prior, fit.clamp)
    };
    let after_hyper = if opts.record_blocks {
        Some(joint_log_likelihood(u, tau, omega, &prior)?)
    } else {
        None
    };

    // Step 3.
    let mut after_omega_raw = None;
    let omega = if opts.freeze_speckle {
        omega.clone()
    } else {
        if opts.record_blocks {
            after_omega_raw = speckle_ml(u, tau)
                .and_then(|raw| joint_log_likelihood(u, tau, &raw, &prior))
                .ok();
        }
        match update_speckle(u, tau).and_then(|w| w.whitener().map(|_| w)) {
            Ok(w) => w,
            Err(e) => {
                warn!("speckle update rejected ({e}); keeping the previous covariance");
                omega.clone()
            }
        }
    };

    let after_omega = if opts.record_blocks {
        Some(joint_log_likelihood(u, tau, &omega, &prior)?)
    } else {
        None
    };

    // Step 4.
    let res = ResidualSet::new(u.to_vec(), &omega)?;
    let tau: Vec<f64> = if gaussian {
        tau.to_vec()
    } else {
        res.q.iter().map(|&q| map_texture(&prior, q)).collect()
    };
    let log_likelihood = log_likelihood_joint(log_likelihood_conditional(&res, &tau, &omega)?, &tau, &prior)?;

    let blocks = match (before_hyper, after_hyper, after_omega) {
        (Some(before_hyper), Some(after_hyper), Some(after_omega)) => Some(BlockLikelihoods {
            hyper_ml: !gaussian && !first_cycle,
            before_hyper,
            after_hyper,
            after_omega_raw,
            after_omega,
            after_tau: log_likelihood,
        }),
        _ => None,
    };
    Ok(FrequencyUpdate {
        prior,
        clamp,
        omega,
        tau,
        blocks,
        log_likelihood,
    })
}

/// Runs one full cycle in place and returns its record.
pub fn step(data: &CalibrationData, state: &mut CalibrationState, opts: &ImapeOptions) -> Result<CycleRecord> {
    let cycle = state.cycle + 1;
    step_inner(data, state, opts).map_err(|e| Error::Cycle {
        cycle,
        source: Box::new(e),
    })
}

fn step_inner(data: &CalibrationData, state: &mut CalibrationState, opts: &ImapeOptions) -> Result<CycleRecord> {
    validate_state(data, state)?;
    let nf = data.n_frequencies();
    let first_cycle = state.cycle == 0;

    // Step 1.
    let problems: Vec<WeightedProblem> = (0..nf)
        .map(|f| WeightedProblem::new(&data.data[f], &state.tau[f], &state.omega[f], &data.models[f]))
        .collect::<Result<_>>()?;
    let (thetas, solver_iterations): (Vec<ThetaVector>, Vec<usize>) = match &opts.consensus {
        Some(copts) => {
            let cm = ConsensusModel::new(&data.frequencies_hz, copts.order, copts.rho)?;
            let report = consensus_admm(&problems, &state.thetas, &cm, &opts.solver, copts)?;
            let iters = vec![report.iterations; nf];
            (report.thetas, iters)
        }
        None => problems
            .par_iter()
            .zip(state.thetas.par_iter())
            .map(|(p, t)| solve_theta(p, t, &opts.solver).map(|r| (r.theta, r.iterations)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
    };
    let theta_step = state
        .thetas
        .iter()
        .zip(&thetas)
        .map(|(a, b)| relative_change(a, b))
        .fold(0.0, f64::max);

    // Steps 2 to 4.
    let updates: Vec<FrequencyUpdate> = (0..nf)
        .into_par_iter()
        .map(|f| {
            let u = residuals(&data.data[f], &thetas[f], &data.models[f])?;
            update_noise_model(
                state.family,
                first_cycle,
                &u,
                &state.tau[f],
                &state.omega[f],
                &state.priors[f],
                opts,
            )
        })
        .collect::<Result<_>>()?;

    let record = CycleRecord {
        cycle: state.cycle + 1,
        log_likelihood: updates.iter().map(|u| u.log_likelihood).collect(),
        theta_step,
        hyperparameters: updates.iter().map(|u| u.prior.hyperparameters()).collect(),
        clamps: updates.iter().map(|u| u.clamp).collect(),
        omega_condition: updates.iter().map(|u| u.omega.condition_number()).collect(),
        solver_iterations,
        blocks: if opts.record_blocks {
            Some(updates.iter().filter_map(|u| u.blocks.clone()).collect())
        } else {
            None
        },
    };
    state.thetas = thetas;
    for (f, u) in updates.into_iter().enumerate() {
        state.priors[f] = u.prior;
        state.omega[f] = u.omega;
        state.tau[f] = u.tau;
    }
    state.cycle += 1;
    state.converged = theta_step < opts.tolerance;
    info!(
        "cycle={} L_J={:.6e} theta_step={:.3e} hyper={:?} omega_condition={:?}",
        record.cycle,
        record.log_likelihood.iter().sum::<f64>(),
        record.theta_step,
        record.hyperparameters,
        record.omega_condition
    );
    state.history.push(record.clone());
    Ok(record)
}

/// Runs cycles from `state` until convergence or `opts.max_cycles`, calling
/// `on_cycle` after each one (used for checkpointing).
pub fn resume_imape<F>(data: &CalibrationData, mut state: CalibrationState, opts: &ImapeOptions, mut on_cycle: F) -> Result<CalibrationState>
where
    F: FnMut(&CalibrationState) -> Result<()>,
{
    if !(opts.tolerance > 0.0) {
        return Err(Error::InvalidParameter("cycle tolerance must be positive".into()));
    }
    opts.solver.validate()?;
    while !state.converged && state.cycle < opts.max_cycles {
        step(data, &mut state, opts)?;
        on_cycle(&state)?;
    }
    debug!(
        "{} finished after {} cycles (converged: {})",
        state.family, state.cycle, state.converged
    );
    Ok(state)
}

/// The full estimator for one texture family, starting from `theta_init`
/// (one vector per frequency).
pub fn run_imape(data: &CalibrationData, family: PriorFamily, theta_init: &[ThetaVector], opts: &ImapeOptions) -> Result<CalibrationState> {
    if theta_init.len() != data.n_frequencies() {
        return Err(Error::DimensionMismatch(format!(
            "{} initial vectors for {} frequencies",
            theta_init.len(),
            data.n_frequencies()
        )));
    }
    let state = CalibrationState::initial(family, theta_init.to_vec(), data.n_baselines());
    resume_imape(data, state, opts, |_| Ok(()))
}

/// Unweighted least squares: Gaussian family with Ω frozen at `I/4`.
pub fn run_gaussian_ls(data: &CalibrationData, theta_init: &[ThetaVector], opts: &ImapeOptions) -> Result<CalibrationState> {
    let opts = ImapeOptions {
        freeze_speckle: true,
        ..opts.clone()
    };
    run_imape(data, PriorFamily::Gaussian, theta_init, &opts)
}
