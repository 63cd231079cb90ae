// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

//! Per-frequency estimation of the Jones parameters for fixed texture and
//! speckle covariance, and a consensus ADMM layer that ties frequencies
//! together through a polynomial in normalised frequency.
//!
//! The per-frequency problem minimises
//!
//! ```text
//! f(θ) = Σ_pq u_pq(θ)ᴴ Ω⁻¹ u_pq(θ) / τ_pq  =  ‖r(θ)‖²,   r_pq = L⁻¹ u_pq / √τ_pq
//! ```
//!
//! (the θ-dependent part of `−L_C`) with a damped Gauss-Newton method on the
//! stacked real and imaginary parts of `r`. The Jacobian is assembled
//! analytically, baseline by baseline; each baseline touches only the
//! Faraday and phase parameters of its two antennas plus their gains.

use log::{debug, trace};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::jones::{faraday_derivative, predict_all, vec2x2, FrequencyModel, JonesFactors, ThetaVector, VisibilitySet};
use crate::noise::{SpeckleCovariance, Whitener};
use crate::scene::baseline_pairs;
use crate::{Error, Mat2, Result, Vec4, C64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once every Jacobian column is this close to orthogonal to the
    /// residual (cosine test, invariant to scaling of the objective).
    pub gradient_tolerance: f64,
    /// Initial damping relative to the largest diagonal entry of `JᵀJ`.
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Stop once `‖δ‖ ≤ step_tolerance · (‖θ‖ + step_tolerance)`.
    pub step_tolerance: f64,
    /// Pin `φ_{i,1} = 0` for every direction (reference-antenna gauge).
    pub fix_reference_phase: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-12,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 1.0 / 3.0,
            step_tolerance: 1e-12,
            fix_reference_phase: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gradient_tolerance,
            self.initial_damping,
            self.damping_up,
            self.damping_down,
            self.step_tolerance,
        ];
        if positive.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::InvalidParameter("solver tolerances and damping factors must be positive".into()));
        }
        if !(self.damping_up > 1.0 && self.damping_down < 1.0) {
            return Err(Error::InvalidParameter("need damping_up > 1 > damping_down".into()));
        }
        Ok(())
    }
}

/// One line of the solver trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Gradient,
    Step,
    ZeroObjective,
    MaxIterations,
    Stalled,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub theta: ThetaVector,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Vec<IterationRecord>,
}

/// Quadratic pull `(ρ/2)‖θ − center‖²` added by the consensus layer.
#[derive(Clone, Debug)]
pub struct Proximal {
    pub rho: f64,
    pub center: Vec<f64>,
}

/// The weighted least-squares problem at one frequency.
#[derive(Clone, Debug)]
pub struct WeightedProblem<'a> {
    model: &'a FrequencyModel,
    data: &'a VisibilitySet,
    inv_sqrt_tau: Vec<f64>,
    whitener: Whitener,
}

struct Linearization {
    objective: f64,
    /// `JᵀJ`
    normal: DMatrix<f64>,
    /// `Jᵀr`
    jtr: DVector<f64>,
}

impl<'a> WeightedProblem<'a> {
    pub fn new(data: &'a VisibilitySet, tau: &[f64], omega: &SpeckleCovariance, model: &'a FrequencyModel) -> Result<Self> {
        if data.n_baselines() != model.n_baselines() {
            return Err(Error::DimensionMismatch(format!(
                "data has {} baselines, model has {}",
                data.n_baselines(),
                model.n_baselines()
            )));
        }
        if tau.len() != data.n_baselines() {
            return Err(Error::DimensionMismatch(format!(
                "{} textures for {} baselines",
                tau.len(),
                data.n_baselines()
            )));
        }
        if let Some(t) = tau.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::Domain(format!("texture must be positive, got {t}")));
        }
        Ok(Self {
            model,
            data,
            inv_sqrt_tau: tau.iter().map(|t| 1.0 / t.sqrt()).collect(),
            whitener: omega.whitener()?,
        })
    }

    pub fn model(&self) -> &FrequencyModel {
        self.model
    }

    /// `Σ_pq q_pq(θ) / τ_pq`.
    pub fn objective(&self, theta: &ThetaVector) -> Result<f64> {
        let predicted = predict_all(theta, self.model)?;
        Ok(self
            .data
            .data
            .iter()
            .zip(&predicted.data)
            .zip(&self.inv_sqrt_tau)
            .map(|((x, s), w)| self.whitener.quadratic_form(&(x - s)) * w * w)
            .sum())
    }

    /// Analytic gradient of [`WeightedProblem::objective`] in the real
    /// parameterisation.
    pub fn gradient(&self, theta: &ThetaVector) -> Result<Vec<f64>> {
        self.model.check_theta(theta)?;
        let lin = self.linearize(theta);
        Ok(lin.jtr.iter().map(|g| 2.0 * g).collect())
    }

    fn whiten_real(&self, v: &Vec4, weight: f64, out: &mut [f64; 8]) {
        let w = self.whitener.apply(v);
        for k in 0..4 {
            out[k] = w[k].re * weight;
            out[k + 4] = w[k].im * weight;
        }
    }

    fn linearize(&self, theta: &ThetaVector) -> Linearization {
        let n_dirs = self.model.n_dirs();
        let n_ants = self.model.n_ants();
        let dm = n_dirs * n_ants;
        let dim = theta.dim();

        struct Factors {
            jones: Mat2,
            /// `H Z F`
            core: Mat2,
            /// `G H Z dF/dϑ`
            d_faraday: Mat2,
        }
        let factors: Vec<Factors> = (0..n_dirs)
            .flat_map(|i| (0..n_ants).map(move |p| (i, p)))
            .map(|(i, p)| {
                let f = JonesFactors::new(theta, self.model, i, p);
                Factors {
                    jones: f.jones(),
                    core: f.hz * f.rotation,
                    d_faraday: f.gain * f.hz * faraday_derivative(f.angle),
                }
            })
            .collect();

        let mut normal = DMatrix::<f64>::zeros(dim, dim);
        let mut jtr = DVector::<f64>::zeros(dim);
        let mut objective = 0.0;
        let mut cols: Vec<(usize, [f64; 8])> = Vec::with_capacity(4 * n_dirs + 8);
        let zero = C64::new(0.0, 0.0);
        let j = C64::new(0.0, 1.0);

        for (k, (p, q)) in baseline_pairs(n_ants).enumerate() {
            let weight = self.inv_sqrt_tau[k];
            cols.clear();
            let mut model_sum = Mat2::zeros();
            let mut w_p = Mat2::zeros();
            let mut v_q = Mat2::zeros();
            for i in 0..n_dirs {
                let fp = &factors[i * n_ants + p];
                let fq = &factors[i * n_ants + q];
                let c = self.model.coherency(i);
                let k_q = c * fq.jones.adjoint();
                let p_p = fp.jones * c;
                let s = fp.jones * k_q;
                model_sum += s;
                w_p += fp.core * k_q;
                v_q += p_p * fq.core.adjoint();

                let mut buf = [0.0; 8];
                // u = x − s, so every derivative enters with a minus sign.
                self.whiten_real(&vec2x2(&(fp.d_faraday * k_q)), -weight, &mut buf);
                cols.push((i * n_ants + p, buf));
                self.whiten_real(&vec2x2(&(p_p * fq.d_faraday.adjoint())), -weight, &mut buf);
                cols.push((i * n_ants + q, buf));
                let vs = vec2x2(&s) * j;
                self.whiten_real(&vs, -weight, &mut buf);
                cols.push((dm + i * n_ants + p, buf));
                self.whiten_real(&vs, weight, &mut buf);
                cols.push((dm + i * n_ants + q, buf));
            }
            for r in 0..2 {
                // ∂/∂g_{p,r}: keep row r of W_p.
                let row = if r == 0 {
                    Vec4::new(w_p[(0, 0)], zero, w_p[(0, 1)], zero)
                } else {
                    Vec4::new(zero, w_p[(1, 0)], zero, w_p[(1, 1)])
                };
                // ∂/∂g_{q,r}^*: keep column r of V_q.
                let col = if r == 0 {
                    Vec4::new(v_q[(0, 0)], v_q[(1, 0)], zero, zero)
                } else {
                    Vec4::new(zero, zero, v_q[(0, 1)], v_q[(1, 1)])
                };
                let mut buf = [0.0; 8];
                let base_p = 2 * dm + 4 * p + 2 * r;
                let base_q = 2 * dm + 4 * q + 2 * r;
                self.whiten_real(&row, -weight, &mut buf);
                cols.push((base_p, buf));
                self.whiten_real(&(row * j), -weight, &mut buf);
                cols.push((base_p + 1, buf));
                self.whiten_real(&col, -weight, &mut buf);
                cols.push((base_q, buf));
                self.whiten_real(&(col * -j), -weight, &mut buf);
                cols.push((base_q + 1, buf));
            }

            let mut resid = [0.0; 8];
            self.whiten_real(&(self.data.data[k] - vec2x2(&model_sum)), weight, &mut resid);
            objective += resid.iter().map(|x| x * x).sum::<f64>();
            for (a, (ca, va)) in cols.iter().enumerate() {
                jtr[*ca] += dot8(va, &resid);
                for (cb, vb) in &cols[a..] {
                    let d = dot8(va, vb);
                    normal[(*ca, *cb)] += d;
                    if ca != cb {
                        normal[(*cb, *ca)] += d;
                    }
                }
            }
        }
        Linearization { objective, normal, jtr }
    }
}

fn dot8(a: &[f64; 8], b: &[f64; 8]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn reference_phase_columns(n_dirs: usize, n_ants: usize) -> Vec<usize> {
    (0..n_dirs).map(|i| n_dirs * n_ants + i * n_ants).collect()
}

/// Damped Gauss-Newton (Levenberg-Marquardt) on the weighted residuals.
pub fn solve_theta(problem: &WeightedProblem, init: &ThetaVector, opts: &SolverOptions) -> Result<SolveReport> {
    solve_theta_proximal(problem, init, None, opts)
}

/// [`solve_theta`] with an optional proximal term, as used by the
/// consensus θ-update.
pub fn solve_theta_proximal(
    problem: &WeightedProblem,
    init: &ThetaVector,
    proximal: Option<&Proximal>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    opts.validate()?;
    problem.model.check_theta(init)?;
    if !init.is_finite() {
        return Err(Error::InvalidParameter("initial parameters are not finite".into()));
    }
    let (n_dirs, n_ants) = (init.n_dirs(), init.n_ants());
    let dim = init.dim();
    if let Some(prox) = proximal {
        if prox.center.len() != dim || !(prox.rho >= 0.0) {
            return Err(Error::DimensionMismatch("proximal centre has the wrong length".into()));
        }
    }
    let frozen = if opts.fix_reference_phase {
        reference_phase_columns(n_dirs, n_ants)
    } else {
        Vec::new()
    };

    let mut theta_vec = init.to_vec();
    for &c in &frozen {
        theta_vec[c] = 0.0;
    }
    let mut theta = ThetaVector::from_slice(n_dirs, n_ants, &theta_vec)?;

    let total = |theta: &ThetaVector, v: &[f64]| -> Result<f64> {
        let mut f = problem.objective(theta)?;
        if let Some(prox) = proximal {
            f += 0.5 * prox.rho * v.iter().zip(&prox.center).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(f)
    };
    let linearize = |theta: &ThetaVector, v: &[f64]| -> Linearization {
        let mut lin = problem.linearize(theta);
        if let Some(prox) = proximal {
            // Residual rows √(ρ/2)(θ − c).
            let half = 0.5 * prox.rho;
            for k in 0..dim {
                lin.normal[(k, k)] += half;
                lin.jtr[k] += half * (v[k] - prox.center[k]);
                lin.objective += half * (v[k] - prox.center[k]).powi(2);
            }
        }
        for &c in &frozen {
            lin.normal.row_mut(c).fill(0.0);
            lin.normal.column_mut(c).fill(0.0);
            lin.normal[(c, c)] = 1.0;
            lin.jtr[c] = 0.0;
        }
        lin
    };

    let initial_objective = total(&theta, &theta_vec)?;
    if !initial_objective.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut lin = linearize(&theta, &theta_vec);
    let max_diag = (0..dim).map(|k| lin.normal[(k, k)]).fold(0.0, f64::max);
    let mut damping = opts.initial_damping * if max_diag > 0.0 { max_diag } else { 1.0 };
    let damping_ceiling = 1e16 * max_diag.max(1.0);
    let mut objective = initial_objective;
    let mut trace_log = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iterations {
        if objective == 0.0 {
            termination = Termination::ZeroObjective;
            break;
        }
        let grad_inf = lin.jtr.amax();
        let cosine = (0..dim)
            .filter(|&k| lin.normal[(k, k)] > 0.0)
            .map(|k| lin.jtr[k].abs() / (lin.normal[(k, k)] * objective).sqrt())
            .fold(0.0, f64::max);
        if cosine <= opts.gradient_tolerance {
            termination = Termination::Gradient;
            break;
        }
        iterations += 1;
        loop {
            let mut damped = lin.normal.clone();
            for k in 0..dim {
                damped[(k, k)] += damping;
            }
            let step = match damped.cholesky() {
                Some(chol) => chol.solve(&(-&lin.jtr)),
                None => {
                    damping *= opts.damping_up;
                    if damping > damping_ceiling {
                        termination = Termination::Stalled;
                        break 'outer;
                    }
                    continue;
                }
            };
            let theta_norm = theta_vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            if step.norm() <= opts.step_tolerance * (theta_norm + opts.step_tolerance) {
                termination = Termination::Step;
                break 'outer;
            }
            let candidate_vec: Vec<f64> = theta_vec.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            let candidate = ThetaVector::from_slice(n_dirs, n_ants, &candidate_vec)?;
            let value = total(&candidate, &candidate_vec)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteObjective { iteration: iterations });
            }
            let accepted = value < objective;
            trace!(
                "solver iteration={} objective={:e} gradient={:e} damping={:e} accepted={}",
                iterations,
                value,
                2.0 * grad_inf,
                damping,
                accepted
            );
            trace_log.push(IterationRecord {
                iteration: iterations,
                objective: if accepted { value } else { objective },
                gradient_norm: 2.0 * grad_inf,
                damping,
                accepted,
            });
            if accepted {
                theta_vec = candidate_vec;
                theta = candidate;
                objective = value;
                lin = linearize(&theta, &theta_vec);
                damping *= opts.damping_down;
                break;
            }
            damping *= opts.damping_up;
            if damping > damping_ceiling {
                termination = Termination::Stalled;
                break 'outer;
            }
        }
    }
    debug!(
        "solver finished after {} iterations ({:?}): objective {:e} -> {:e}",
        iterations, termination, initial_objective, objective
    );
    Ok(SolveReport {
        theta,
        initial_objective,
        objective,
        iterations,
        termination,
        trace: trace_log,
    })
}

/// Polynomial frequency model for the consensus layer.
#[derive(Clone, Debug)]
pub struct ConsensusModel {
    pub order: usize,
    pub rho: f64,
    /// Frequencies mapped onto `[-1, 1]`.
    pub normalized: Vec<f64>,
    /// `F × (P+1)` matrix of monomials.
    pub basis: DMatrix<f64>,
    /// `(BᵀB)⁻¹ Bᵀ`
    projector: DMatrix<f64>,
}

impl ConsensusModel {
    pub fn new(frequencies_hz: &[f64], order: usize, rho: f64) -> Result<Self> {
        if frequencies_hz.is_empty() {
            return Err(Error::InvalidParameter("consensus needs at least one frequency".into()));
        }
        if !(rho > 0.0) {
            return Err(Error::InvalidParameter(format!("penalty must be positive, got {rho}")));
        }
        let lo = frequencies_hz.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = frequencies_hz.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let normalized: Vec<f64> = frequencies_hz
            .iter()
            .map(|f| if hi > lo { 2.0 * (f - lo) / (hi - lo) - 1.0 } else { 0.0 })
            .collect();
        let basis = DMatrix::from_fn(normalized.len(), order + 1, |r, c| normalized[r].powi(c as i32));
        let gram = basis.transpose() * &basis;
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let (emin, emax) = (eig.min(), eig.max());
        if !(emin > 1e-12 * emax) {
            return Err(Error::InvalidParameter(format!(
                "polynomial basis of order {order} is rank deficient on {} distinct frequencies",
                {
                    let mut f = frequencies_hz.to_vec();
                    f.sort_by(f64::total_cmp);
                    f.dedup();
                    f.len()
                }
            )));
        }
        let projector = gram.try_inverse().expect("full-rank gram matrix") * basis.transpose();
        Ok(Self {
            order,
            rho,
            normalized,
            basis,
            projector,
        })
    }

    pub fn n_frequencies(&self) -> usize {
        self.normalized.len()
    }

    /// `B_f z` for every frequency; `z` is `(P+1) × dim`.
    fn evaluate(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        &self.basis * z
    }

    /// Least-squares coefficients for per-frequency targets (`F × dim`).
    fn fit(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        &self.projector * targets
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusOptions {
    pub order: usize,
    pub rho: f64,
    pub max_iterations: usize,
    /// Stop when both the primal residual `max_f ‖θ_f − B_f z‖` and the dual
    /// residual `ρ max_f ‖B_f (z − z_prev)‖` fall below this.
    pub tolerance: f64,
}

impl Default for ConsensusOptions {
    fn default() -> Self {
        Self {
            order: 2,
            rho: 1.0,
            max_iterations: 200,
            tolerance: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusRecord {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Clone, Debug)]
pub struct ConsensusReport {
    pub thetas: Vec<ThetaVector>,
    /// Polynomial coefficients, `(P+1) × dim`.
    pub coefficients: DMatrix<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    pub history: Vec<ConsensusRecord>,
}

fn row_norm(m: &DMatrix<f64>, r: usize) -> f64 {
    m.row(r).norm()
}

/// Consensus ADMM over frequencies: (i) proximal θ-update per frequency,
/// (ii) least-squares polynomial fit, (iii) dual ascent.
pub fn consensus_admm(
    problems: &[WeightedProblem],
    init: &[ThetaVector],
    model: &ConsensusModel,
    solver: &SolverOptions,
    opts: &ConsensusOptions,
) -> Result<ConsensusReport> {
    let nf = model.n_frequencies();
    if problems.len() != nf || init.len() != nf {
        return Err(Error::DimensionMismatch(format!(
            "{} problems and {} initial vectors for {nf} frequencies",
            problems.len(),
            init.len()
        )));
    }
    let dim = init[0].dim();
    let rho = model.rho;

    let mut thetas: Vec<ThetaVector> = init.to_vec();
    let mut theta_mat = DMatrix::from_fn(nf, dim, |_, _| 0.0);
    for (f, t) in thetas.iter().enumerate() {
        theta_mat.row_mut(f).copy_from_slice(&t.to_vec());
    }
    let mut duals = DMatrix::<f64>::zeros(nf, dim);
    let mut z = model.fit(&theta_mat);
    let mut history = Vec::new();
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let consensus = model.evaluate(&z);
        for (f, problem) in problems.iter().enumerate() {
            let center: Vec<f64> = (0..dim).map(|c| consensus[(f, c)] - duals[(f, c)] / rho).collect();
            let prox = Proximal { rho, center };
            let report = solve_theta_proximal(problem, &thetas[f], Some(&prox), solver)?;
            theta_mat.row_mut(f).copy_from_slice(&report.theta.to_vec());
            thetas[f] = report.theta;
        }
        let z_prev = z;
        z = model.fit(&(&theta_mat + &duals / rho));
        let consensus = model.evaluate(&z);
        let gap = &theta_mat - &consensus;
        duals += &gap * rho;
        let shift = model.evaluate(&(&z - &z_prev));
        primal = (0..nf).map(|f| row_norm(&gap, f)).fold(0.0, f64::max);
        dual = rho * (0..nf).map(|f| row_norm(&shift, f)).fold(0.0, f64::max);
        debug!("admm iteration={iterations} primal={primal:e} dual={dual:e}");
        history.push(ConsensusRecord {
            iteration: iterations,
            primal_residual: primal,
            dual_residual: dual,
        });
        if primal < opts.tolerance && dual < opts.tolerance {
            converged = true;
            break;
        }
    }
    Ok(ConsensusReport {
        thetas,
        coefficients: z,
        iterations,
        primal_residual: primal,
        dual_residual: dual,
        converged,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jones::predict_all;
    use crate::noise::circular_normal;
    use crate::scene::make_scene;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_theta(r: &mut ChaCha8Rng, n_dirs: usize, n_ants: usize) -> ThetaVector {
        let mut t = ThetaVector::identity(n_dirs, n_ants);
        for a in t.faraday.iter_mut() {
            *a = r.random_range(-0.5..0.5);
        }
        for a in t.phase.iter_mut() {
            *a = r.random_range(-3.0..3.0);
        }
        for g in t.gains.iter_mut() {
            for z in g.iter_mut() {
                *z = C64::from_polar(r.random_range(0.8..1.2), r.random_range(-3.0..3.0));
            }
        }
        t
    }

    fn random_covariance(r: &mut ChaCha8Rng) -> SpeckleCovariance {
        let a = crate::Mat4::from_fn(|_, _| circular_normal(r));
        SpeckleCovariance::new(a * a.adjoint() + crate::Mat4::identity() * C64::new(0.2, 0.0))
            .unwrap()
            .normalized()
            .unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let scene = make_scene(1, 5, 2, 0).unwrap();
        let model = FrequencyModel::new(&scene.array, &scene.calibrators, 150e6);
        let truth = random_theta(&mut r, 2, 5);
        let mut x = predict_all(&truth, &model).unwrap();
        for v in x.data.iter_mut() {
            for z in v.iter_mut() {
                *z += circular_normal(&mut r) * 0.1;
            }
        }
        let tau: Vec<f64> = (0..10).map(|_| r.random_range(0.2..3.0)).collect();
        let omega = random_covariance(&mut r);
        let problem = WeightedProblem::new(&x, &tau, &omega, &model).unwrap();
        let theta = random_theta(&mut r, 2, 5);
        let grad = problem.gradient(&theta).unwrap();
        let v = theta.to_vec();
        let h = 1e-6;
        let fd: Vec<f64> = (0..v.len())
            .map(|k| {
                let mut a = v.clone();
                let mut b = v.clone();
                a[k] += h;
                b[k] -= h;
                let fa = problem.objective(&ThetaVector::from_slice(2, 5, &a).unwrap()).unwrap();
                let fb = problem.objective(&ThetaVector::from_slice(2, 5, &b).unwrap()).unwrap();
                (fa - fb) / (2.0 * h)
            })
            .collect();
        let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-5, "relative error {}", diff / norm);
    }

    #[test]
    fn objective_zero_at_truth() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let scene = make_scene(2, 6, 2, 0).unwrap();
        let model = FrequencyModel::new(&scene.array, &scene.calibrators, 150e6);
        let truth = random_theta(&mut r, 2, 6);
        let x = predict_all(&truth, &model).unwrap();
        let problem = WeightedProblem::new(&x, &[1.0; 15], &SpeckleCovariance::scaled_identity(), &model).unwrap();
        assert!(problem.objective(&truth).unwrap() < 1e-24);
        let g = problem.gradient(&truth).unwrap();
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-10);
        assert!(problem.objective(&random_theta(&mut r, 2, 6)).unwrap() >= 0.0);
    }

    #[test]
    fn zero_iterations_returns_init() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let scene = make_scene(3, 4, 1, 0).unwrap();
        let model = FrequencyModel::new(&scene.array, &scene.calibrators, 150e6);
        let x = predict_all(&random_theta(&mut r, 1, 4), &model).unwrap();
        let problem = WeightedProblem::new(&x, &[1.0; 6], &SpeckleCovariance::scaled_identity(), &model).unwrap();
        let init = random_theta(&mut r, 1, 4);
        let opts = SolverOptions {
            max_iterations: 0,
            ..SolverOptions::default()
        };
        let report = solve_theta(&problem, &init, &opts).unwrap();
        assert_eq!(report.theta, init);
        assert_eq!(report.objective, report.initial_objective);
    }

    #[test]
    fn descent_is_monotone() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let scene = make_scene(4, 8, 2, 0).unwrap();
        let model = FrequencyModel::new(&scene.array, &scene.calibrators, 150e6);
        let truth = random_theta(&mut r, 2, 8);
        let mut x = predict_all(&truth, &model).unwrap();
        for v in x.data.iter_mut() {
            for z in v.iter_mut() {
                *z += circular_normal(&mut r) * 0.05;
            }
        }
        let problem = WeightedProblem::new(&x, &[1.0; 28], &SpeckleCovariance::scaled_identity(), &model).unwrap();
        let mut init = truth.clone();
        for a in init.phase.iter_mut() {
            *a += r.random_range(-0.2..0.2);
        }
        let report = solve_theta(&problem, &init, &SolverOptions::default()).unwrap();
        assert!(report.objective <= report.initial_objective);
        let accepted: Vec<f64> = report.trace.iter().filter(|t| t.accepted).map(|t| t.objective).collect();
        for w in accepted.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn reference_gauge_pins_phases() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let scene = make_scene(5, 6, 2, 0).unwrap();
        let model = FrequencyModel::new(&scene.array, &scene.calibrators, 150e6);
        let x = predict_all(&random_theta(&mut r, 2, 6), &model).unwrap();
        let problem = WeightedProblem::new(&x, &[1.0; 15], &SpeckleCovariance::scaled_identity(), &model).unwrap();
        let opts = SolverOptions {
            fix_reference_phase: true,
            max_iterations: 20,
            ..SolverOptions::default()
        };
        let report = solve_theta(&problem, &random_theta(&mut r, 2, 6), &opts).unwrap();
        assert_eq!(report.theta.phase_at(0, 0), 0.0);
        assert_eq!(report.theta.phase_at(1, 0), 0.0);
    }

    #[test]
    fn consensus_model_rank() {
        assert!(ConsensusModel::new(&[1.0, 2.0], 2, 1.0).is_err());
        assert!(ConsensusModel::new(&[1.0, 1.0, 1.0], 1, 1.0).is_err());
        assert!(ConsensusModel::new(&[], 0, 1.0).is_err());
        assert!(ConsensusModel::new(&[1.0, 2.0, 3.0], 2, 0.0).is_err());
        let m = ConsensusModel::new(&[100.0, 150.0, 200.0], 2, 1.0).unwrap();
        assert_eq!(m.normalized, vec![-1.0, 0.0, 1.0]);
        let single = ConsensusModel::new(&[150e6], 0, 1.0).unwrap();
        assert_eq!(single.normalized, vec![0.0]);
    }

    #[test]
    fn single_frequency_consensus_is_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let scene = make_scene(6, 6, 2, 0).unwrap();
        let model = FrequencyModel::new(&scene.array, &scene.calibrators, 150e6);
        let truth = random_theta(&mut r, 2, 6);
        let x = predict_all(&truth, &model).unwrap();
        let problem = WeightedProblem::new(&x, &[1.0; 15], &SpeckleCovariance::scaled_identity(), &model).unwrap();
        let mut init = truth.clone();
        for a in init.faraday.iter_mut() {
            *a += r.random_range(-0.01..0.01);
        }
        let cm = ConsensusModel::new(&[150e6], 0, 1.0).unwrap();
        let report = consensus_admm(
            &[problem],
            &[init],
            &cm,
            &SolverOptions::default(),
            &ConsensusOptions::default(),
        )
        .unwrap();
        assert!(report.converged);
        let fitted = &cm.basis * &report.coefficients;
        let gap: f64 = report.thetas[0]
            .to_vec()
            .iter()
            .zip(fitted.row(0).iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(gap < 1e-7);
    }
}
