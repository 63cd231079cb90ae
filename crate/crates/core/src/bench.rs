// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

//! Monte-Carlo comparison of estimators: MSE of selected parameters as a
//! function of SNR.
//!
//! A sweep draws the array and calibrators once from the master seed. Every
//! `(SNR, trial)` pair then gets its own sub-seed, from which the true
//! parameters, the background sources, their effects and the thermal noise
//! are drawn. Rows are gathered in `(SNR, trial, estimator)` order whatever
//! the thread schedule, so the CSV output only depends on the configuration.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{run_gaussian_ls, run_imape, CalibrationData, CalibrationState, ImapeOptions};
use crate::jones::{predict_all, wrap_angle, FrequencyModel, ThetaVector, VisibilitySet};
use crate::noise::{background_visibilities, contaminate, sigma_for_snr, snr_db, substream_seed, BackgroundEffects, PriorFamily};
use crate::scene::{draw_background, generate_scene, Scene, SceneConfig};
use crate::{Error, Result, C64};

/// An estimator taking part in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    Imape(PriorFamily),
    GaussianLs,
}

impl Estimator {
    /// The five robust variants followed by the least-squares baseline.
    pub fn all() -> Vec<Estimator> {
        PriorFamily::TEXTURED
            .iter()
            .map(|&f| Estimator::Imape(f))
            .chain(std::iter::once(Estimator::GaussianLs))
            .collect()
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Imape(family) => write!(f, "imape-{family}"),
            Estimator::GaussianLs => write!(f, "gaussian-ls"),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "gaussian-ls" {
            return Ok(Estimator::GaussianLs);
        }
        match s.strip_prefix("imape-") {
            Some(family) => Ok(Estimator::Imape(family.parse()?)),
            None => Err(Error::Parse(format!("unknown estimator '{s}'"))),
        }
    }
}

impl TryFrom<String> for Estimator {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> String {
        e.to_string()
    }
}

/// A parameter whose squared error is reported. Indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrackedParameter {
    GainReal { antenna: usize, component: usize },
    GainImag { antenna: usize, component: usize },
    Phase { direction: usize, antenna: usize },
    Faraday { direction: usize, antenna: usize },
}

impl TrackedParameter {
    pub fn label(&self) -> String {
        match *self {
            TrackedParameter::GainReal { antenna, component } => format!("gain_re[{antenna},{component}]"),
            TrackedParameter::GainImag { antenna, component } => format!("gain_im[{antenna},{component}]"),
            TrackedParameter::Phase { direction, antenna } => format!("phase[{direction},{antenna}]"),
            TrackedParameter::Faraday { direction, antenna } => format!("faraday[{direction},{antenna}]"),
        }
    }

    fn check(&self, n_dirs: usize, n_ants: usize) -> Result<()> {
        let ok = match *self {
            TrackedParameter::GainReal { antenna, component } | TrackedParameter::GainImag { antenna, component } => {
                (1..=n_ants).contains(&antenna) && (1..=2).contains(&component)
            }
            TrackedParameter::Phase { direction, antenna } | TrackedParameter::Faraday { direction, antenna } => {
                (1..=n_dirs).contains(&direction) && (1..=n_ants).contains(&antenna)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "tracked parameter {} is outside {n_dirs} directions and {n_ants} antennas",
                self.label()
            )))
        }
    }

    /// Squared error of an (already aligned) estimate; angles are compared
    /// modulo 2π.
    pub fn squared_error(&self, estimate: &ThetaVector, truth: &ThetaVector) -> f64 {
        let d = match *self {
            TrackedParameter::GainReal { antenna, component } => {
                estimate.gains[antenna - 1][component - 1].re - truth.gains[antenna - 1][component - 1].re
            }
            TrackedParameter::GainImag { antenna, component } => {
                estimate.gains[antenna - 1][component - 1].im - truth.gains[antenna - 1][component - 1].im
            }
            TrackedParameter::Phase { direction, antenna } => {
                wrap_angle(estimate.phase_at(direction - 1, antenna - 1) - truth.phase_at(direction - 1, antenna - 1))
            }
            TrackedParameter::Faraday { direction, antenna } => wrap_angle(
                estimate.faraday_at(direction - 1, antenna - 1) - truth.faraday_at(direction - 1, antenna - 1),
            ),
        };
        d * d
    }
}

/// How the true parameters of each trial are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpread {
    /// Gain amplitudes are uniform in `[1 − a, 1 + a]`.
    pub gain_amplitude: f64,
    /// Gain phases are uniform in `[−s, s]`.
    pub gain_phase: f64,
    pub phase: f64,
    pub faraday: f64,
}

impl Default for TruthSpread {
    fn default() -> Self {
        Self {
            gain_amplitude: 0.2,
            gain_phase: PI,
            phase: PI,
            faraday: 0.5,
        }
    }
}

/// Starting point of every estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitMode {
    /// Least-squares solution from the identity parameters.
    Cold,
    /// Truth plus independent uniform perturbations of each real component
    /// in `[−scale, scale]`.
    Perturbed { scale: f64 },
}

impl InitMode {
    pub fn label(&self) -> String {
        match self {
            InitMode::Cold => "cold".into(),
            InitMode::Perturbed { scale } => format!("perturbed({scale})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub snr_grid_db: Vec<f64>,
    pub trials: usize,
    pub estimators: Vec<Estimator>,
    pub tracked: Vec<TrackedParameter>,
    pub truth: TruthSpread,
    pub init: InitMode,
    pub background_effects: BackgroundEffects,
    pub imape: ImapeOptions,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            snr_grid_db: (0..=8).map(|k| -10.0 + 5.0 * k as f64).collect(),
            trials: 200,
            estimators: Estimator::all(),
            tracked: vec![
                TrackedParameter::GainImag { antenna: 3, component: 1 },
                TrackedParameter::Phase { direction: 1, antenna: 2 },
            ],
            truth: TruthSpread::default(),
            init: InitMode::Perturbed { scale: 0.1 },
            background_effects: BackgroundEffects::default(),
            imape: ImapeOptions::default(),
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.trials == 0 {
            return Err(Error::InvalidParameter("need at least one trial".into()));
        }
        if self.snr_grid_db.is_empty() {
            return Err(Error::InvalidParameter("SNR grid is empty".into()));
        }
        if self.snr_grid_db.iter().any(|s| !s.is_finite()) || self.snr_grid_db.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("SNR grid must be finite and strictly increasing".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidParameter("no estimators configured".into()));
        }
        for t in &self.tracked {
            t.check(self.scene.calibrators, self.scene.antennas)?;
        }
        if let InitMode::Perturbed { scale } = self.init {
            if !(scale >= 0.0) {
                return Err(Error::InvalidParameter(format!("perturbation scale must be nonnegative, got {scale}")));
            }
        }
        self.imape.solver.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Seed of trial `trial` at SNR index `snr_index`.
    pub fn trial_seed(&self, snr_index: usize, trial: usize) -> u64 {
        substream_seed(substream_seed(self.seed, snr_index as u64 + 1), trial as u64)
    }

    /// Array and calibrators shared by every trial of the sweep.
    pub fn base_scene(&self) -> Result<Scene> {
        generate_scene(&SceneConfig {
            seed: substream_seed(self.seed, 0),
            ..self.scene.clone()
        })
    }
}

/// One estimator on one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub estimator: Estimator,
    pub snr_db: f64,
    /// SNR actually reached; above the target when the background alone is
    /// stronger than the allowed contamination.
    pub achieved_snr_db: f64,
    pub trial: usize,
    pub trial_seed: u64,
    pub init: String,
    pub cycles: usize,
    pub failed: bool,
    /// Squared error per tracked parameter, averaged over frequencies.
    pub squared_errors: Vec<f64>,
}

/// Wall time of one estimator run, kept apart from the rows so that the
/// result CSV is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub estimator: Estimator,
    pub snr_db: f64,
    pub trial: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<Timing>,
}

/// Draws true parameters for every antenna and calibrator direction.
pub fn draw_truth<R: Rng + ?Sized>(rng: &mut R, n_dirs: usize, n_ants: usize, spread: &TruthSpread) -> ThetaVector {
    let mut sym = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let mut theta = ThetaVector::identity(n_dirs, n_ants);
    for a in theta.faraday.iter_mut() {
        *a = sym(spread.faraday);
    }
    for a in theta.phase.iter_mut() {
        *a = sym(spread.phase);
    }
    for g in theta.gains.iter_mut() {
        for z in g.iter_mut() {
            *z = C64::from_polar(1.0 + sym(spread.gain_amplitude), sym(spread.gain_phase));
        }
    }
    theta
}

/// `θ + U(−scale, scale)` on every real component.
pub fn perturb<R: Rng + ?Sized>(rng: &mut R, theta: &ThetaVector, scale: f64) -> ThetaVector {
    let v: Vec<f64> = theta
        .to_vec()
        .into_iter()
        .map(|x| if scale > 0.0 { x + rng.random_range(-scale..=scale) } else { x })
        .collect();
    ThetaVector::from_slice(theta.n_dirs(), theta.n_ants(), &v).expect("same dimensions")
}

/// Gauge transformation: per-antenna `α_p` moved between gains and phases,
/// per-direction phase offset `β_i` and Faraday offset `γ_i`. None of them
/// changes the predicted visibilities of unpolarised calibrators.
pub fn apply_gauge(theta: &ThetaVector, alpha: &[f64], beta: &[f64], gamma: &[f64]) -> ThetaVector {
    let (d, m) = (theta.n_dirs(), theta.n_ants());
    let mut out = theta.clone();
    for i in 0..d {
        for p in 0..m {
            out.faraday[i * m + p] += gamma[i];
            out.phase[i * m + p] += beta[i] - alpha[p];
        }
    }
    for (p, g) in out.gains.iter_mut().enumerate() {
        let rot = C64::from_polar(1.0, alpha[p]);
        g[0] *= rot;
        g[1] *= rot;
    }
    out
}

fn gauge_residuals(estimate: &ThetaVector, truth: &ThetaVector) -> Vec<f64> {
    let mut r: Vec<f64> = estimate
        .faraday
        .iter()
        .zip(&truth.faraday)
        .chain(estimate.phase.iter().zip(&truth.phase))
        .map(|(a, b)| wrap_angle(a - b))
        .collect();
    for (a, b) in estimate.gains.iter().zip(&truth.gains) {
        for c in 0..2 {
            r.push(a[c].re - b[c].re);
            r.push(a[c].im - b[c].im);
        }
    }
    r
}

/// Euclidean distance between parameter vectors, angles taken modulo 2π.
pub fn parameter_error(estimate: &ThetaVector, truth: &ThetaVector) -> f64 {
    gauge_residuals(estimate, truth).iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn circular_mean(angles: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = angles.fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    if s == 0.0 && c == 0.0 {
        0.0
    } else {
        s.atan2(c)
    }
}

/// Moves `estimate` along the gauge directions of [`apply_gauge`] to the
/// point closest to `truth`. Never increases [`parameter_error`].
pub fn align(estimate: &ThetaVector, truth: &ThetaVector) -> Result<ThetaVector> {
    let (d, m) = (truth.n_dirs(), truth.n_ants());
    if estimate.n_dirs() != d || estimate.n_ants() != m {
        return Err(Error::DimensionMismatch("estimate and truth differ in shape".into()));
    }
    let cost = |g: &[f64]| -> f64 {
        let t = apply_gauge(estimate, &g[..m], &g[m..m + d], &g[m + d..]);
        gauge_residuals(&t, truth).iter().map(|x| x * x).sum()
    };

    // Closed-form start: match the gain phases, then the mean phase and
    // Faraday offsets per direction.
    let alpha: Vec<f64> = (0..m)
        .map(|p| {
            let z: C64 = (0..2).map(|c| truth.gains[p][c] * estimate.gains[p][c].conj()).sum();
            if z.norm() > 0.0 {
                z.arg()
            } else {
                0.0
            }
        })
        .collect();
    let beta: Vec<f64> = (0..d)
        .map(|i| circular_mean((0..m).map(|p| truth.phase_at(i, p) - estimate.phase_at(i, p) + alpha[p])))
        .collect();
    let gamma: Vec<f64> = (0..d)
        .map(|i| circular_mean((0..m).map(|p| truth.faraday_at(i, p) - estimate.faraday_at(i, p))))
        .collect();
    let zero = vec![0.0; m + 2 * d];
    let seeded: Vec<f64> = alpha.into_iter().chain(beta).chain(gamma).collect();
    let mut g = if cost(&seeded) < cost(&zero) { seeded } else { zero };
    let mut current = cost(&g);

    // Damped Gauss-Newton refinement on the gauge parameters.
    let n_res = 2 * d * m + 4 * m;
    let mut damping = 1e-3;
    for _ in 0..100 {
        if current == 0.0 {
            break;
        }
        let t = apply_gauge(estimate, &g[..m], &g[m..m + d], &g[m + d..]);
        let r = DVector::from_vec(gauge_residuals(&t, truth));
        let mut jac = DMatrix::<f64>::zeros(n_res, m + 2 * d);
        for i in 0..d {
            for p in 0..m {
                jac[(i * m + p, m + d + i)] = 1.0;
                jac[(d * m + i * m + p, p)] = -1.0;
                jac[(d * m + i * m + p, m + i)] = 1.0;
            }
        }
        for p in 0..m {
            for c in 0..2 {
                // d/dα (g e^{jα}) = j g e^{jα}
                let dz = t.gains[p][c] * C64::new(0.0, 1.0);
                let row = 2 * d * m + 4 * p + 2 * c;
                jac[(row, p)] = dz.re;
                jac[(row + 1, p)] = dz.im;
            }
        }
        let normal = jac.transpose() * &jac;
        let rhs = -(jac.transpose() * &r);
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = normal.clone();
            for k in 0..damped.nrows() {
                damped[(k, k)] += damping * (1.0 + normal[(k, k)]);
            }
            let Some(chol) = damped.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let delta = chol.solve(&rhs);
            let trial: Vec<f64> = g.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let value = cost(&trial);
            if value < current {
                let gain = current - value;
                g = trial;
                current = value;
                damping = (damping * 0.3).max(1e-12);
                improved = gain > 1e-15 * current.max(1e-300);
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(apply_gauge(estimate, &g[..m], &g[m..m + d], &g[m + d..]))
}

/// Simulated observation of one trial.
#[derive(Clone, Debug)]
pub struct TrialData {
    pub truth: ThetaVector,
    pub data: CalibrationData,
    pub achieved_snr_db: f64,
    pub sigma: Vec<f64>,
}

/// Draws the truth and background and contaminates the calibrator
/// visibilities to `snr_db` at every frequency.
pub fn simulate_trial(cfg: &ExperimentConfig, scene: &Scene, snr_db_target: f64, trial_seed: u64) -> Result<TrialData> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let truth = draw_truth(&mut rng, scene.calibrators.len(), scene.n_antennas(), &cfg.truth);
    let background = draw_background(&mut rng, &cfg.scene, &scene.calibrators)?;
    let b = scene.n_baselines();
    let mut models = Vec::new();
    let mut data = Vec::new();
    let mut sigmas = Vec::new();
    let (mut p_cal_total, mut p_bg_total) = (0.0, 0.0);
    for &f in &scene.frequencies_hz {
        let model = FrequencyModel::new(&scene.array, &scene.calibrators, f);
        let noiseless = predict_all(&truth, &model)?;
        let bg = background_visibilities(&scene.array, &background, &truth.gains, f, &cfg.background_effects, &mut rng)?;
        let (p_cal, p_bg) = (noiseless.power(), bg.power());
        let sigma = sigma_for_snr(p_cal, p_bg, b, snr_db_target).unwrap_or(0.0);
        p_cal_total += p_cal;
        p_bg_total += p_bg + crate::noise::NOISE_FACTOR * (crate::DATA_DIM * b) as f64 * sigma * sigma;
        data.push(contaminate(&noiseless, Some(&bg), sigma, &mut rng)?);
        models.push(model);
        sigmas.push(sigma);
    }
    Ok(TrialData {
        truth,
        data: CalibrationData::from_parts(models, data)?,
        achieved_snr_db: snr_db(p_cal_total, p_bg_total, b, 0.0),
        sigma: sigmas,
    })
}

/// Starting point shared by all estimators of a trial, per `cfg.init`.
pub fn initial_thetas(cfg: &ExperimentConfig, truth: &ThetaVector, data: &CalibrationData, trial_seed: u64) -> Result<Vec<ThetaVector>> {
    let nf = data.n_frequencies();
    match cfg.init {
        InitMode::Perturbed { scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(trial_seed, 1));
            Ok(vec![perturb(&mut rng, truth, scale); nf])
        }
        InitMode::Cold => {
            let identity = ThetaVector::identity(truth.n_dirs(), truth.n_ants());
            Ok(run_gaussian_ls(data, &vec![identity; nf], &cfg.imape)?.thetas)
        }
    }
}

/// Runs one estimator from `init`.
pub fn run_estimator(estimator: Estimator, data: &CalibrationData, init: &[ThetaVector], opts: &ImapeOptions) -> Result<CalibrationState> {
    match estimator {
        Estimator::Imape(family) => run_imape(data, family, init, opts),
        Estimator::GaussianLs => run_gaussian_ls(data, init, opts),
    }
}

/// Mean over frequencies of the squared error of each tracked parameter,
/// after aligning every estimate to the truth.
pub fn tracked_errors(cfg: &ExperimentConfig, estimates: &[ThetaVector], truth: &ThetaVector) -> Result<Vec<f64>> {
    let aligned: Vec<ThetaVector> = estimates.iter().map(|t| align(t, truth)).collect::<Result<_>>()?;
    Ok(cfg
        .tracked
        .iter()
        .map(|p| aligned.iter().map(|t| p.squared_error(t, truth)).sum::<f64>() / aligned.len() as f64)
        .collect())
}

/// Every configured estimator on a single trial; replayable in isolation
/// from `trial_seed`.
pub fn run_trial(
    cfg: &ExperimentConfig,
    scene: &Scene,
    snr_db_target: f64,
    trial: usize,
    trial_seed: u64,
) -> Result<(Vec<ResultRow>, Vec<Timing>)> {
    let sim = simulate_trial(cfg, scene, snr_db_target, trial_seed)?;
    let init = initial_thetas(cfg, &sim.truth, &sim.data, trial_seed)?;
    let mut rows = Vec::with_capacity(cfg.estimators.len());
    let mut timings = Vec::with_capacity(cfg.estimators.len());
    for &estimator in &cfg.estimators {
        let start = Instant::now();
        let outcome = run_estimator(estimator, &sim.data, &init, &cfg.imape)
            .and_then(|state| Ok((tracked_errors(cfg, &state.thetas, &sim.truth)?, state.cycle)));
        let seconds = start.elapsed().as_secs_f64();
        let (squared_errors, cycles, failed) = match outcome {
            Ok((e, c)) => (e, c, false),
            Err(e) => {
                warn!("{estimator} failed at {snr_db_target} dB, trial {trial} (seed {trial_seed}): {e}");
                (vec![f64::NAN; cfg.tracked.len()], 0, true)
            }
        };
        rows.push(ResultRow {
            estimator,
            snr_db: snr_db_target,
            achieved_snr_db: sim.achieved_snr_db,
            trial,
            trial_seed,
            init: cfg.init.label(),
            cycles,
            failed,
            squared_errors,
        });
        timings.push(Timing {
            estimator,
            snr_db: snr_db_target,
            trial,
            seconds,
        });
    }
    Ok((rows, timings))
}

/// The full experiment.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let scene = cfg.base_scene()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.snr_grid_db.len())
        .flat_map(|s| (0..cfg.trials).map(move |t| (s, t)))
        .collect();
    info!(
        "sweep: {} SNR points x {} trials x {} estimators",
        cfg.snr_grid_db.len(),
        cfg.trials,
        cfg.estimators.len()
    );
    let results: Vec<(Vec<ResultRow>, Vec<Timing>)> = jobs
        .par_iter()
        .map(|&(s, t)| run_trial(cfg, &scene, cfg.snr_grid_db[s], t, cfg.trial_seed(s, t)))
        .collect::<Result<_>>()?;
    let mut out = SweepOutput::default();
    for (rows, timings) in results {
        out.rows.extend(rows);
        out.timings.extend(timings);
    }
    Ok(out)
}

const FIXED_COLUMNS: [&str; 8] = [
    "estimator",
    "snr_db",
    "achieved_snr_db",
    "trial",
    "trial_seed",
    "init",
    "cycles",
    "failed",
];

/// Writes rows as CSV with one squared-error column per tracked parameter.
pub fn write_rows<W: Write>(writer: W, tracked: &[TrackedParameter], rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(tracked.iter().map(|t| format!("se_{}", t.label())))
        .collect();
    w.write_record(&header)?;
    for r in rows {
        if r.squared_errors.len() != tracked.len() {
            return Err(Error::DimensionMismatch("row and header disagree on tracked parameters".into()));
        }
        let mut rec = vec![
            r.estimator.to_string(),
            r.snr_db.to_string(),
            r.achieved_snr_db.to_string(),
            r.trial.to_string(),
            r.trial_seed.to_string(),
            r.init.clone(),
            r.cycles.to_string(),
            r.failed.to_string(),
        ];
        rec.extend(r.squared_errors.iter().map(|e| e.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: FromStr>(rec: &csv::StringRecord, k: usize) -> Result<T> {
    let s = rec.get(k).ok_or_else(|| Error::Parse(format!("missing column {k}")))?;
    s.parse().map_err(|_| Error::Parse(format!("bad value '{s}' in column {}", FIXED_COLUMNS.get(k).unwrap_or(&"error"))))
}

/// Parses [`write_rows`] output; returns the error-column labels and rows.
pub fn read_rows<R: Read>(reader: R) -> Result<(Vec<String>, Vec<ResultRow>)> {
    let mut rd = csv::Reader::from_reader(reader);
    let header = rd.headers()?.clone();
    if header.len() < FIXED_COLUMNS.len() || header.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b) {
        return Err(Error::Parse("unexpected CSV header".into()));
    }
    let labels: Vec<String> = header
        .iter()
        .skip(FIXED_COLUMNS.len())
        .map(|s| s.strip_prefix("se_").unwrap_or(s).to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let estimator: String = field(&rec, 0)?;
        rows.push(ResultRow {
            estimator: estimator.parse()?,
            snr_db: field(&rec, 1)?,
            achieved_snr_db: field(&rec, 2)?,
            trial: field(&rec, 3)?,
            trial_seed: field(&rec, 4)?,
            init: field(&rec, 5)?,
            cycles: field(&rec, 6)?,
            failed: field(&rec, 7)?,
            squared_errors: (FIXED_COLUMNS.len()..rec.len()).map(|k| field(&rec, k)).collect::<Result<_>>()?,
        });
    }
    Ok((labels, rows))
}

pub fn write_timings<W: Write>(writer: W, timings: &[Timing]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimator", "snr_db", "trial", "seconds"])?;
    for t in timings {
        w.write_record([
            t.estimator.to_string(),
            t.snr_db.to_string(),
            t.trial.to_string(),
            t.seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregated squared error of one parameter for one estimator at one SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub snr_db: f64,
    pub parameter: String,
    pub trials: usize,
    pub failures: usize,
    pub mean: f64,
    pub median: f64,
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and median squared error per (estimator, SNR, parameter). The
/// values are sorted before summation so that the result does not depend on
/// the order of the rows.
pub fn summarize(labels: &[String], rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("no rows to summarise".into()));
    }
    let mut estimators: Vec<Estimator> = Vec::new();
    for r in rows {
        if !estimators.contains(&r.estimator) {
            estimators.push(r.estimator);
        }
        if r.squared_errors.len() != labels.len() {
            return Err(Error::DimensionMismatch("row and labels disagree on tracked parameters".into()));
        }
    }
    let snrs = {
        let mut s: Vec<f64> = rows.iter().map(|r| r.snr_db).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    };
    let mut out = Vec::new();
    for &e in &estimators {
        for &snr in &snrs {
            let group: Vec<&ResultRow> = rows.iter().filter(|r| r.estimator == e && r.snr_db == snr).collect();
            if group.is_empty() {
                continue;
            }
            let failures = group.iter().filter(|r| r.failed).count();
            for (k, label) in labels.iter().enumerate() {
                let values = sorted(group.iter().filter(|r| !r.failed).map(|r| r.squared_errors[k]).collect());
                let mean = if values.is_empty() {
                    f64::NAN
                } else {
                    values.iter().sum::<f64>() / values.len() as f64
                };
                out.push(SummaryRow {
                    estimator: e,
                    snr_db: snr,
                    parameter: label.clone(),
                    trials: values.len(),
                    failures,
                    mean,
                    median: median_of_sorted(&values),
                });
            }
        }
    }
    Ok(out)
}

pub fn write_summary<W: Write>(writer: W, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimator", "snr_db", "parameter", "trials", "failures", "mean_se", "median_se"])?;
    for s in summary {
        w.write_record([
            s.estimator.to_string(),
            s.snr_db.to_string(),
            s.parameter.clone(),
            s.trials.to_string(),
            s.failures.to_string(),
            s.mean.to_string(),
            s.median.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Gnuplot script drawing MSE against SNR on a log scale, one panel per
/// parameter and one curve per estimator, from `summary_file`.
pub fn plot_script(summary_file: &str, summary: &[SummaryRow]) -> String {
    let mut estimators: Vec<String> = Vec::new();
    let mut params: Vec<String> = Vec::new();
    for s in summary {
        let e = s.estimator.to_string();
        if !estimators.contains(&e) {
            estimators.push(e);
        }
        if !params.contains(&s.parameter) {
            params.push(s.parameter.clone());
        }
    }
    let mut out = String::new();
    out.push_str("set datafile separator ','\n");
    out.push_str("set terminal pngcairo size 900,600\n");
    out.push_str("set logscale y\nset xlabel 'SNR (dB)'\nset ylabel 'MSE'\nset key outside right\n");
    for (k, p) in params.iter().enumerate() {
        out.push_str(&format!("set output 'mse_{k}.png'\nset title '{p}'\n"));
        let curves: Vec<String> = estimators
            .iter()
            .map(|e| {
                format!(
                    "'{summary_file}' every ::1 using 2:((strcol(1) eq '{e}' && strcol(3) eq '{p}') ? $6 : 1/0) with linespoints title '{e}'"
                )
            })
            .collect();
        out.push_str(&format!("plot {}\n", curves.join(", \\\n     ")));
    }
    out
}

/// Writes `results.csv`, `timings.csv`, `summary.csv`, `mse.gp` and the
/// resolved configuration into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &SweepOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows(std::fs::File::create(dir.join("results.csv"))?, &cfg.tracked, &out.rows)?;
    write_timings(std::fs::File::create(dir.join("timings.csv"))?, &out.timings)?;
    let labels: Vec<String> = cfg.tracked.iter().map(|t| t.label()).collect();
    let summary = summarize(&labels, &out.rows)?;
    write_summary(std::fs::File::create(dir.join("summary.csv"))?, &summary)?;
    std::fs::write(dir.join("mse.gp"), plot_script("summary.csv", &summary))?;
    std::fs::write(dir.join("config.toml"), cfg.to_text()?)?;
    Ok(())
}

/// Visibilities of a single simulated observation, for the `simulate`
/// command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Observation {
    pub snr_db: f64,
    pub achieved_snr_db: f64,
    pub trial_seed: u64,
    pub truth: ThetaVector,
    pub frequencies_hz: Vec<f64>,
    pub visibilities: Vec<VisibilitySet>,
}

impl Observation {
    pub fn simulate(cfg: &ExperimentConfig, scene: &Scene, snr_db_target: f64, trial_seed: u64) -> Result<Self> {
        let sim = simulate_trial(cfg, scene, snr_db_target, trial_seed)?;
        Ok(Self {
            snr_db: snr_db_target,
            achieved_snr_db: sim.achieved_snr_db,
            trial_seed,
            truth: sim.truth,
            frequencies_hz: sim.data.frequencies_hz.clone(),
            visibilities: sim.data.data,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}
