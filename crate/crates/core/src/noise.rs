// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

//! Compound-Gaussian noise `n = √τ · μ`, `μ ~ CN(0, Ω)`, and the
//! contamination recipe used by the simulations: unmodelled background
//! sources plus white Gaussian noise.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::jones::{predict_all, FrequencyModel, ThetaVector, VisibilitySet};
use crate::scene::{ArrayConfig, Source};
use crate::{Error, Mat4, Result, Vec4, C64, DATA_DIM};

/// Texture prior family names as used on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorFamily {
    K,
    Student,
    Cauchy,
    Laplace,
    Igcg,
    Gaussian,
}

impl PriorFamily {
    pub const ALL: [PriorFamily; 6] = [
        PriorFamily::K,
        PriorFamily::Student,
        PriorFamily::Cauchy,
        PriorFamily::Laplace,
        PriorFamily::Igcg,
        PriorFamily::Gaussian,
    ];

    /// The five heavy-tailed families.
    pub const TEXTURED: [PriorFamily; 5] = [
        PriorFamily::K,
        PriorFamily::Student,
        PriorFamily::Cauchy,
        PriorFamily::Laplace,
        PriorFamily::Igcg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorFamily::K => "k",
            PriorFamily::Student => "student",
            PriorFamily::Cauchy => "cauchy",
            PriorFamily::Laplace => "laplace",
            PriorFamily::Igcg => "igcg",
            PriorFamily::Gaussian => "gaussian",
        }
    }

    /// Starting hyperparameters before any texture has been estimated.
    pub fn initial_prior(self) -> TexturePrior {
        match self {
            PriorFamily::K => TexturePrior::KGamma { shape: 2.0, scale: 0.5 },
            PriorFamily::Student => TexturePrior::StudentT { shape: 2.0, scale: 1.0 },
            PriorFamily::Cauchy => TexturePrior::Cauchy { scale: 1.0 },
            PriorFamily::Laplace => TexturePrior::Laplace { rate: 1.0 },
            PriorFamily::Igcg => TexturePrior::InverseGaussian { shape: 1.0 },
            PriorFamily::Gaussian => TexturePrior::GaussianFixed,
        }
    }
}

impl fmt::Display for PriorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PriorFamily::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown prior family '{s}'")))
    }
}

/// Texture prior `p(τ; φ)` with its current hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TexturePrior {
    /// Gamma texture (K-distributed noise): shape `a`, scale `b`.
    KGamma { shape: f64, scale: f64 },
    /// Inverse-gamma texture (Student's t noise): shape `a`, scale `b`.
    StudentT { shape: f64, scale: f64 },
    /// Inverse-gamma texture with the shape pinned to 1.
    Cauchy { scale: f64 },
    /// Exponential texture (Laplace noise) with rate `λ`.
    Laplace { rate: f64 },
    /// Unit-mean inverse-Gaussian texture with shape `λ`.
    InverseGaussian { shape: f64 },
    /// `τ ≡ 1`: the plain Gaussian model.
    GaussianFixed,
}

impl TexturePrior {
    pub fn family(&self) -> PriorFamily {
        match self {
            TexturePrior::KGamma { .. } => PriorFamily::K,
            TexturePrior::StudentT { .. } => PriorFamily::Student,
            TexturePrior::Cauchy { .. } => PriorFamily::Cauchy,
            TexturePrior::Laplace { .. } => PriorFamily::Laplace,
            TexturePrior::InverseGaussian { .. } => PriorFamily::Igcg,
            TexturePrior::GaussianFixed => PriorFamily::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        let valid = match *self {
            TexturePrior::KGamma { shape, scale } | TexturePrior::StudentT { shape, scale } => ok(shape) && ok(scale),
            TexturePrior::Cauchy { scale } => ok(scale),
            TexturePrior::Laplace { rate } => ok(rate),
            TexturePrior::InverseGaussian { shape } => ok(shape),
            TexturePrior::GaussianFixed => true,
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("hyperparameters of {self:?} must be positive")))
        }
    }

    /// Hyperparameters as a flat list (for logs and CSV output).
    pub fn hyperparameters(&self) -> Vec<f64> {
        match *self {
            TexturePrior::KGamma { shape, scale } | TexturePrior::StudentT { shape, scale } => vec![shape, scale],
            TexturePrior::Cauchy { scale } => vec![scale],
            TexturePrior::Laplace { rate } => vec![rate],
            TexturePrior::InverseGaussian { shape } => vec![shape],
            TexturePrior::GaussianFixed => vec![],
        }
    }

    /// `ln p(τ; φ)`. The degenerate Gaussian family contributes nothing.
    pub fn ln_density(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("texture must be positive, got {tau}")));
        }
        let ln_tau = tau.ln();
        Ok(match *self {
            TexturePrior::KGamma { shape: a, scale: b } => {
                -ln_gamma(a) - a * b.ln() + (a - 1.0) * ln_tau - tau / b
            }
            TexturePrior::StudentT { shape: a, scale: b } => {
                a * b.ln() - ln_gamma(a) - (a + 1.0) * ln_tau - b / tau
            }
            TexturePrior::Cauchy { scale: b } => b.ln() - 2.0 * ln_tau - b / tau,
            TexturePrior::Laplace { rate } => rate.ln() - rate * tau,
            TexturePrior::InverseGaussian { shape: l } => {
                0.5 * (l / TAU).ln() - 1.5 * ln_tau - l * (tau - 1.0).powi(2) / (2.0 * tau)
            }
            TexturePrior::GaussianFixed => 0.0,
        })
    }
}

/// Draws one texture value from `prior`.
pub fn sample_texture<R: Rng + ?Sized>(prior: &TexturePrior, rng: &mut R) -> f64 {
    let tau = match *prior {
        TexturePrior::KGamma { shape, scale } => Gamma::new(shape, scale).expect("valid gamma").sample(rng),
        TexturePrior::StudentT { shape, scale } => inverse_gamma(shape, scale, rng),
        TexturePrior::Cauchy { scale } => inverse_gamma(1.0, scale, rng),
        TexturePrior::Laplace { rate } => Exp::new(rate).expect("valid rate").sample(rng),
        TexturePrior::InverseGaussian { shape } => inverse_gaussian(1.0, shape, rng),
        TexturePrior::GaussianFixed => return 1.0,
    };
    tau.max(f64::MIN_POSITIVE)
}

/// Reciprocal of a Gamma(shape, 1/scale) draw.
fn inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    1.0 / Gamma::new(shape, 1.0 / scale).expect("valid gamma").sample(rng)
}

/// Inverse-Gaussian draw: square a standard normal, take the smaller root of
/// the resulting quadratic, then pick between it and `mean²/root` with
/// probability `mean / (mean + root)`.
fn inverse_gaussian<R: Rng + ?Sized>(mean: f64, shape: f64, rng: &mut R) -> f64 {
    let nu: f64 = rng.sample(StandardNormal);
    let y = nu * nu;
    let my = mean * y;
    // Larger root first; the smaller one is mean²/larger (avoids cancellation).
    let large = mean + mean * my / (2.0 * shape) + (mean / (2.0 * shape)) * (4.0 * shape * my + my * my).sqrt();
    let small = mean * mean / large;
    if rng.random::<f64>() <= mean / (mean + small) {
        small
    } else {
        mean * mean / small
    }
}

/// Standard circular complex Gaussian: `E|z|² = 1`.
pub fn circular_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// 4×4 Hermitian positive-semidefinite speckle covariance `Ω`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeckleCovariance(Mat4);

const HERMITIAN_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
/// Largest condition number accepted when whitening.
pub const MAX_CONDITION: f64 = 1e14;

impl SpeckleCovariance {
    /// Checks Hermitian symmetry and positive semidefiniteness, then stores the
    /// exactly symmetrised matrix.
    pub fn new(m: Mat4) -> Result<Self> {
        let scale = m.norm().max(1.0);
        if !m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::InvalidParameter("speckle covariance has non-finite entries".into()));
        }
        if (m - m.adjoint()).norm() > HERMITIAN_TOL * scale {
            return Err(Error::InvalidParameter("speckle covariance is not Hermitian".into()));
        }
        let sym = (m + m.adjoint()) * C64::new(0.5, 0.0);
        let min_eig = SymmetricEigen::new(sym).eigenvalues.min();
        if min_eig < -PSD_TOL * scale {
            return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min_eig });
        }
        Ok(Self(sym))
    }

    /// `I₄ / 4`: white, unit trace.
    pub fn scaled_identity() -> Self {
        Self(Mat4::identity() * C64::new(1.0 / DATA_DIM as f64, 0.0))
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0 * C64::new(c, 0.0))
    }

    /// Divides by the trace.
    pub fn normalized(&self) -> Result<Self> {
        let tr = self.trace();
        if !(tr > 0.0) {
            return Err(Error::DegenerateCovariance);
        }
        Ok(self.scaled(1.0 / tr))
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let mut e: Vec<f64> = SymmetricEigen::new(self.0).eigenvalues.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        [e[0], e[1], e[2], e[3]]
    }

    pub fn condition_number(&self) -> f64 {
        let e = self.eigenvalues();
        if e[0] <= 0.0 {
            f64::INFINITY
        } else {
            e[3] / e[0]
        }
    }

    /// Square-root factor `L` with `L Lᴴ = Ω`, valid for singular `Ω`.
    pub fn factor(&self) -> Mat4 {
        let eig = SymmetricEigen::new(self.0);
        let sqrt_vals = eig.eigenvalues.map(|v| C64::new(v.max(0.0).sqrt(), 0.0));
        eig.eigenvectors * Mat4::from_diagonal(&sqrt_vals)
    }

    /// Cholesky-based whitening operator; fails for (numerically) singular `Ω`.
    pub fn whitener(&self) -> Result<Whitener> {
        Whitener::new(&self.0)
    }
}

/// Applies `Ω^{-1/2}` through the lower Cholesky factor of `Ω`, so that
/// `uᴴ Ω⁻¹ u = ‖L⁻¹ u‖²`.
#[derive(Clone, Debug)]
pub struct Whitener {
    lower: Mat4,
    log_det: f64,
}

impl Whitener {
    fn new(omega: &Mat4) -> Result<Self> {
        let chol = omega.cholesky().ok_or_else(|| Error::SingularCovariance {
            condition: eigen_condition(omega),
        })?;
        let lower = chol.l();
        let diag: Vec<f64> = (0..4).map(|k| lower[(k, k)].re).collect();
        let dmax = diag.iter().copied().fold(0.0, f64::max);
        let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let estimate = (dmax / dmin).powi(2);
        if !(dmin > 0.0) || !(estimate <= MAX_CONDITION) {
            return Err(Error::SingularCovariance {
                condition: eigen_condition(omega),
            });
        }
        let log_det = 2.0 * diag.iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { lower, log_det })
    }

    /// `L⁻¹ u` by forward substitution.
    pub fn apply(&self, u: &Vec4) -> Vec4 {
        let l = &self.lower;
        let mut y = Vec4::zeros();
        for r in 0..4 {
            let mut acc = u[r];
            for c in 0..r {
                acc -= l[(r, c)] * y[c];
            }
            y[r] = acc / l[(r, r)];
        }
        y
    }

    /// `uᴴ Ω⁻¹ u`.
    pub fn quadratic_form(&self, u: &Vec4) -> f64 {
        self.apply(u).norm_squared()
    }

    /// `ln |Ω|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }
}

fn eigen_condition(m: &Mat4) -> f64 {
    let e = SymmetricEigen::new(*m).eigenvalues;
    let (lo, hi) = (e.min(), e.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Draws `√τ · L z` with `L Lᴴ = Ω`.
#[derive(Clone, Debug)]
pub struct NoiseSampler {
    prior: TexturePrior,
    factor: Mat4,
}

impl NoiseSampler {
    pub fn new(prior: TexturePrior, omega: &SpeckleCovariance) -> Result<Self> {
        prior.validate()?;
        Ok(Self {
            prior,
            factor: omega.factor(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec4 {
        let tau = sample_texture(&self.prior, rng);
        let z = Vec4::from_fn(|_, _| circular_normal(rng));
        self.factor * z * C64::new(tau.sqrt(), 0.0)
    }
}

/// One compound-Gaussian noise vector.
pub fn sample_noise<R: Rng + ?Sized>(prior: &TexturePrior, omega: &SpeckleCovariance, rng: &mut R) -> Result<Vec4> {
    Ok(NoiseSampler::new(*prior, omega)?.sample(rng))
}

/// Adds the background visibilities (if any) and i.i.d. circular Gaussian
/// noise with `E|n|² = σ²` on every complex component.
pub fn contaminate<R: Rng + ?Sized>(
    noiseless: &VisibilitySet,
    background: Option<&VisibilitySet>,
    sigma: f64,
    rng: &mut R,
) -> Result<VisibilitySet> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise standard deviation must be nonnegative, got {sigma}")));
    }
    let mut out = match background {
        Some(bg) => noiseless.add(bg)?,
        None => noiseless.clone(),
    };
    if sigma > 0.0 {
        for v in out.data.iter_mut() {
            for z in v.iter_mut() {
                *z += circular_normal(rng) * sigma;
            }
        }
    }
    Ok(out)
}

/// Spread of the direction-dependent effects drawn for background sources.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundEffects {
    /// Ionospheric phases are uniform in `[-phase_spread, phase_spread]`.
    pub phase_spread: f64,
    /// Faraday angles are uniform in `[-faraday_spread, faraday_spread]`.
    pub faraday_spread: f64,
}

impl Default for BackgroundEffects {
    fn default() -> Self {
        Self {
            phase_spread: PI,
            faraday_spread: 0.5,
        }
    }
}

/// Visibilities of the unmodelled sources. They share the antenna gains of
/// `gains` but get their own random ionospheric phase and Faraday rotation.
pub fn background_visibilities<R: Rng + ?Sized>(
    array: &ArrayConfig,
    background: &[Source],
    gains: &[[C64; 2]],
    frequency_hz: f64,
    effects: &BackgroundEffects,
    rng: &mut R,
) -> Result<VisibilitySet> {
    let m = array.n_antennas();
    if gains.len() != m {
        return Err(Error::DimensionMismatch(format!("{} gains for {m} antennas", gains.len())));
    }
    if background.is_empty() {
        return Ok(VisibilitySet::zeros(m));
    }
    let mut theta = ThetaVector::identity(background.len(), m);
    theta.gains.copy_from_slice(gains);
    for a in theta.phase.iter_mut() {
        *a = uniform_symmetric(rng, effects.phase_spread);
    }
    for a in theta.faraday.iter_mut() {
        *a = uniform_symmetric(rng, effects.faraday_spread);
    }
    let model = FrequencyModel::new(array, background, frequency_hz);
    predict_all(&theta, &model)
}

fn uniform_symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Constant multiplying the Gaussian noise power in the SNR denominator.
pub const NOISE_FACTOR: f64 = 1.0;

/// `10 log10(P_cal / (P_bg + κ·4Bσ²))` with powers summed over baselines.
pub fn snr_db(calibrator_power: f64, background_power: f64, n_baselines: usize, sigma: f64) -> f64 {
    let noise = NOISE_FACTOR * (DATA_DIM * n_baselines) as f64 * sigma * sigma;
    10.0 * (calibrator_power / (background_power + noise)).log10()
}

/// Noise level that reaches `target_db`, or `None` when the background
/// sources alone already push the SNR below the target.
pub fn sigma_for_snr(calibrator_power: f64, background_power: f64, n_baselines: usize, target_db: f64) -> Option<f64> {
    let allowed = calibrator_power / 10f64.powf(target_db / 10.0) - background_power;
    if allowed < 0.0 || n_baselines == 0 {
        return None;
    }
    Some((allowed / (NOISE_FACTOR * (DATA_DIM * n_baselines) as f64)).sqrt())
}

/// Seed of sub-stream `stream` derived from `master` (SplitMix64 mixing).
pub fn substream_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, stream))
}
