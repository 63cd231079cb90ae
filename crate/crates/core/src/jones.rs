// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

//! The Jones chain `J_{i,p} = G_p H_{i,p} Z_{i,p} F_{i,p}` and visibility
//! prediction.
//!
//! Parameters are kept real: Faraday angles and ionospheric phases in
//! radians, gains as Cartesian complex pairs. The real vector layout used
//! by the solver is
//!
//! ```text
//! [ faraday (D·M, direction-major) | phase (D·M, direction-major) | gains (M × [re x, im x, re y, im y]) ]
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::scene::{coherency, known_effects, ArrayConfig, Source};
use crate::{Error, Mat2, Result, Vec4, C64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    n_dirs: usize,
    n_ants: usize,
    /// Faraday rotation angles, index `i * M + p`.
    pub faraday: Vec<f64>,
    /// Ionospheric phases, index `i * M + p`.
    pub phase: Vec<f64>,
    /// Per-antenna diagonal gains `(g_x, g_y)`.
    pub gains: Vec<[C64; 2]>,
}

impl ThetaVector {
    /// Unit gains, no rotation, no phase.
    pub fn identity(n_dirs: usize, n_ants: usize) -> Self {
        Self {
            n_dirs,
            n_ants,
            faraday: vec![0.0; n_dirs * n_ants],
            phase: vec![0.0; n_dirs * n_ants],
            gains: vec![[C64::new(1.0, 0.0); 2]; n_ants],
        }
    }

    pub fn n_dirs(&self) -> usize {
        self.n_dirs
    }

    pub fn n_ants(&self) -> usize {
        self.n_ants
    }

    /// Real dimension `2·D·M + 4·M`.
    pub fn dim(&self) -> usize {
        param_dim(self.n_dirs, self.n_ants)
    }

    pub fn faraday_at(&self, i: usize, p: usize) -> f64 {
        self.faraday[i * self.n_ants + p]
    }

    pub fn phase_at(&self, i: usize, p: usize) -> f64 {
        self.phase[i * self.n_ants + p]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.faraday);
        v.extend_from_slice(&self.phase);
        for g in &self.gains {
            v.extend_from_slice(&[g[0].re, g[0].im, g[1].re, g[1].im]);
        }
        v
    }

    pub fn from_slice(n_dirs: usize, n_ants: usize, v: &[f64]) -> Result<Self> {
        let dm = n_dirs * n_ants;
        if v.len() != param_dim(n_dirs, n_ants) {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                param_dim(n_dirs, n_ants)
            )));
        }
        let gains = v[2 * dm..]
            .chunks_exact(4)
            .map(|c| [C64::new(c[0], c[1]), C64::new(c[2], c[3])])
            .collect();
        Ok(Self {
            n_dirs,
            n_ants,
            faraday: v[..dm].to_vec(),
            phase: v[dm..2 * dm].to_vec(),
            gains,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    /// Wraps every angle into `(-π, π]`.
    pub fn wrap_angles(&mut self) {
        for a in self.faraday.iter_mut().chain(self.phase.iter_mut()) {
            *a = wrap_angle(*a);
        }
    }

    /// Labelled text dump, one parameter per line, 1-based indices.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (label, values) in [("faraday", &self.faraday), ("phase", &self.phase)] {
            for i in 0..self.n_dirs {
                for p in 0..self.n_ants {
                    let _ = writeln!(out, "{label}[{},{}] = {:?}", i + 1, p + 1, values[i * self.n_ants + p]);
                }
            }
        }
        for (p, g) in self.gains.iter().enumerate() {
            for (c, z) in g.iter().enumerate() {
                let _ = writeln!(out, "gain[{},{}].re = {:?}", p + 1, c + 1, z.re);
                let _ = writeln!(out, "gain[{},{}].im = {:?}", p + 1, c + 1, z.im);
            }
        }
        out
    }

    pub fn from_text(n_dirs: usize, n_ants: usize, text: &str) -> Result<Self> {
        let mut theta = Self::identity(n_dirs, n_ants);
        let mut seen = vec![false; theta.dim()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse(format!("line {}: cannot parse '{line}'", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(bad)?;
            let value: f64 = value.trim().parse().map_err(|_| bad())?;
            let key = key.trim();
            let (name, rest) = key.split_once('[').ok_or_else(bad)?;
            let (idx, suffix) = rest.split_once(']').ok_or_else(bad)?;
            let (a, b) = idx.split_once(',').ok_or_else(bad)?;
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a == 0 || b == 0 {
                return Err(bad());
            }
            let (a, b) = (a - 1, b - 1);
            let dm = n_dirs * n_ants;
            let slot = match (name, suffix) {
                ("faraday", "") if a < n_dirs && b < n_ants => {
                    theta.faraday[a * n_ants + b] = value;
                    a * n_ants + b
                }
                ("phase", "") if a < n_dirs && b < n_ants => {
                    theta.phase[a * n_ants + b] = value;
                    dm + a * n_ants + b
                }
                ("gain", ".re") if a < n_ants && b < 2 => {
                    theta.gains[a][b].re = value;
                    2 * dm + 4 * a + 2 * b
                }
                ("gain", ".im") if a < n_ants && b < 2 => {
                    theta.gains[a][b].im = value;
                    2 * dm + 4 * a + 2 * b + 1
                }
                _ => return Err(bad()),
            };
            seen[slot] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Parse(format!("parameter {missing} missing from text")));
        }
        Ok(theta)
    }
}

pub fn param_dim(n_dirs: usize, n_ants: usize) -> usize {
    2 * n_dirs * n_ants + 4 * n_ants
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a - (2.0 * PI) * ((a + PI) / (2.0 * PI)).floor();
    // (a + π) / 2π landing exactly on an integer maps π to -π.
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Faraday rotation `[[cos, -sin], [sin, cos]]`.
pub fn faraday_matrix(angle: f64) -> Mat2 {
    let (s, c) = angle.sin_cos();
    Mat2::new(
        C64::new(c, 0.0),
        C64::new(-s, 0.0),
        C64::new(s, 0.0),
        C64::new(c, 0.0),
    )
}

/// `dF/dϑ = [[-sin, -cos], [cos, -sin]]`.
pub fn faraday_derivative(angle: f64) -> Mat2 {
    let (s, c) = angle.sin_cos();
    Mat2::new(
        C64::new(-s, 0.0),
        C64::new(-c, 0.0),
        C64::new(c, 0.0),
        C64::new(-s, 0.0),
    )
}

/// Column-stacking `vec` of a 2×2 matrix.
pub fn vec2x2(m: &Mat2) -> Vec4 {
    Vec4::new(m[(0, 0)], m[(1, 0)], m[(0, 1)], m[(1, 1)])
}

/// Inverse of [`vec2x2`].
pub fn unvec2x2(v: &Vec4) -> Mat2 {
    Mat2::new(v[0], v[2], v[1], v[3])
}

/// Everything known at one frequency: calibrator coherencies and the
/// per-antenna known effects.
#[derive(Clone, Debug)]
pub struct FrequencyModel {
    pub frequency_hz: f64,
    n_ants: usize,
    coherencies: Vec<Mat2>,
    /// `H_{i,p}`, index `i * M + p`.
    effects: Vec<Mat2>,
}

impl FrequencyModel {
    pub fn new(array: &ArrayConfig, sources: &[Source], frequency_hz: f64) -> Self {
        let coherencies = sources.iter().map(coherency).collect();
        let effects = sources
            .iter()
            .flat_map(|s| known_effects(array, s, frequency_hz))
            .collect();
        Self {
            frequency_hz,
            n_ants: array.n_antennas(),
            coherencies,
            effects,
        }
    }

    /// Builds a model from explicit coherencies and known effects.
    pub fn from_parts(frequency_hz: f64, n_ants: usize, coherencies: Vec<Mat2>, effects: Vec<Mat2>) -> Result<Self> {
        if effects.len() != coherencies.len() * n_ants {
            return Err(Error::DimensionMismatch(format!(
                "{} known-effect matrices for {} sources and {} antennas",
                effects.len(),
                coherencies.len(),
                n_ants
            )));
        }
        Ok(Self {
            frequency_hz,
            n_ants,
            coherencies,
            effects,
        })
    }

    pub fn n_dirs(&self) -> usize {
        self.coherencies.len()
    }

    pub fn n_ants(&self) -> usize {
        self.n_ants
    }

    pub fn n_baselines(&self) -> usize {
        crate::scene::n_baselines(self.n_ants)
    }

    pub fn coherency(&self, i: usize) -> &Mat2 {
        &self.coherencies[i]
    }

    pub fn effect(&self, i: usize, p: usize) -> &Mat2 {
        &self.effects[i * self.n_ants + p]
    }

    pub(crate) fn check_theta(&self, theta: &ThetaVector) -> Result<()> {
        if theta.n_dirs() != self.n_dirs() || theta.n_ants() != self.n_ants {
            return Err(Error::DimensionMismatch(format!(
                "theta is {}×{} (directions × antennas), model is {}×{}",
                theta.n_dirs(),
                theta.n_ants(),
                self.n_dirs(),
                self.n_ants
            )));
        }
        Ok(())
    }
}

/// Stacked cross-correlations at one frequency, baseline order `(0,1), (0,2), ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilitySet {
    pub n_ants: usize,
    pub data: Vec<Vec4>,
}

impl VisibilitySet {
    pub fn zeros(n_ants: usize) -> Self {
        Self {
            n_ants,
            data: vec![Vec4::zeros(); crate::scene::n_baselines(n_ants)],
        }
    }

    pub fn n_baselines(&self) -> usize {
        self.data.len()
    }

    /// Total power `Σ_pq ‖x_pq‖²`.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|v| v.norm_squared()).sum()
    }

    pub fn add(&self, other: &VisibilitySet) -> Result<VisibilitySet> {
        if self.data.len() != other.data.len() {
            return Err(Error::DimensionMismatch(format!(
                "adding visibility sets of {} and {} baselines",
                self.data.len(),
                other.data.len()
            )));
        }
        Ok(VisibilitySet {
            n_ants: self.n_ants,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }
}

/// Lower-level pieces of `J_{i,p}`, reused by the solver's Jacobian.
#[derive(Clone, Copy, Debug)]
pub(crate) struct JonesFactors {
    /// `diag(g_p)`
    pub gain: Mat2,
    /// `H_{i,p} · exp(jφ_{i,p})`
    pub hz: Mat2,
    /// `F(ϑ_{i,p})`
    pub rotation: Mat2,
    pub angle: f64,
}

impl JonesFactors {
    pub fn new(theta: &ThetaVector, model: &FrequencyModel, i: usize, p: usize) -> Self {
        let g = theta.gains[p];
        let gain = Mat2::new(g[0], C64::new(0.0, 0.0), C64::new(0.0, 0.0), g[1]);
        let hz = model.effect(i, p) * C64::from_polar(1.0, theta.phase_at(i, p));
        let angle = theta.faraday_at(i, p);
        Self {
            gain,
            hz,
            rotation: faraday_matrix(angle),
            angle,
        }
    }

    pub fn jones(&self) -> Mat2 {
        self.gain * self.hz * self.rotation
    }
}

/// `J_{i,p} = diag(g_p) · H_{i,p} · exp(jφ_{i,p}) I₂ · F(ϑ_{i,p})`.
pub fn compose_jones(theta: &ThetaVector, model: &FrequencyModel, i: usize, p: usize) -> Result<Mat2> {
    model.check_theta(theta)?;
    if i >= theta.n_dirs() {
        return Err(Error::IndexOutOfRange {
            what: "source",
            index: i,
            limit: theta.n_dirs(),
        });
    }
    if p >= theta.n_ants() {
        return Err(Error::IndexOutOfRange {
            what: "antenna",
            index: p,
            limit: theta.n_ants(),
        });
    }
    let gain = Mat2::from_diagonal(&nalgebra::Vector2::new(theta.gains[p][0], theta.gains[p][1]));
    let z = Mat2::identity() * C64::from_polar(1.0, theta.phase_at(i, p));
    Ok(gain * model.effect(i, p) * z * faraday_matrix(theta.faraday_at(i, p)))
}

/// Noiseless `Σ_i vec(J_{i,p} C_i J_{i,q}^H)` for baseline `(p, q)`, `p < q`.
pub fn predict_visibility(theta: &ThetaVector, model: &FrequencyModel, p: usize, q: usize) -> Result<Vec4> {
    model.check_theta(theta)?;
    if p >= q {
        return Err(Error::InvalidParameter(format!("baseline ({p}, {q}) needs p < q")));
    }
    if q >= model.n_ants() {
        return Err(Error::IndexOutOfRange {
            what: "antenna",
            index: q,
            limit: model.n_ants(),
        });
    }
    Ok(predict_unchecked(theta, model, p, q))
}

pub(crate) fn predict_unchecked(theta: &ThetaVector, model: &FrequencyModel, p: usize, q: usize) -> Vec4 {
    let mut sum = Mat2::zeros();
    for i in 0..model.n_dirs() {
        let jp = JonesFactors::new(theta, model, i, p).jones();
        let jq = JonesFactors::new(theta, model, i, q).jones();
        sum += jp * model.coherency(i) * jq.adjoint();
    }
    vec2x2(&sum)
}

/// Noiseless visibilities of every baseline.
pub fn predict_all(theta: &ThetaVector, model: &FrequencyModel) -> Result<VisibilitySet> {
    model.check_theta(theta)?;
    let n = model.n_ants();
    // Jones matrices are shared between baselines; build them once.
    let jones: Vec<Mat2> = (0..model.n_dirs())
        .flat_map(|i| (0..n).map(move |p| (i, p)))
        .map(|(i, p)| JonesFactors::new(theta, model, i, p).jones())
        .collect();
    let data = crate::scene::baseline_pairs(n)
        .map(|(p, q)| {
            let mut sum = Mat2::zeros();
            for i in 0..model.n_dirs() {
                sum += jones[i * n + p] * model.coherency(i) * jones[i * n + q].adjoint();
            }
            vec2x2(&sum)
        })
        .collect();
    Ok(VisibilitySet { n_ants: n, data })
}
