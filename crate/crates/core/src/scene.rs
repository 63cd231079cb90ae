// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

//! Array geometry, sky model and the known per-source, per-antenna effects.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Mat2, Result, C64};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Antenna layout. Baselines are the pairs `(p, q)` with `p < q`, ordered
/// `(0,1), (0,2), ..., (M-2, M-1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    /// East/north antenna positions in metres.
    pub positions: Vec<[f64; 2]>,
}

impl ArrayConfig {
    pub fn new(positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "an array needs at least 2 antennas, got {}",
                positions.len()
            )));
        }
        Ok(Self { positions })
    }

    pub fn n_antennas(&self) -> usize {
        self.positions.len()
    }

    pub fn n_baselines(&self) -> usize {
        n_baselines(self.n_antennas())
    }

    /// Index of baseline `(p, q)`, `p < q`.
    pub fn baseline_index(&self, p: usize, q: usize) -> Option<usize> {
        let m = self.n_antennas();
        if p >= q || q >= m {
            return None;
        }
        // Baselines starting at antennas 0..p come first.
        Some(p * (2 * m - p - 1) / 2 + (q - p - 1))
    }

    /// Antenna pair of baseline `k`.
    pub fn baseline(&self, k: usize) -> Option<(usize, usize)> {
        self.baselines().nth(k)
    }

    pub fn baselines(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        baseline_pairs(self.n_antennas())
    }
}

pub fn n_baselines(n_antennas: usize) -> usize {
    n_antennas * n_antennas.saturating_sub(1) / 2
}

pub fn baseline_pairs(n_antennas: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n_antennas).flat_map(move |p| (p + 1..n_antennas).map(move |q| (p, q)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceRole {
    Calibrator,
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Source {
    /// Direction cosines.
    pub l: f64,
    pub m: f64,
    pub flux: f64,
    pub role: SourceRole,
}

impl Source {
    pub fn new(l: f64, m: f64, flux: f64, role: SourceRole) -> Result<Self> {
        if !(l * l + m * m <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "direction cosines ({l}, {m}) lie outside the unit disk"
            )));
        }
        if !(flux >= 0.0) || !flux.is_finite() {
            return Err(Error::InvalidParameter(format!("flux must be nonnegative, got {flux}")));
        }
        Ok(Self { l, m, flux, role })
    }
}

/// Knobs of the random scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub antennas: usize,
    pub calibrators: usize,
    pub background: usize,
    pub seed: u64,
    /// Side of the square the antennas are scattered in, metres.
    pub array_extent_m: f64,
    /// Radius (in direction cosines) of the disk sources are drawn from.
    pub field_radius: f64,
    pub calibrator_flux: [f64; 2],
    /// Background flux range as a fraction of the weakest calibrator flux.
    pub background_flux_fraction: [f64; 2],
    pub frequencies_hz: Vec<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            antennas: 8,
            calibrators: 2,
            background: 4,
            seed: 0,
            array_extent_m: 1000.0,
            field_radius: 0.1,
            calibrator_flux: [0.5, 1.5],
            background_flux_fraction: [0.01, 0.1],
            frequencies_hz: vec![140e6, 150e6, 160e6, 170e6],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.antennas < 2 {
            return Err(Error::InvalidParameter(format!(
                "M must be at least 2, got {}",
                self.antennas
            )));
        }
        if self.calibrators < 1 {
            return Err(Error::InvalidParameter("D must be at least 1".into()));
        }
        if !(self.array_extent_m > 0.0) {
            return Err(Error::InvalidParameter("array extent must be positive".into()));
        }
        if !(self.field_radius > 0.0 && self.field_radius <= 1.0) {
            return Err(Error::InvalidParameter("field radius must lie in (0, 1]".into()));
        }
        let [lo, hi] = self.calibrator_flux;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidParameter("calibrator flux range must be positive and ordered".into()));
        }
        let [lo, hi] = self.background_flux_fraction;
        if !(lo >= 0.0 && lo <= hi && hi <= 0.1) {
            return Err(Error::InvalidParameter(
                "background flux fraction must lie within [0, 0.1]".into(),
            ));
        }
        if self.frequencies_hz.is_empty() || self.frequencies_hz.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::InvalidParameter("frequencies must be positive and nonempty".into()));
        }
        Ok(())
    }
}

/// An array plus its sky: the calibrators are modelled, the background
/// sources are not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub array: ArrayConfig,
    pub calibrators: Vec<Source>,
    pub background: Vec<Source>,
    pub frequencies_hz: Vec<f64>,
}

impl Scene {
    pub fn n_antennas(&self) -> usize {
        self.array.n_antennas()
    }

    pub fn n_baselines(&self) -> usize {
        self.array.n_baselines()
    }

    /// Deterministic text dump; [`Scene::from_text`] restores it exactly.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("scene serialises")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let scene: Scene = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        ArrayConfig::new(scene.array.positions.clone())?;
        for s in scene.calibrators.iter().chain(&scene.background) {
            Source::new(s.l, s.m, s.flux, s.role)?;
        }
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn uniform_in_disk<R: Rng>(rng: &mut R, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let angle = TAU * rng.random::<f64>();
    (r * angle.cos(), r * angle.sin())
}

/// Draws a random scene: antennas uniform in a square, sources uniform in a
/// disk of direction cosines, background fluxes at most a tenth of the
/// weakest calibrator.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = cfg.array_extent_m / 2.0;
    let positions = (0..cfg.antennas)
        .map(|_| [rng.random_range(-half..=half), rng.random_range(-half..=half)])
        .collect();
    let array = ArrayConfig::new(positions)?;

    let [clo, chi] = cfg.calibrator_flux;
    let mut calibrators = Vec::with_capacity(cfg.calibrators);
    for _ in 0..cfg.calibrators {
        let (l, m) = uniform_in_disk(&mut rng, cfg.field_radius);
        let flux = rng.random_range(clo..=chi);
        calibrators.push(Source::new(l, m, flux, SourceRole::Calibrator)?);
    }
    let background = draw_background(&mut rng, cfg, &calibrators)?;
    Ok(Scene {
        array,
        calibrators,
        background,
        frequencies_hz: cfg.frequencies_hz.clone(),
    })
}

/// Fresh background sources for an existing set of calibrators.
pub fn draw_background<R: Rng>(rng: &mut R, cfg: &SceneConfig, calibrators: &[Source]) -> Result<Vec<Source>> {
    let weakest = calibrators
        .iter()
        .map(|s| s.flux)
        .fold(f64::INFINITY, f64::min);
    let [lo, hi] = cfg.background_flux_fraction;
    (0..cfg.background)
        .map(|_| {
            let (l, m) = uniform_in_disk(rng, cfg.field_radius);
            let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            Source::new(l, m, frac * weakest, SourceRole::Background)
        })
        .collect()
}

/// Convenience wrapper with the default geometry.
pub fn make_scene(seed: u64, antennas: usize, calibrators: usize, background: usize) -> Result<Scene> {
    generate_scene(&SceneConfig {
        antennas,
        calibrators,
        background,
        seed,
        ..SceneConfig::default()
    })
}

/// Unpolarised coherency: half the flux on each diagonal entry.
pub fn coherency(source: &Source) -> Mat2 {
    Mat2::identity() * C64::new(source.flux / 2.0, 0.0)
}

/// Geometric delay phasor `exp(-j 2π f/c (u l + v m))` of one antenna.
pub fn geometric_phasor(position: [f64; 2], source: &Source, frequency_hz: f64) -> C64 {
    let phase = -TAU * frequency_hz / SPEED_OF_LIGHT * (position[0] * source.l + position[1] * source.m);
    C64::from_polar(1.0, phase)
}

/// Known effects `H_{i,p}` for every antenna; the beam is the identity.
pub fn known_effects(array: &ArrayConfig, source: &Source, frequency_hz: f64) -> Vec<Mat2> {
    array
        .positions
        .iter()
        .map(|&pos| Mat2::identity() * geometric_phasor(pos, source, frequency_hz))
        .collect()
}
