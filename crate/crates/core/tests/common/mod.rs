// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use imape::bench::{draw_truth, TruthSpread};
use imape::calibrate::CalibrationData;
use imape::jones::{predict_all, FrequencyModel, ThetaVector, VisibilitySet};
use imape::scene::{make_scene, Scene};

pub fn random_theta(rng: &mut ChaCha8Rng, n_dirs: usize, n_ants: usize) -> ThetaVector {
    draw_truth(rng, n_dirs, n_ants, &TruthSpread::default())
}

/// Single-frequency scene with no background sources.
pub fn small_scene(seed: u64, antennas: usize, calibrators: usize) -> Scene {
    let mut scene = make_scene(seed, antennas, calibrators, 0).unwrap();
    scene.frequencies_hz.truncate(1);
    scene
}

pub fn model(scene: &Scene, f: usize) -> FrequencyModel {
    FrequencyModel::new(&scene.array, &scene.calibrators, scene.frequencies_hz[f])
}

pub fn noiseless(scene: &Scene, truth: &ThetaVector) -> CalibrationData {
    let data: Vec<VisibilitySet> = (0..scene.frequencies_hz.len())
        .map(|f| predict_all(truth, &model(scene, f)).unwrap())
        .collect();
    CalibrationData::new(scene, data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    rng.random_range(-half..=half)
}
