// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use imape::jones::{compose_jones, predict_visibility, vec2x2};
use imape::scene::baseline_pairs;
use imape::Vec4;

#[test]
fn visibility_matches_kronecker_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = common::small_scene(5, 6, 3);
    let model = common::model(&scene, 0);
    for _ in 0..10 {
        let theta = common::random_theta(&mut rng, 3, 6);
        for (p, q) in baseline_pairs(6) {
            let mut expected = Vec4::zeros();
            for i in 0..3 {
                let jp = compose_jones(&theta, &model, i, p).unwrap();
                let jq = compose_jones(&theta, &model, i, q).unwrap();
                let kron = jq.map(|z| z.conj()).kronecker(&jp);
                expected += kron * vec2x2(model.coherency(i));
            }
            let got = predict_visibility(&theta, &model, p, q).unwrap();
            assert!((got - expected).norm() < 1e-12 * (1.0 + expected.norm()), "baseline ({p},{q})");
        }
    }
}

#[test]
fn baselines_need_ordered_antennas() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scene = common::small_scene(6, 4, 2);
    let model = common::model(&scene, 0);
    let theta = common::random_theta(&mut rng, 2, 4);
    assert!(predict_visibility(&theta, &model, 2, 0).is_err());
    assert!(predict_visibility(&theta, &model, 1, 1).is_err());
    assert!(predict_visibility(&theta, &model, 0, 4).is_err());
}
