#![allow(dead_code)]

pub mod deq;
pub mod fixtures;
pub mod hand;
pub mod oracles;

use hoi_core::metrics;
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(0.0..std::f64::consts::PI))
}

pub fn random_joints(rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..21).map(|_| std::array::from_fn(|_| rng.random_range(-0.1..0.1))).collect()
}

/// Rigidly moved copy of `pts` plus uniform noise of half-width `noise`.
pub fn perturb(rng: &mut ChaCha8Rng, pts: &[[f64; 3]], noise: f64) -> Vec<[f64; 3]> {
    let r = random_rotation(rng);
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    pts.iter()
        .map(|p| {
            let q = r * Vector3::from(*p) + t;
            std::array::from_fn(|i| q[i] + if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 })
        })
        .collect()
}

fn random_map(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(4..100);
    let quantized = rng.random_bool(0.3);
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.0..1.0);
            if quantized { (v * 4.0).floor() / 4.0 } else { v }
        })
        .collect()
}

/// Largest absolute deviation from the oracles per metric over `cases`
/// random instances, in report order.
pub fn metric_oracle_deviation(seed: u64, cases: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 8];
    let mut note = |i: usize, a: f64, b: f64| worst[i] = worst[i].max((a - b).abs());
    for _ in 0..cases {
        let len = rng.random_range(1..8);
        let traj = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> { (0..len).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect() };
        let (a, b) = (traj(&mut rng), traj(&mut rng));
        note(0, metrics::ade(&a, &b).unwrap(), oracles::ade(&a, &b));
        note(1, metrics::fde(&a, &b).unwrap(), oracles::fde(&a, &b));

        let mut m1 = random_map(&mut rng);
        m1[0] += 0.01;
        let mut m2: Vec<f64> = (0..m1.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        m2[0] += 0.01;
        let fixations: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..m1.len())).collect();
        note(2, metrics::sim(&m1, &m2).unwrap(), oracles::sim(&m1, &m2));
        note(3, metrics::nss(&m1, &fixations).unwrap(), oracles::nss(&m1, &fixations));
        note(4, metrics::auc_j(&m1, &fixations).unwrap(), oracles::auc_j(&m1, &fixations));

        let pred = random_joints(&mut rng);
        let gt = perturb(&mut rng, &pred, 0.02);
        note(5, metrics::pa_mpjpe(&pred, &gt).unwrap(), oracles::pa_mpjpe(&pred, &gt));

        let density = rng.random_range(0.0..0.5);
        let mp: Vec<bool> = (0..778).map(|_| rng.random_bool(density)).collect();
        let mg: Vec<bool> = (0..778).map(|_| rng.random_bool(density)).collect();
        let got = metrics::contact_prf(&mp, &mg).unwrap();
        let (p, r, f) = oracles::prf(&mp, &mg);
        note(6, got.precision, p);
        note(6, got.recall, r);
        note(7, got.f1, f);
    }
    ["ade", "fde", "sim", "nss", "auc_j", "pa_mpjpe", "precision/recall", "f1"]
        .into_iter()
        .zip(worst)
        .collect()
}

/// Largest change of aligned joint error under a random rigid motion of the prediction.
pub fn procrustes_invariance(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let pred = random_joints(&mut rng);
        let gt = perturb(&mut rng, &pred, 0.01);
        let moved = perturb(&mut rng, &pred, 0.0);
        let a = metrics::pa_mpjpe(&pred, &gt).unwrap();
        let b = metrics::pa_mpjpe(&moved, &gt).unwrap();
        worst = worst.max((a - b).abs());
    }
    worst
}
