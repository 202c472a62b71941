//! Random hand parameters and bone-length helpers shared by the hand checks.

use hoi_core::hand::{HandModel, N_JOINTS, N_SHAPE, POSE_DIM};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_params(rng: &mut ChaCha8Rng, pose_scale: f64, shape_scale: f64) -> (Vec<f64>, Vec<f64>) {
    let theta = (0..POSE_DIM).map(|_| rng.random_range(-pose_scale..pose_scale)).collect();
    let beta = (0..N_SHAPE).map(|_| rng.random_range(-shape_scale..shape_scale)).collect();
    (theta, beta)
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Distance from every non-root joint to its parent.
pub fn posed_bone_lengths(m: &HandModel, theta: &[f64], beta: &[f64]) -> Vec<f64> {
    let mesh = m.mesh(theta, beta).unwrap();
    (1..N_JOINTS)
        .map(|j| dist(mesh.joints[j], mesh.joints[m.template.kinematic_tree[j].unwrap()]))
        .collect()
}
