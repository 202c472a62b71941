mod common;

use common::hand::{dist, posed_bone_lengths, random_params};
use hoi_autodiff::Tensor;
use hoi_core::hand::{HandModel, HandTemplate, N_KEYPOINTS, N_SHAPE, N_VERTICES, POSE_DIM};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> HandModel {
    HandModel::synthetic(11)
}

#[test]
fn identity_pose_returns_rest_mesh() {
    let m = model();
    let mesh = m.mesh(&[0.0; POSE_DIM], &[0.0; N_SHAPE]).unwrap();
    let t = &m.template;
    for (v, r) in mesh.vertices.iter().zip(&t.rest_vertices) {
        assert!(dist(*v, *r) < 1e-12);
    }
    // regressor applied directly to the rest vertices
    for k in 0..N_KEYPOINTS {
        let mut expect = [0.0; 3];
        for v in 0..N_VERTICES {
            let w = t.keypoint_regressor[k * N_VERTICES + v];
            for a in 0..3 {
                expect[a] += w * t.rest_vertices[v][a];
            }
        }
        assert!(dist(mesh.joints21[k], expect) < 1e-12);
    }
}

#[test]
fn keypoints_are_the_regressor_applied_to_vertices() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (theta, beta) = random_params(&mut rng, 0.8, 1.0);
    let mesh = m.mesh(&theta, &beta).unwrap();
    for k in 0..N_KEYPOINTS {
        let mut expect = [0.0; 3];
        for v in 0..N_VERTICES {
            let w = m.template.keypoint_regressor[k * N_VERTICES + v];
            for a in 0..3 {
                expect[a] += w * mesh.vertices[v][a];
            }
        }
        assert!(dist(mesh.joints21[k], expect) < 1e-12);
    }
}

#[test]
fn half_turn_about_z_rotates_rigidly_about_root() {
    let m = model();
    let mut theta = [0.0; POSE_DIM];
    theta[2] = std::f64::consts::PI;
    let mesh = m.mesh(&theta, &[0.0; N_SHAPE]).unwrap();
    let root = m.template.rest_joints[0];
    for (v, r) in mesh.vertices.iter().zip(&m.template.rest_vertices) {
        let expect = [2.0 * root[0] - r[0], 2.0 * root[1] - r[1], r[2]];
        assert!(dist(*v, expect) < 1e-9);
    }
}

#[test]
fn mean_vertex_gradient_matches_finite_differences() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (theta, beta) = random_params(&mut rng, 0.6, 1.0);
    let objective = |th: &[f64]| -> f64 {
        let mesh = m.mesh(th, &beta).unwrap();
        let mut mean = [0.0; 3];
        for v in &mesh.vertices {
            for a in 0..3 {
                mean[a] += v[a] / N_VERTICES as f64;
            }
        }
        (0..3).map(|a| weights[a] * mean[a]).sum()
    };

    let th = Tensor::param(theta.clone(), &[1, POSE_DIM]).unwrap();
    let be = Tensor::new(beta.clone(), &[1, N_SHAPE]).unwrap();
    let (verts, _, _) = m.forward(&th, &be).unwrap();
    let w = Tensor::new(weights.clone(), &[3]).unwrap();
    verts.mean_axis(1, false).unwrap().mul(&w).unwrap().sum().backward().unwrap();
    let grad = th.grad().unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for i in 0..POSE_DIM {
        let (mut p, mut q) = (theta.clone(), theta.clone());
        p[i] += h;
        q[i] -= h;
        let fd = (objective(&p) - objective(&q)) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    assert!(worst < 1e-5, "relative error {worst}");
}

#[test]
fn shape_gradient_reaches_every_coefficient() {
    let m = model();
    let th = Tensor::new(vec![0.1; POSE_DIM], &[1, POSE_DIM]).unwrap();
    let be = Tensor::param(vec![0.0; N_SHAPE], &[1, N_SHAPE]).unwrap();
    m.keypoints(&th, &be).unwrap().square().sum().backward().unwrap();
    assert!(be.grad().unwrap().iter().all(|g| g.abs() > 0.0));
}

#[test]
fn batch_rows_are_independent() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t1, b1) = random_params(&mut rng, 1.0, 1.0);
    let (t2, b2) = random_params(&mut rng, 1.0, 1.0);
    let th = Tensor::new([t1.clone(), t2.clone()].concat(), &[2, POSE_DIM]).unwrap();
    let be = Tensor::new([b1.clone(), b2.clone()].concat(), &[2, N_SHAPE]).unwrap();
    let keys = m.keypoints(&th, &be).unwrap();
    let single = m.mesh(&t2, &b2).unwrap();
    let second: Vec<f64> = keys.data()[N_KEYPOINTS * 3..].to_vec();
    let flat: Vec<f64> = single.joints21.iter().flatten().copied().collect();
    assert!(second.iter().zip(&flat).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn wrong_sizes_are_rejected() {
    let m = model();
    let th = Tensor::zeros(&[1, 45]);
    let be = Tensor::zeros(&[1, N_SHAPE]);
    assert!(m.forward(&th, &be).is_err());
}

#[test]
fn template_round_trips_through_json() {
    let t = HandTemplate::synthetic(3);
    let json = serde_json::to_string(&t).unwrap();
    let back: HandTemplate = serde_json::from_str(&json).unwrap();
    assert_eq!(t, back);
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    for field in ["seed", "rest_vertices", "kinematic_tree", "rest_joints", "skinning_weights", "shape_basis", "keypoint_regressor"] {
        assert!(value.get(field).is_some(), "missing {field}");
    }
}

#[test]
fn corrupted_template_fails_validation() {
    let mut t = HandTemplate::synthetic(3);
    t.skinning_weights[0] += 0.5;
    assert!(HandModel::new(t).is_err());
    let mut t = HandTemplate::synthetic(3);
    t.kinematic_tree[4] = Some(9);
    assert!(t.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pose_changes_preserve_bone_lengths(seed in 0u64..1000) {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (theta, beta) = random_params(&mut rng, 2.0, 1.5);
        let rest = posed_bone_lengths(&m, &[0.0; POSE_DIM], &beta);
        let posed = posed_bone_lengths(&m, &theta, &beta);
        for (a, b) in rest.iter().zip(&posed) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn global_rotation_is_equivariant(seed in 0u64..1000) {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (theta, beta) = random_params(&mut rng, 1.0, 1.0);
        let extra = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let r = Rotation3::from_scaled_axis(extra);
        let composed = r * Rotation3::from_scaled_axis(Vector3::new(theta[0], theta[1], theta[2]));
        let mut rotated = theta.clone();
        rotated[..3].copy_from_slice(composed.scaled_axis().as_slice());

        let base = m.mesh(&theta, &beta).unwrap();
        let turned = m.mesh(&rotated, &beta).unwrap();
        let root = Vector3::from(base.joints[0]);
        for (a, b) in base.vertices.iter().chain(&base.joints21).zip(turned.vertices.iter().chain(&turned.joints21)) {
            let expect = r * (Vector3::from(*a) - root) + root;
            prop_assert!((expect - Vector3::from(*b)).amax() < 1e-9);
        }
    }

    #[test]
    fn keypoints_lie_in_vertex_hull(seed in 0u64..1000) {
        // Separating-axis check: along any direction a keypoint never exceeds the vertex extremes.
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (theta, beta) = random_params(&mut rng, 1.5, 1.0);
        let mesh = m.mesh(&theta, &beta).unwrap();
        for _ in 0..16 {
            let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let hi = mesh.vertices.iter().map(|v| Vector3::from(*v).dot(&d)).fold(f64::NEG_INFINITY, f64::max);
            let lo = mesh.vertices.iter().map(|v| Vector3::from(*v).dot(&d)).fold(f64::INFINITY, f64::min);
            for k in &mesh.joints21 {
                let p = Vector3::from(*k).dot(&d);
                prop_assert!(p <= hi + 1e-12 && p >= lo - 1e-12);
            }
        }
    }
}
