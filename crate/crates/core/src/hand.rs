//! Procedural parametric hand: 16-joint kinematic tree, 10 shape
//! directions, linear blend skinning to 778 vertices, and a 21-keypoint
//! regressor (wrist plus four points per digit, fingertip included).
//!
//! Pose is 48 axis-angle values (global rotation first), shape is 10
//! coefficients. Lengths are in scene units with a hand span near 0.2.

use hoi_autodiff::{no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HoiError, Result};

pub const N_VERTICES: usize = 778;
pub const N_JOINTS: usize = 16;
pub const N_KEYPOINTS: usize = 21;
pub const N_SHAPE: usize = 10;
pub const POSE_DIM: usize = 3 * N_JOINTS;
/// Squared-norm floor inside the Rodrigues angle.
pub const RODRIGUES_EPS: f64 = 1e-12;

const N_DIGITS: usize = 5;
const SKIN_WIDTH: f64 = 0.012;
const REGRESSOR_NEIGHBOURS: usize = 6;

/// Serialisable template record. Matrices are row-major flat arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandTemplate {
    pub seed: u64,
    /// Parent of each joint; `None` only for the wrist (joint 0).
    pub kinematic_tree: Vec<Option<usize>>,
    pub rest_joints: Vec<[f64; 3]>,
    pub rest_vertices: Vec<[f64; 3]>,
    /// `778 × 16`.
    pub skinning_weights: Vec<f64>,
    /// `10 × (778·3)` vertex displacement per unit coefficient.
    pub shape_basis: Vec<f64>,
    /// `21 × 778`.
    pub keypoint_regressor: Vec<f64>,
    /// Fingertip position per digit, index to thumb.
    pub tips: Vec<[f64; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / norm(a))
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    norm(sub(p, add(a, scale(ab, t))))
}

/// A capsule the surface is sampled around, rigidly attached to `owner`.
struct Bone {
    a: [f64; 3],
    b: [f64; 3],
    owner: usize,
    radius: f64,
    /// Depth squash so the palm is flatter than it is wide.
    z_squash: f64,
}

/// Joint index of digit `k`'s `s`-th joint (digits: index, middle, ring, pinky, thumb).
pub fn digit_joint(k: usize, s: usize) -> usize {
    1 + 3 * k + s
}

impl HandTemplate {
    /// Builds a deterministic template from `seed`.
    pub fn synthetic(seed: u64) -> HandTemplate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |s: f64| 1.0 + rng.random_range(-s..s);

        let bases = [
            [0.030, 0.090, 0.0],
            [0.010, 0.094, 0.0],
            [-0.010, 0.090, 0.0],
            [-0.029, 0.082, 0.0],
            [0.030, 0.025, -0.008],
        ];
        let dirs = [
            unit([0.12, 1.0, 0.0]),
            unit([0.03, 1.0, 0.0]),
            unit([-0.06, 1.0, 0.0]),
            unit([-0.15, 1.0, 0.0]),
            unit([0.6, 0.8, -0.1]),
        ];
        let lengths = [
            [0.040, 0.025, 0.020],
            [0.045, 0.028, 0.022],
            [0.042, 0.026, 0.021],
            [0.032, 0.020, 0.018],
            [0.035, 0.030, 0.025],
        ];
        let radii = [[0.0090, 0.0080, 0.0070], [0.0095, 0.0085, 0.0072], [0.0090, 0.0080, 0.0070], [0.0080, 0.0070, 0.0062], [0.0110, 0.0100, 0.0090]];

        let mut rest_joints = vec![[0.0; 3]; N_JOINTS];
        let mut kinematic_tree = vec![None; N_JOINTS];
        let mut tips = Vec::with_capacity(N_DIGITS);
        let mut bones = Vec::new();
        for k in 0..N_DIGITS {
            let base = [bases[k][0] * jitter(0.04), bases[k][1] * jitter(0.04), bases[k][2]];
            let mut p = base;
            for s in 0..3 {
                let j = digit_joint(k, s);
                rest_joints[j] = p;
                kinematic_tree[j] = Some(if s == 0 { 0 } else { j - 1 });
                let next = add(p, scale(dirs[k], lengths[k][s] * jitter(0.06)));
                bones.push(Bone {
                    a: p,
                    b: next,
                    owner: j,
                    radius: radii[k][s],
                    z_squash: 1.0,
                });
                p = next;
            }
            tips.push(p);
            bones.push(Bone {
                a: [0.0; 3],
                b: base,
                owner: 0,
                radius: 0.016,
                z_squash: 0.55,
            });
        }

        // Vertex budget proportional to capsule surface.
        let areas: Vec<f64> = bones.iter().map(|b| norm(sub(b.b, b.a)) * b.radius).collect();
        let total: f64 = areas.iter().sum();
        let mut counts: Vec<usize> = areas.iter().map(|a| (a / total * N_VERTICES as f64).floor() as usize).collect();
        let mut order: Vec<usize> = (0..bones.len()).collect();
        order.sort_by(|&i, &j| {
            let fi = areas[i] / total * N_VERTICES as f64 - counts[i] as f64;
            let fj = areas[j] / total * N_VERTICES as f64 - counts[j] as f64;
            fj.total_cmp(&fi).then(i.cmp(&j))
        });
        let short = N_VERTICES - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }

        let mut rest_vertices = Vec::with_capacity(N_VERTICES);
        for (bone, &count) in bones.iter().zip(&counts) {
            let axis = unit(sub(bone.b, bone.a));
            let helper = if axis[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
            let e1 = unit(cross(axis, helper));
            let e2 = cross(axis, e1);
            for _ in 0..count {
                let t: f64 = rng.random_range(0.0..1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let mut off = add(scale(e1, phi.cos() * bone.radius), scale(e2, phi.sin() * bone.radius));
                off[2] *= bone.z_squash;
                rest_vertices.push(add(add(bone.a, scale(sub(bone.b, bone.a), t)), off));
            }
        }

        let skinning_weights = skinning(&rest_vertices, &bones);
        let shape_basis = shape_basis(&rest_vertices, &skinning_weights, &rest_joints, &dirs);
        let mut targets = vec![rest_joints[0]];
        for (k, tip) in tips.iter().enumerate() {
            for s in 0..3 {
                targets.push(rest_joints[digit_joint(k, s)]);
            }
            targets.push(*tip);
        }
        let keypoint_regressor = regressor(&rest_vertices, &targets);

        HandTemplate {
            seed,
            kinematic_tree,
            rest_joints,
            rest_vertices,
            skinning_weights,
            shape_basis,
            keypoint_regressor,
            tips,
        }
    }

    pub fn bone_lengths(&self) -> Vec<f64> {
        (1..N_JOINTS)
            .map(|j| norm(sub(self.rest_joints[j], self.rest_joints[self.kinematic_tree[j].expect("non-root")])))
            .collect()
    }

    /// Checks the structural invariants of a (possibly deserialised) template.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HoiError::Config(format!("hand template: {m}")));
        if self.rest_vertices.len() != N_VERTICES
            || self.rest_joints.len() != N_JOINTS
            || self.kinematic_tree.len() != N_JOINTS
            || self.skinning_weights.len() != N_VERTICES * N_JOINTS
            || self.shape_basis.len() != N_SHAPE * N_VERTICES * 3
            || self.keypoint_regressor.len() != N_KEYPOINTS * N_VERTICES
        {
            return bad("array sizes do not match 778 vertices / 16 joints / 21 keypoints");
        }
        if self.kinematic_tree[0].is_some() || self.kinematic_tree[1..].iter().enumerate().any(|(i, p)| p.is_none_or(|p| p > i)) {
            return bad("kinematic tree must be rooted at joint 0 with parents preceding children");
        }
        for (name, m, cols) in [("skinning", &self.skinning_weights, N_JOINTS), ("regressor", &self.keypoint_regressor, N_VERTICES)] {
            for row in m.chunks(cols) {
                if row.iter().any(|w| *w < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad(&format!("{name} rows must be convex"));
                }
            }
        }
        Ok(())
    }
}

fn skinning(verts: &[[f64; 3]], bones: &[Bone]) -> Vec<f64> {
    let mut w = vec![0.0; verts.len() * N_JOINTS];
    for (v, p) in verts.iter().enumerate() {
        let mut d2 = [f64::INFINITY; N_JOINTS];
        for b in bones {
            let d = segment_distance(*p, b.a, b.b);
            d2[b.owner] = d2[b.owner].min(d * d);
        }
        let floor = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let row = &mut w[v * N_JOINTS..(v + 1) * N_JOINTS];
        for j in 0..N_JOINTS {
            row[j] = (-(d2[j] - floor) / (SKIN_WIDTH * SKIN_WIDTH)).exp();
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    w
}

fn shape_basis(verts: &[[f64; 3]], skin: &[f64], joints: &[[f64; 3]], dirs: &[[f64; 3]; N_DIGITS]) -> Vec<f64> {
    let n = verts.len();
    let mut basis = vec![0.0; N_SHAPE * n * 3];
    for (v, p) in verts.iter().enumerate() {
        let w = &skin[v * N_JOINTS..(v + 1) * N_JOINTS];
        let mut fields = [[0.0; 3]; N_SHAPE];
        fields[0] = scale(*p, 0.10);
        fields[1] = [0.10 * p[0], 0.0, 0.0];
        fields[2] = [0.0, 0.10 * p[1], 0.0];
        fields[3] = [0.0, 0.0, 0.25 * p[2]];
        for k in 0..N_DIGITS {
            let base = joints[digit_joint(k, 0)];
            let along = dot(sub(*p, base), dirs[k]).max(0.0);
            let membership: f64 = (0..3).map(|s| w[digit_joint(k, s)]).sum();
            fields[4 + k] = scale(dirs[k], 0.12 * along * membership);
        }
        let palm = (-(p[1] - 0.05).powi(2) / 0.002).exp();
        fields[9] = [0.10 * p[0] * palm, 0.0, 0.0];
        for (k, f) in fields.iter().enumerate() {
            basis[k * n * 3 + v * 3..k * n * 3 + v * 3 + 3].copy_from_slice(f);
        }
    }
    basis
}

fn regressor(verts: &[[f64; 3]], targets: &[[f64; 3]]) -> Vec<f64> {
    let n = verts.len();
    let mut r = vec![0.0; targets.len() * n];
    for (k, t) in targets.iter().enumerate() {
        let mut by_dist: Vec<(f64, usize)> = verts.iter().enumerate().map(|(i, v)| (norm(sub(*v, *t)), i)).collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &by_dist[..REGRESSOR_NEIGHBOURS];
        let total: f64 = near.iter().map(|(d, _)| 1.0 / (d + 1e-3)).sum();
        for (d, i) in near {
            r[k * n + i] = 1.0 / (d + 1e-3) / total;
        }
    }
    r
}

/// Posed hand: every array derived from one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandMesh {
    pub vertices: Vec<[f64; 3]>,
    pub joints21: Vec<[f64; 3]>,
    /// Posed kinematic joints (16).
    pub joints: Vec<[f64; 3]>,
}

/// A template plus the dense matrices the differentiable forward needs.
///
/// Skinning is linear in the homogeneous shaped rest vertex, so for each
/// vertex `v = Σ_j w_vj A_j [x(β); 1] = C(β) · stack(A_jᵀ)` where `C(β)` is
/// affine in β. The same holds after the keypoint regressor.
#[derive(Clone, Debug)]
pub struct HandModel {
    pub template: HandTemplate,
    /// `[778, 64]` and `[10, 778·64]`.
    vert_c0: Vec<f64>,
    vert_c1: Vec<f64>,
    /// `[21, 64]` and `[10, 21·64]`.
    key_c0: Vec<f64>,
    key_c1: Vec<f64>,
    /// `[48]` rest joints and `[10, 48]` joint displacement per coefficient.
    joint_rest: Vec<f64>,
    joint_basis: Vec<f64>,
}

const HOMO: usize = 4 * N_JOINTS;

impl HandModel {
    pub fn new(template: HandTemplate) -> Result<HandModel> {
        template.validate()?;
        let t = &template;
        let n = N_VERTICES;
        let mut vert_c0 = vec![0.0; n * HOMO];
        let mut vert_c1 = vec![0.0; N_SHAPE * n * HOMO];
        for v in 0..n {
            let p = t.rest_vertices[v];
            for j in 0..N_JOINTS {
                let w = t.skinning_weights[v * N_JOINTS + j];
                let c = v * HOMO + 4 * j;
                vert_c0[c..c + 3].copy_from_slice(&scale(p, w));
                vert_c0[c + 3] = w;
                for k in 0..N_SHAPE {
                    let d = &t.shape_basis[k * n * 3 + v * 3..k * n * 3 + v * 3 + 3];
                    for a in 0..3 {
                        vert_c1[k * n * HOMO + c + a] = w * d[a];
                    }
                }
            }
        }
        let regress = |src: &[f64], rows: usize| -> Vec<f64> {
            // src is [rows·n, 64] viewed per block of n rows
            let mut out = vec![0.0; rows * N_KEYPOINTS * HOMO];
            for r in 0..rows {
                for k in 0..N_KEYPOINTS {
                    let dst = &mut out[(r * N_KEYPOINTS + k) * HOMO..(r * N_KEYPOINTS + k + 1) * HOMO];
                    for v in 0..n {
                        let w = t.keypoint_regressor[k * n + v];
                        if w != 0.0 {
                            let row = &src[(r * n + v) * HOMO..(r * n + v + 1) * HOMO];
                            dst.iter_mut().zip(row).for_each(|(d, s)| *d += w * s);
                        }
                    }
                }
            }
            out
        };
        let key_c0 = regress(&vert_c0, 1);
        let key_c1 = regress(&vert_c1, N_SHAPE);

        let joint_rest: Vec<f64> = t.rest_joints.iter().flatten().copied().collect();
        let mut joint_basis = vec![0.0; N_SHAPE * POSE_DIM];
        for j in 0..N_JOINTS {
            let mass: f64 = (0..n).map(|v| t.skinning_weights[v * N_JOINTS + j]).sum();
            for k in 0..N_SHAPE {
                for a in 0..3 {
                    let s: f64 = (0..n).map(|v| t.skinning_weights[v * N_JOINTS + j] * t.shape_basis[k * n * 3 + v * 3 + a]).sum();
                    joint_basis[k * POSE_DIM + 3 * j + a] = s / mass;
                }
            }
        }
        Ok(HandModel {
            template,
            vert_c0,
            vert_c1,
            key_c0,
            key_c1,
            joint_rest,
            joint_basis,
        })
    }

    pub fn synthetic(seed: u64) -> HandModel {
        HandModel::new(HandTemplate::synthetic(seed)).expect("synthetic templates are valid")
    }

    fn check(theta: &Tensor, beta: &Tensor) -> Result<usize> {
        let b = theta.shape().first().copied().unwrap_or(0);
        if theta.shape() != [b, POSE_DIM] || beta.shape() != [b, N_SHAPE] {
            return Err(HoiError::Config(format!(
                "hand forward expects theta [B, {POSE_DIM}] and beta [B, {N_SHAPE}], got {:?} and {:?}",
                theta.shape(),
                beta.shape()
            )));
        }
        Ok(b)
    }

    /// Shape-blended rest joints `[B, 16, 3]`.
    pub fn shaped_joints(&self, beta: &Tensor) -> Result<Tensor> {
        let b = beta.shape()[0];
        let basis = Tensor::new(self.joint_basis.clone(), &[N_SHAPE, POSE_DIM])?;
        let rest = Tensor::new(self.joint_rest.clone(), &[POSE_DIM])?;
        Ok(beta.matmul(&basis)?.add(&rest)?.reshape(&[b, N_JOINTS, 3])?)
    }

    /// Skinning transforms stacked as `[B, 64, 3]` (each `A_j` transposed,
    /// top three rows only), plus posed joints `[B, 16, 3]`.
    pub fn transforms(&self, theta: &Tensor, beta: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = Self::check(theta, beta)?;
        let rot = rodrigues(&theta.reshape(&[b, N_JOINTS, 3])?)?;
        let jrest = self.shaped_joints(beta)?;
        let bottom = Tensor::new([0.0, 0.0, 0.0, 1.0].repeat(b), &[b, 1, 4])?;
        let mut globals: Vec<Tensor> = Vec::with_capacity(N_JOINTS);
        let mut stacked = Vec::with_capacity(N_JOINTS);
        let mut posed = Vec::with_capacity(N_JOINTS);
        for j in 0..N_JOINTS {
            let r = rot.narrow(1, j, 1)?.reshape(&[b, 3, 3])?;
            let jj = jrest.narrow(1, j, 1)?.reshape(&[b, 3, 1])?;
            let parent = self.template.kinematic_tree[j];
            let local_t = match parent {
                None => jj.clone(),
                Some(p) => jj.sub(&jrest.narrow(1, p, 1)?.reshape(&[b, 3, 1])?)?,
            };
            let local = Tensor::concat(&[&Tensor::concat(&[&r, &local_t], 2)?, &bottom], 1)?;
            let g = match parent {
                None => local,
                Some(p) => globals[p].matmul(&local)?,
            };
            let top = g.narrow(1, 0, 3)?;
            let (rg, tg) = (top.narrow(2, 0, 3)?, top.narrow(2, 3, 1)?);
            let ta = tg.sub(&rg.matmul(&jj)?)?;
            stacked.push(Tensor::concat(&[&rg, &ta], 2)?.transpose(1, 2)?);
            posed.push(tg.reshape(&[b, 1, 3])?);
            globals.push(g);
        }
        let s: Vec<&Tensor> = stacked.iter().collect();
        let p: Vec<&Tensor> = posed.iter().collect();
        Ok((Tensor::concat(&s, 1)?, Tensor::concat(&p, 1)?))
    }

    fn blend(&self, beta: &Tensor, c0: &[f64], c1: &[f64], rows: usize, a: &Tensor) -> Result<Tensor> {
        let b = beta.shape()[0];
        let c1 = Tensor::new(c1.to_vec(), &[N_SHAPE, rows * HOMO])?;
        let c0 = Tensor::new(c0.to_vec(), &[rows, HOMO])?;
        let coeff = beta.matmul(&c1)?.reshape(&[b, rows, HOMO])?.add(&c0)?;
        Ok(coeff.matmul(a)?)
    }

    /// Differentiable 21 keypoints `[B, 21, 3]` without materialising vertices.
    pub fn keypoints(&self, theta: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let (a, _) = self.transforms(theta, beta)?;
        self.blend(beta, &self.key_c0, &self.key_c1, N_KEYPOINTS, &a)
    }

    /// Differentiable `(vertices [B,778,3], keypoints [B,21,3], joints [B,16,3])`.
    pub fn forward(&self, theta: &Tensor, beta: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (a, joints) = self.transforms(theta, beta)?;
        let verts = self.blend(beta, &self.vert_c0, &self.vert_c1, N_VERTICES, &a)?;
        let keys = self.blend(beta, &self.key_c0, &self.key_c1, N_KEYPOINTS, &a)?;
        Ok((verts, keys, joints))
    }

    /// Off-tape forward for one hand.
    pub fn mesh(&self, theta: &[f64], beta: &[f64]) -> Result<HandMesh> {
        no_grad(|| {
            let th = Tensor::new(theta.to_vec(), &[1, theta.len()])?;
            let be = Tensor::new(beta.to_vec(), &[1, beta.len()])?;
            let (v, k, j) = self.forward(&th, &be)?;
            let rows = |t: &Tensor| t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            Ok(HandMesh {
                vertices: rows(&v),
                joints21: rows(&k),
                joints: rows(&j),
            })
        })
    }
}

/// Axis-angle `[.., 3]` to rotation matrices `[.., 3, 3]`:
/// `R = I + (sin a / a) K + ((1 − cos a) / a²) K²` with `K = [r]×` and
/// `a = sqrt(|r|² + ε)`, exact identity at `r = 0`.
pub fn rodrigues(r: &Tensor) -> Result<Tensor> {
    let lead = &r.shape()[..r.ndim() - 1];
    let axis = (r.ndim() - 1) as isize;
    let x = r.narrow(axis, 0, 1)?;
    let y = r.narrow(axis, 1, 1)?;
    let z = r.narrow(axis, 2, 1)?;
    let (xx, yy, zz) = (x.square(), y.square(), z.square());
    let a = xx.add(&yy)?.add(&zz)?.add_scalar(RODRIGUES_EPS).sqrt();
    let s = a.sin().div(&a)?;
    let half = a.scale(0.5).sin();
    let c = half.square().scale(2.0).div(&a.square())?;
    let (xy, xz, yz) = (x.mul(&y)?, x.mul(&z)?, y.mul(&z)?);
    let one = |t: &Tensor| t.neg().add_scalar(1.0);
    let entries = [
        one(&c.mul(&yy.add(&zz)?)?),
        c.mul(&xy)?.sub(&s.mul(&z)?)?,
        c.mul(&xz)?.add(&s.mul(&y)?)?,
        c.mul(&xy)?.add(&s.mul(&z)?)?,
        one(&c.mul(&xx.add(&zz)?)?),
        c.mul(&yz)?.sub(&s.mul(&x)?)?,
        c.mul(&xz)?.sub(&s.mul(&y)?)?,
        c.mul(&yz)?.add(&s.mul(&x)?)?,
        one(&c.mul(&xx.add(&yy)?)?),
    ];
    let refs: Vec<&Tensor> = entries.iter().collect();
    let mut shape = lead.to_vec();
    shape.extend_from_slice(&[3, 3]);
    Ok(Tensor::concat(&refs, axis)?.reshape(&shape)?)
}
