//! Direct loop transcriptions of each metric formula. They share no code
//! with the library; the rigid alignment uses the quaternion eigenvector
//! route instead of an SVD.

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};

pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        let dx = pred[i][0] - gt[i][0];
        let dy = pred[i][1] - gt[i][1];
        total += (dx * dx + dy * dy).sqrt();
    }
    total / pred.len() as f64
}

pub fn fde(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    let n = pred.len() - 1;
    let dx = pred[n][0] - gt[n][0];
    let dy = pred[n][1] - gt[n][1];
    (dx * dx + dy * dy).sqrt()
}

pub fn sim(pred: &[f64], gt: &[f64]) -> f64 {
    let mut sp = 0.0;
    let mut sg = 0.0;
    for i in 0..pred.len() {
        sp += pred[i];
        sg += gt[i];
    }
    let mut total = 0.0;
    for i in 0..pred.len() {
        let a = pred[i] / sp;
        let b = gt[i] / sg;
        total += if a < b { a } else { b };
    }
    total
}

pub fn nss(map: &[f64], fixations: &[usize]) -> f64 {
    let n = map.len() as f64;
    let mut mean = 0.0;
    for v in map {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in map {
        var += (v - mean) * (v - mean);
    }
    let std = (var / n).sqrt();
    if std == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for &f in fixations {
        total += (map[f] - mean) / std;
    }
    total / fixations.len() as f64
}

/// One ROC point per distinct fixation value, counting cells at or above it.
pub fn auc_j(map: &[f64], fixations: &[usize]) -> f64 {
    let mut fix = fixations.to_vec();
    fix.sort();
    fix.dedup();
    let mut levels: Vec<f64> = fix.iter().map(|&f| map[f]).collect();
    levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
    levels.dedup();
    let n_other = (map.len() - fix.len()) as f64;
    let mut points = vec![(0.0, 0.0)];
    for t in levels {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (i, v) in map.iter().enumerate() {
            if *v >= t {
                if fix.contains(&i) {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        points.push((if n_other > 0.0 { fp / n_other } else { 0.0 }, tp / fix.len() as f64));
    }
    points.push((1.0, 1.0));
    let mut area = 0.0;
    for i in 1..points.len() {
        area += (points[i].0 - points[i - 1].0) * (points[i].1 + points[i - 1].1) * 0.5;
    }
    area
}

/// Optimal rotation from the top eigenvector of Horn's 4×4 matrix.
pub fn rigid_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> (UnitQuaternion<f64>, Vector3<f64>) {
    let n = pred.len() as f64;
    let mut cp = Vector3::zeros();
    let mut cg = Vector3::zeros();
    for i in 0..pred.len() {
        cp += Vector3::from(pred[i]) / n;
        cg += Vector3::from(gt[i]) / n;
    }
    let mut s = [[0.0; 3]; 3];
    for i in 0..pred.len() {
        let a = Vector3::from(pred[i]) - cp;
        let b = Vector3::from(gt[i]) - cg;
        for r in 0..3 {
            for c in 0..3 {
                s[r][c] += a[r] * b[c];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let k = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = k.symmetric_eigen();
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let q = eig.eigenvectors.column(best);
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    (rot, cg - rot * cp)
}

pub fn pa_mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let (rot, t) = rigid_align(pred, gt);
    let mut total = 0.0;
    for i in 0..pred.len() {
        total += (rot * Vector3::from(pred[i]) + t - Vector3::from(gt[i])).norm();
    }
    1000.0 * total / pred.len() as f64
}

pub fn prf(pred: &[bool], gt: &[bool]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        match (pred[i], gt[i]) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}
