//! Evaluation metrics on plain values: trajectory displacement, saliency
//! agreement of hotspot maps, aligned joint error, and contact P/R/F1.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{HoiError, Result};

/// Metric columns of every report, in table order.
pub const METRIC_NAMES: [&str; 11] = [
    "trend_ade",
    "trend_fde",
    "sim",
    "auc_j",
    "nss",
    "pa_mpjpe",
    "precision",
    "recall",
    "f1",
    "mani_ade",
    "mani_fde",
];

/// Whether a larger value is better, per [`METRIC_NAMES`] entry.
pub fn higher_is_better(name: &str) -> bool {
    !matches!(name, "trend_ade" | "trend_fde" | "mani_ade" | "mani_fde" | "pa_mpjpe")
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(HoiError::Degenerate(format!("waypoint lists must be non-empty and equal in length ({a} vs {b})")));
    }
    Ok(())
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Mean Euclidean distance over corresponding waypoints.
pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(a, b)| dist2(*a, *b)).sum::<f64>() / pred.len() as f64)
}

/// Euclidean distance between the final waypoints.
pub fn fde(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    Ok(dist2(pred[pred.len() - 1], gt[gt.len() - 1]))
}

fn normalized(map: &[f64], what: &str) -> Result<Vec<f64>> {
    let total: f64 = map.iter().sum();
    if !(total > 0.0) || map.iter().any(|v| *v < 0.0) {
        return Err(HoiError::Degenerate(format!("{what} map must be non-negative with positive mass")));
    }
    Ok(map.iter().map(|v| v / total).collect())
}

/// Histogram intersection of the two maps after normalising each to sum 1.
pub fn sim(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(HoiError::Degenerate("maps differ in size".into()));
    }
    let (p, g) = (normalized(pred, "predicted")?, normalized(gt, "ground-truth")?);
    Ok(p.iter().zip(&g).map(|(a, b)| a.min(*b)).sum())
}

/// Mean z-score of the map at the fixation cells, using the population
/// standard deviation. A constant map scores 0.
pub fn nss(map: &[f64], fixations: &[usize]) -> Result<f64> {
    if fixations.is_empty() || fixations.iter().any(|&f| f >= map.len()) {
        return Err(HoiError::Degenerate("nss needs at least one in-range fixation".into()));
    }
    let n = map.len() as f64;
    let mean = map.iter().sum::<f64>() / n;
    let std = (map.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Ok(0.0);
    }
    Ok(fixations.iter().map(|&f| (map[f] - mean) / std).sum::<f64>() / fixations.len() as f64)
}

/// Judd ROC area: one threshold per fixation saliency value; the true
/// positive rate is over fixations and the false positive rate over the
/// remaining cells, with the curve closed at (0,0) and (1,1).
pub fn auc_j(map: &[f64], fixations: &[usize]) -> Result<f64> {
    let mut fix: Vec<usize> = fixations.to_vec();
    fix.sort_unstable();
    fix.dedup();
    if fix.is_empty() || fix.iter().any(|&f| f >= map.len()) {
        return Err(HoiError::Degenerate("auc_j needs at least one in-range fixation".into()));
    }
    let mut is_fix = vec![false; map.len()];
    fix.iter().for_each(|&f| is_fix[f] = true);
    let mut others: Vec<f64> = map.iter().zip(&is_fix).filter(|(_, f)| !**f).map(|(v, _)| *v).collect();
    others.sort_by(|a, b| b.total_cmp(a));
    let mut thresholds: Vec<f64> = fix.iter().map(|&f| map[f]).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));

    let n_fix = thresholds.len() as f64;
    let n_other = others.len().max(1) as f64;
    let mut curve = vec![(0.0, 0.0)];
    let mut above = 0;
    for (i, t) in thresholds.iter().enumerate() {
        // tied fixations share one threshold, hence one curve point
        if thresholds.get(i + 1) == Some(t) {
            continue;
        }
        while above < others.len() && others[above] >= *t {
            above += 1;
        }
        curve.push((above as f64 / n_other, (i + 1) as f64 / n_fix));
    }
    curve.push((1.0, 1.0));
    Ok(curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// Rigid map `x -> s R x + v` (`s = 1` unless scale was requested).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcrustesTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub scale: f64,
}

impl ProcrustesTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i])
    }
}

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    points.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares alignment of `pred` onto `gt` by SVD of the
/// cross-covariance, with the reflection corrected so `det R = +1`.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]], with_scale: bool) -> Result<ProcrustesTransform> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(HoiError::Degenerate("point sets must be non-empty and equal in size".into()));
    }
    let (cp, cg) = (centroid(pred), centroid(gt));
    let spread = |pts: &[[f64; 3]], c: &Vector3<f64>| pts.iter().map(|p| (Vector3::from(*p) - c).norm_squared()).sum::<f64>();
    let pred_spread = spread(pred, &cp);
    if pred_spread < 1e-24 || spread(gt, &cg) < 1e-24 {
        return Err(HoiError::Degenerate("all points coincide; alignment is undefined".into()));
    }
    let mut h = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        h += (Vector3::from(*p) - cp) * (Vector3::from(*g) - cg).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v_t.transpose() * fix * u.transpose();
    let s = if with_scale {
        let sv = svd.singular_values;
        (sv[0] + sv[1] + d * sv[2]) / pred_spread
    } else {
        1.0
    };
    let v = cg - s * r * cp;
    Ok(ProcrustesTransform {
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
        translation: [v[0], v[1], v[2]],
        scale: s,
    })
}

/// Reporting multiplier applied to aligned joint error.
pub const MILLI: f64 = 1000.0;

/// Mean per-joint distance after rigid alignment, times [`MILLI`].
pub fn pa_mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    let t = procrustes_align(pred, gt, false)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (Vector3::from(t.apply(*p)) - Vector3::from(*g)).norm())
        .sum();
    Ok(MILLI * total / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn contact_prf(pred: &[bool], gt: &[bool]) -> Result<Prf> {
    if pred.len() != gt.len() {
        return Err(HoiError::Degenerate("contact masks differ in length".into()));
    }
    let tp = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count() as f64;
    let np = pred.iter().filter(|p| **p).count() as f64;
    let ng = gt.iter().filter(|g| **g).count() as f64;
    let mut degenerate = false;
    let mut ratio = |a: f64, b: f64| {
        if b == 0.0 {
            degenerate = true;
            0.0
        } else {
            a / b
        }
    };
    let precision = ratio(tp, np);
    let recall = ratio(tp, ng);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Ok(Prf {
        precision,
        recall,
        f1,
        degenerate,
    })
}
