//! Repeated stochastic evaluation over a split, and the reference
//! baselines the learned model is compared against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvae::LatentMode;
use crate::data::InteractionSample;
use crate::error::{HoiError, Result};
use crate::hand::{HandModel, N_SHAPE, POSE_DIM};
use crate::metrics::{ade, auc_j, contact_prf, fde, nss, pa_mpjpe, sim, METRIC_NAMES};
use crate::model::{sample_hotspot, sample_joints, Model, PredictionBundle};

/// The reported metric columns, in report order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub trend_ade: f64,
    pub trend_fde: f64,
    pub sim: f64,
    pub auc_j: f64,
    pub nss: f64,
    pub pa_mpjpe: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mani_ade: f64,
    pub mani_fde: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 11] {
        [
            self.trend_ade,
            self.trend_fde,
            self.sim,
            self.auc_j,
            self.nss,
            self.pa_mpjpe,
            self.precision,
            self.recall,
            self.f1,
            self.mani_ade,
            self.mani_fde,
        ]
    }

    pub fn from_values(v: [f64; 11]) -> Self {
        MetricRow {
            trend_ade: v[0],
            trend_fde: v[1],
            sim: v[2],
            auc_j: v[3],
            nss: v[4],
            pa_mpjpe: v[5],
            precision: v[6],
            recall: v[7],
            f1: v[8],
            mani_ade: v[9],
            mani_fde: v[10],
        }
    }

    pub fn named(&self) -> Vec<(&'static str, f64)> {
        METRIC_NAMES.iter().copied().zip(self.values()).collect()
    }

    /// Column-wise mean.
    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let mut acc = [0.0; 11];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        MetricRow::from_values(acc.map(|a| a / rows.len().max(1) as f64))
    }
}

/// Metrics of one prediction against its sample. Displacement errors skip
/// the first waypoint, which is given rather than predicted.
pub fn score(bundle: &PredictionBundle, sample: &InteractionSample, model: &Model) -> Result<(MetricRow, bool)> {
    let cfg = &model.cfg;
    let gt_map = sample_hotspot(cfg, sample)?;
    let fixation = [gt_map.cell_of(sample.gt_hotspot_point)];
    let pred_map = &bundle.hotspot.grid.values;
    let gt_mask: Vec<bool> = sample.gt_contact.iter().map(|&c| c == 1).collect();
    let prf = contact_prf(&bundle.contact_mask, &gt_mask)?;
    let row = MetricRow {
        trend_ade: ade(&bundle.trend[1..], &sample.gt_trend[1..])?,
        trend_fde: fde(&bundle.trend[1..], &sample.gt_trend[1..])?,
        sim: sim(pred_map, &gt_map.values)?,
        auc_j: auc_j(pred_map, &fixation)?,
        nss: nss(pred_map, &fixation)?,
        pa_mpjpe: pa_mpjpe(&bundle.joints21, &sample_joints(&model.hand, sample)?)?,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        mani_ade: ade(&bundle.mani[1..], &sample.gt_mani[1..])?,
        mani_fde: fde(&bundle.mani[1..], &sample.gt_mani[1..])?,
    };
    Ok((row, prf.degenerate))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub repeats: usize,
    pub mode: LatentMode,
    pub seed: u64,
    /// Mean over samples, then over repeats.
    pub metrics: MetricRow,
    pub per_repeat: Vec<MetricRow>,
    /// Sample-repeat pairs where precision or recall had an empty denominator.
    pub degenerate_contact: usize,
}

/// Samples per prediction batch during evaluation.
pub const EVAL_CHUNK: usize = 25;

/// Predictions for `samples`, one latent stream per chunk so the result
/// does not depend on how chunks are scheduled.
pub fn predict_all(model: &Model, samples: &[InteractionSample], mode: LatentMode, seed: u64) -> Result<Vec<PredictionBundle>> {
    let chunks: Vec<Vec<PredictionBundle>> = samples
        .par_chunks(EVAL_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let refs: Vec<&InteractionSample> = chunk.iter().collect();
            let batch = model.batch(&refs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
            model.predict(&batch, mode, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Averages every metric over `samples` and then over `repeats` runs of
/// inference with independent latent draws.
pub fn evaluate(model: &Model, samples: &[InteractionSample], repeats: usize, mode: LatentMode, seed: u64) -> Result<EvalReport> {
    if samples.is_empty() || repeats == 0 {
        return Err(HoiError::Config("evaluation needs at least one sample and one repeat".into()));
    }
    let mut per_repeat = Vec::with_capacity(repeats);
    let mut degenerate = 0;
    for r in 0..repeats {
        let bundles = predict_all(model, samples, mode, seed.wrapping_add(r as u64).wrapping_mul(0x9e37_79b9))?;
        let scored = bundles.par_iter().zip(samples).map(|(b, s)| score(b, s, model)).collect::<Result<Vec<_>>>()?;
        degenerate += scored.iter().filter(|(_, d)| *d).count();
        let rows: Vec<MetricRow> = scored.into_iter().map(|(row, _)| row).collect();
        per_repeat.push(MetricRow::mean(&rows));
    }
    Ok(EvalReport {
        n_samples: samples.len(),
        repeats,
        mode,
        seed,
        metrics: MetricRow::mean(&per_repeat),
        per_repeat,
        degenerate_contact: degenerate,
    })
}

/// Reference predictors that use no learned parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Every test trend predicted as the mean training waypoints.
    pub trend_ade: f64,
    pub mani_ade: f64,
    /// Every hand predicted in the rest pose with the mean shape.
    pub pa_mpjpe: f64,
}

fn mean_waypoints(tracks: &[&Vec<[f64; 2]>]) -> Vec<[f64; 2]> {
    let n = tracks[0].len();
    (0..n)
        .map(|i| {
            let s = tracks.iter().fold([0.0, 0.0], |a, t| [a[0] + t[i][0], a[1] + t[i][1]]);
            [s[0] / tracks.len() as f64, s[1] / tracks.len() as f64]
        })
        .collect()
}

pub fn baselines(train: &[InteractionSample], test: &[InteractionSample], hand: &HandModel) -> Result<Baselines> {
    if train.is_empty() || test.is_empty() {
        return Err(HoiError::Config("baselines need both splits".into()));
    }
    let trend = mean_waypoints(&train.iter().map(|s| &s.gt_trend).collect::<Vec<_>>());
    let mani = mean_waypoints(&train.iter().map(|s| &s.gt_mani).collect::<Vec<_>>());
    let rest = hand.mesh(&[0.0; POSE_DIM], &[0.0; N_SHAPE])?.joints21;
    let n = test.len() as f64;
    let mut out = Baselines {
        trend_ade: 0.0,
        mani_ade: 0.0,
        pa_mpjpe: 0.0,
    };
    for s in test {
        out.trend_ade += ade(&trend[1..], &s.gt_trend[1..])? / n;
        out.mani_ade += ade(&mani[1..], &s.gt_mani[1..])? / n;
        out.pa_mpjpe += pa_mpjpe(&rest, &sample_joints(hand, s)?)? / n;
    }
    Ok(out)
}
