//! Experiment harnesses built on train + evaluate: module ablation,
//! per-site strategy substitution, the latent-size sweep and repeated
//! inference with spread statistics.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cvae::LatentMode;
use crate::data::{Dataset, InteractionSample};
use crate::error::{HoiError, Result};
use crate::eval::{evaluate, MetricRow};
use crate::metrics::{higher_is_better, METRIC_NAMES};
use crate::model::{LatentDims, Model, ModelConfig, PredictionBundle};
use crate::train::{fit, TrainConfig, Trainer};

/// How each trained configuration is scored on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub repeats: usize,
    pub mode: LatentMode,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            repeats: 10,
            mode: LatentMode::Sampled,
            seed: 0,
        }
    }
}

/// Trains `model_cfg` from scratch on the train split and scores it on the
/// test split. Returns the metrics and the parameter count.
pub fn train_and_evaluate(data: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig, eval: &EvalSettings) -> Result<(MetricRow, usize)> {
    let mut trainer = Trainer::new(model_cfg, train_cfg)?;
    fit(&mut trainer, &data.train, None)?;
    let report = evaluate(&trainer.model, &data.test, eval.repeats, eval.mode, eval.seed)?;
    Ok((report.metrics, trainer.model.num_params()))
}

/// Column-wise median.
pub fn median_row(rows: &[MetricRow]) -> MetricRow {
    let mut out = [0.0; 11];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut col: Vec<f64> = rows.iter().map(|r| r.values()[c]).collect();
        col.sort_by(f64::total_cmp);
        let n = col.len();
        *slot = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            col[n / 2]
        } else {
            0.5 * (col[n / 2 - 1] + col[n / 2])
        };
    }
    MetricRow::from_values(out)
}

/// Columns where `a` is strictly better than `b`.
pub fn wins(a: &MetricRow, b: &MetricRow) -> usize {
    let (a, b) = (a.values(), b.values());
    (0..a.len())
        .filter(|&c| if higher_is_better(METRIC_NAMES[c]) { a[c] > b[c] } else { a[c] < b[c] })
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cross: bool,
    pub deq: bool,
    pub res: bool,
    pub num_params: usize,
    /// Median over seeds.
    pub metrics: MetricRow,
    pub per_seed: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub columns: Vec<String>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
}

/// The all-disabled row, then single modules, pairs and the full model.
pub const ABLATION_ROWS: [[bool; 3]; 8] = [
    [false, false, false],
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
    [true, true, true],
];

fn columns() -> Vec<String> {
    METRIC_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Trains every toggle combination under each seed (the training seed;
/// the evaluation seed is shared).
pub fn run_ablation(data: &Dataset, base: &ModelConfig, train_cfg: &TrainConfig, eval: &EvalSettings, seeds: &[u64], rows: &[[bool; 3]]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(HoiError::Config("ablation needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(rows.len());
    for &[cross, deq, res] in rows {
        let cfg = ModelConfig {
            enable_cross: cross,
            enable_deq: deq,
            enable_res: res,
            ..base.clone()
        };
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut num_params = 0;
        for &seed in seeds {
            log::info!("ablation cross={cross} deq={deq} res={res} seed={seed}");
            let (row, n) = train_and_evaluate(data, &cfg, &TrainConfig { seed, ..train_cfg.clone() }, eval)?;
            per_seed.push(row);
            num_params = n;
        }
        out.push(AblationRow {
            cross,
            deq,
            res,
            num_params,
            metrics: median_row(&per_seed),
            per_seed,
        });
    }
    Ok(AblationReport {
        columns: columns(),
        seeds: seeds.to_vec(),
        epochs: train_cfg.epochs,
        rows: out,
    })
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "x" } else { " " };
        let mut s = format!("| Cross | DEQ | Res | {} |\n", self.columns.join(" | "));
        s.push_str(&format!("|---|---|---|{}\n", "---|".repeat(self.columns.len())));
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} | {} | {} |", mark(r.cross), mark(r.deq), mark(r.res), fmt_values(&r.metrics));
        }
        s
    }
}

fn fmt_values(m: &MetricRow) -> String {
    m.values().iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" | ")
}

/// Constraint sites whose unit can be substituted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Cross,
    Deq,
    Res,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Cross, Site::Deq, Site::Res];

    /// The strategy each site uses in the full model.
    pub fn default_strategy(self) -> &'static str {
        match self {
            Site::Cross => "parallel-cross",
            Site::Deq => "deq",
            Site::Res => "residual",
        }
    }

    pub fn apply(self, base: &ModelConfig, strategy: &str) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Site::Cross => cfg.intention_strategy = strategy.into(),
            Site::Deq => cfg.fusion_strategy = strategy.into(),
            Site::Res => cfg.correction_strategy = strategy.into(),
        }
        cfg
    }
}

/// Substitutes evaluated at every site, followed by the site's own unit.
pub const SUBSTITUTES: [&str; 3] = ["sum", "concat", "series-cross"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModificationRow {
    pub site: Site,
    pub strategy: String,
    pub num_params: usize,
    pub metrics: MetricRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModificationReport {
    pub columns: Vec<String>,
    pub seed: u64,
    pub epochs: usize,
    pub rows: Vec<ModificationRow>,
}

/// For each site, trains the base model with that site's unit replaced by
/// each substitute, then with its default unit. The default row is trained
/// once and repeated under every site.
pub fn run_modification(data: &Dataset, base: &ModelConfig, train_cfg: &TrainConfig, eval: &EvalSettings) -> Result<ModificationReport> {
    let full = ModelConfig {
        enable_cross: true,
        enable_deq: true,
        enable_res: true,
        ..base.clone()
    };
    let mut default_row: Option<(MetricRow, usize)> = None;
    let mut rows = Vec::new();
    for site in Site::ALL {
        for strategy in SUBSTITUTES.iter().copied().chain([site.default_strategy()]) {
            let cfg = site.apply(&full, strategy);
            let is_default = cfg.intention_strategy == Site::Cross.default_strategy()
                && cfg.fusion_strategy == Site::Deq.default_strategy()
                && cfg.correction_strategy == Site::Res.default_strategy();
            let (metrics, num_params) = match (&default_row, is_default) {
                (Some(row), true) => row.clone(),
                _ => {
                    log::info!("modification {site:?} -> {strategy}");
                    let row = train_and_evaluate(data, &cfg, train_cfg, eval)?;
                    if is_default {
                        default_row = Some(row.clone());
                    }
                    row
                }
            };
            rows.push(ModificationRow {
                site,
                strategy: strategy.into(),
                num_params,
                metrics,
            });
        }
    }
    Ok(ModificationReport {
        columns: columns(),
        seed: train_cfg.seed,
        epochs: train_cfg.epochs,
        rows,
    })
}

impl ModificationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| module | method | {} |\n", self.columns.join(" | "));
        s.push_str(&format!("|---|---|{}\n", "---|".repeat(self.columns.len())));
        for r in &self.rows {
            let _ = writeln!(s, "| {:?} | {} | {} |", r.site, r.strategy, fmt_values(&r.metrics));
        }
        s
    }
}

/// Decoder heads and the metric columns each one is judged by.
pub const HEAD_METRICS: [(&str, &[usize]); 5] = [
    ("trend", &[0, 1]),
    ("hotspot", &[2, 3, 4]),
    ("pose", &[5]),
    ("contact", &[6, 7, 8]),
    ("mani", &[9, 10]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub dim: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadCurve {
    pub head: String,
    /// Metric name to its value at each swept dimension.
    pub series: Vec<(String, Vec<SeriesPoint>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSweep {
    pub dims: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    /// Full metric row of each trained dimension.
    pub rows: Vec<MetricRow>,
    pub curves: Vec<HeadCurve>,
}

pub const DEFAULT_SWEEP_DIMS: [usize; 5] = [8, 16, 32, 64, 128];

/// Trains one model per latent size, with every head using that size.
pub fn run_latent_sweep(data: &Dataset, base: &ModelConfig, train_cfg: &TrainConfig, eval: &EvalSettings, dims: &[usize]) -> Result<LatentSweep> {
    if dims.is_empty() {
        return Err(HoiError::Config("latent sweep needs at least one dimension".into()));
    }
    let mut rows = Vec::with_capacity(dims.len());
    for &dim in dims {
        log::info!("latent sweep dim={dim}");
        let cfg = ModelConfig {
            latent: LatentDims::uniform(dim),
            ..base.clone()
        };
        rows.push(train_and_evaluate(data, &cfg, train_cfg, eval)?.0);
    }
    let curves = HEAD_METRICS
        .iter()
        .map(|(head, cols)| HeadCurve {
            head: head.to_string(),
            series: cols
                .iter()
                .map(|&c| {
                    let points = dims.iter().zip(&rows).map(|(&dim, r)| SeriesPoint { dim, value: r.values()[c] }).collect();
                    (METRIC_NAMES[c].to_string(), points)
                })
                .collect(),
        })
        .collect();
    Ok(LatentSweep {
        dims: dims.to_vec(),
        epochs: train_cfg.epochs,
        seed: train_cfg.seed,
        rows,
        curves,
    })
}

const PALETTE: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

impl HeadCurve {
    /// Line chart over log2(dim). Each metric is min-max scaled to the plot
    /// height; its legend entry gives the raw range.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (480.0, 300.0, 48.0);
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
        let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">{} head</text>", w / 2.0, self.head);
        let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - m, w - m, h - m);
        let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m);
        let dims: Vec<usize> = self.series.first().map(|(_, p)| p.iter().map(|q| q.dim).collect()).unwrap_or_default();
        let lx: Vec<f64> = dims.iter().map(|&d| (d as f64).log2()).collect();
        let (x0, x1) = lx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let sx = |v: f64| if x1 > x0 { m + (v - x0) / (x1 - x0) * (w - 2.0 * m) } else { w / 2.0 };
        for (d, x) in dims.iter().zip(&lx) {
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{d}</text>", sx(*x), h - m + 16.0);
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">latent dimension</text>", w / 2.0, h - 8.0);
        for (k, (name, points)) in self.series.iter().enumerate() {
            let colour = PALETTE[k % PALETTE.len()];
            let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.value), b.max(p.value)));
            let sy = |v: f64| if hi > lo { h - m - (v - lo) / (hi - lo) * (h - 2.0 * m) } else { h / 2.0 };
            let path: Vec<String> = points.iter().zip(&lx).map(|(p, &x)| format!("{:.1},{:.1}", sx(x), sy(p.value))).collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
            for pt in &path {
                let (x, y) = pt.split_once(',').expect("formatted as x,y");
                let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{colour}\"/>");
            }
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{colour}\">{name} [{lo:.3}, {hi:.3}]</text>",
                m + 8.0,
                m + 14.0 * k as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Per-element spread over repeated inference on one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    /// Mean over waypoints of the per-coordinate standard deviation.
    pub trend_std: f64,
    pub mani_std: f64,
    /// Mean distance of the predicted contact points from their centroid.
    pub hotspot_dispersion: f64,
    pub theta_std: f64,
    /// Fraction of repeats that mark each vertex in contact.
    pub contact_votes: Vec<f64>,
    /// Vertices on which the repeats disagree.
    pub contact_disagreement: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub sample_id: String,
    pub repeats: usize,
    pub mode: LatentMode,
    pub bundles: Vec<PredictionBundle>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spread: Option<Spread>,
}

fn std_of(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn waypoint_std(tracks: &[&Vec<[f64; 2]>]) -> f64 {
    let len = tracks[0].len();
    let mut acc = 0.0;
    for i in 0..len {
        for c in 0..2 {
            acc += std_of(&tracks.iter().map(|t| t[i][c]).collect::<Vec<_>>());
        }
    }
    acc / (2 * len) as f64
}

pub fn spread(bundles: &[PredictionBundle]) -> Spread {
    let n = bundles.len() as f64;
    let trend: Vec<_> = bundles.iter().map(|b| &b.trend).collect();
    let mani: Vec<_> = bundles.iter().map(|b| &b.mani).collect();
    let pts: Vec<[f64; 2]> = bundles.iter().map(|b| b.hotspot.point).collect();
    let centre = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let hotspot_dispersion = pts.iter().map(|p| ((p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2)).sqrt()).sum::<f64>() / n;
    let dims = bundles[0].theta.len();
    let theta_std = (0..dims).map(|k| std_of(&bundles.iter().map(|b| b.theta[k]).collect::<Vec<_>>())).sum::<f64>() / dims as f64;
    let verts = bundles[0].contact_mask.len();
    let contact_votes: Vec<f64> = (0..verts).map(|v| bundles.iter().filter(|b| b.contact_mask[v]).count() as f64 / n).collect();
    let contact_disagreement = contact_votes.iter().filter(|&&f| f > 0.0 && f < 1.0).count();
    Spread {
        trend_std: waypoint_std(&trend),
        mani_std: waypoint_std(&mani),
        hotspot_dispersion,
        theta_std,
        contact_votes,
        contact_disagreement,
    }
}

/// Repeats inference on one sample with fresh latent draws. Spread is
/// omitted for a single repeat.
pub fn infer(model: &Model, sample: &InteractionSample, repeats: usize, mode: LatentMode, seed: u64) -> Result<InferenceReport> {
    if repeats == 0 {
        return Err(HoiError::Config("repeats must be at least 1".into()));
    }
    sample.validate(model.cfg.n_c, model.cfg.n_m)?;
    let batch = model.batch(&vec![sample; repeats])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundles = model.predict(&batch, mode, &mut rng)?;
    let spread = (repeats > 1).then(|| spread(&bundles));
    Ok(InferenceReport {
        sample_id: sample.sample_id.clone(),
        repeats,
        mode,
        bundles,
        spread,
    })
}
