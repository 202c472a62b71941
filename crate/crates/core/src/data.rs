//! Interaction samples, the synthetic scenario generator, waypoint
//! resampling, stub feature encoders and schema-checked JSON IO.
//!
//! Ground truths are smooth functions of `(verb, noun, scene)` plus bounded
//! noise: a verb fixes the trajectory curvature family, the manipulation
//! motion, the pose cluster and the fingertip contact pattern; a noun fixes
//! where its object sits and where on it the hand lands.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use hoi_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HoiError, Result};
use crate::hand::{HandTemplate, N_SHAPE, N_VERTICES, POSE_DIM};
use crate::nn::{Binding, Builder, Init, Linear, ParamId};

pub const SCHEMA_VERSION: &str = "1";
/// Scene tokens per feature stream.
pub const N_TOKENS: usize = 16;
pub const CONTEXT_DIM: usize = 8;
/// Object position, hand start, hand side, context.
pub const SCENE_DIM: usize = 2 + 2 + 1 + CONTEXT_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
}

impl HandSide {
    /// `+1` for right, `-1` for left; mirrors horizontal motion.
    pub fn sign(self) -> f64 {
        match self {
            HandSide::Right => 1.0,
            HandSide::Left => -1.0,
        }
    }
}

/// What the stub "sees" of a scene in place of an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLatent {
    pub object_position: [f64; 2],
    pub hand_start: [f64; 2],
    pub context: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSample {
    pub schema_version: String,
    pub sample_id: String,
    pub verb_id: usize,
    pub noun_id: usize,
    pub hand_side: HandSide,
    pub scene_latent: SceneLatent,
    /// Seconds between the scene frame and contact; metadata only.
    pub frame_offset_s: f64,
    pub gt_hotspot_point: [f64; 2],
    /// Hand start followed by `n_c` waypoints ending at the contact point.
    pub gt_trend: Vec<[f64; 2]>,
    /// Contact point followed by `n_m` manipulation waypoints.
    pub gt_mani: Vec<[f64; 2]>,
    pub gt_theta: Vec<f64>,
    pub gt_beta: Vec<f64>,
    pub gt_contact: Vec<u8>,
}

impl InteractionSample {
    /// Scene feature vector of length [`SCENE_DIM`].
    pub fn scene_features(&self) -> Vec<f64> {
        let s = &self.scene_latent;
        let mut v = Vec::with_capacity(SCENE_DIM);
        v.extend_from_slice(&s.object_position);
        v.extend_from_slice(&s.hand_start);
        v.push(self.hand_side.sign());
        v.extend_from_slice(&s.context);
        v
    }

    pub fn validate(&self, n_c: usize, n_m: usize) -> Result<()> {
        let bad = |path: &str, message: String| Err(HoiError::Schema { path: path.into(), message });
        if self.schema_version != SCHEMA_VERSION {
            return bad("schema_version", format!("unsupported version `{}` (expected `{SCHEMA_VERSION}`)", self.schema_version));
        }
        if self.gt_trend.len() != n_c + 1 {
            return bad("gt_trend", format!("expected {} waypoints, got {}", n_c + 1, self.gt_trend.len()));
        }
        if self.gt_mani.len() != n_m + 1 {
            return bad("gt_mani", format!("expected {} waypoints, got {}", n_m + 1, self.gt_mani.len()));
        }
        if self.gt_theta.len() != POSE_DIM {
            return bad("gt_theta", format!("expected {POSE_DIM} values, got {}", self.gt_theta.len()));
        }
        if self.gt_beta.len() != N_SHAPE {
            return bad("gt_beta", format!("expected {N_SHAPE} values, got {}", self.gt_beta.len()));
        }
        if self.gt_contact.len() != N_VERTICES || self.gt_contact.iter().any(|&c| c > 1) {
            return bad("gt_contact", format!("expected {N_VERTICES} binary values"));
        }
        if self.scene_latent.context.len() != CONTEXT_DIM {
            return bad("scene_latent.context", format!("expected {CONTEXT_DIM} values"));
        }
        let unit = |p: &[f64; 2]| p.iter().all(|x| (0.0..=1.0).contains(x));
        for (name, pts) in [("gt_trend", &self.gt_trend), ("gt_mani", &self.gt_mani)] {
            if let Some(i) = pts.iter().position(|p| !unit(p)) {
                return bad(&format!("{name}[{i}]"), "waypoint outside the unit square".into());
            }
        }
        if !unit(&self.gt_hotspot_point) {
            return bad("gt_hotspot_point", "outside the unit square".into());
        }
        let (end, start) = (self.gt_trend[n_c], self.gt_mani[0]);
        if (end[0] - start[0]).abs() > 1e-9 || (end[1] - start[1]).abs() > 1e-9 {
            return bad("gt_mani[0]", "does not continue from the trend endpoint".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub n_c: usize,
    pub n_m: usize,
    /// Multiplies every per-sample noise amplitude.
    pub noise_scale: f64,
    pub hand_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_train: 500,
            n_test: 100,
            n_verbs: 16,
            n_nouns: 32,
            n_c: 3,
            n_m: 3,
            noise_scale: 1.0,
            hand_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_verbs == 0 || self.n_nouns == 0 || self.n_c == 0 || self.n_m == 0 {
            return Err(HoiError::Config("vocabulary sizes and waypoint counts must be positive".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(HoiError::Config("noise_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Sample files relative to the manifest's directory.
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<InteractionSample>,
    pub test: Vec<InteractionSample>,
}

/// `k` points at equal arc-length spacing along `raw`, excluding its start
/// and including its end.
pub fn resample_waypoints(raw: &[[f64; 2]], k: usize) -> Result<Vec<[f64; 2]>> {
    if raw.len() < 2 {
        return Err(HoiError::Degenerate(format!("a track needs at least 2 points, got {}", raw.len())));
    }
    let seg: Vec<f64> = raw.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).collect();
    let total: f64 = seg.iter().sum();
    if total == 0.0 {
        return Ok(vec![raw[0]; k]);
    }
    let mut out = Vec::with_capacity(k);
    let (mut i, mut walked) = (0, 0.0);
    for j in 1..=k {
        let target = total * j as f64 / k as f64;
        while i < seg.len() - 1 && walked + seg[i] < target {
            walked += seg[i];
            i += 1;
        }
        if j == k {
            out.push(raw[raw.len() - 1]);
            continue;
        }
        let t = if seg[i] > 0.0 { ((target - walked) / seg[i]).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (raw[i], raw[i + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(out)
}

/// Per-verb generative structure.
#[derive(Clone, Debug)]
struct VerbFamily {
    curvature: f64,
    mani_angle: f64,
    mani_length: f64,
    mani_curvature: f64,
    theta: Vec<f64>,
    /// Fingertips in contact.
    tips: Vec<usize>,
}

#[derive(Clone, Debug)]
struct NounFamily {
    position: [f64; 2],
    hotspot_offset: [f64; 2],
}

struct Tables {
    verbs: Vec<VerbFamily>,
    nouns: Vec<NounFamily>,
    /// `[N_SHAPE × CONTEXT_DIM]`, maps context to shape.
    shape_map: Vec<f64>,
    rest_vertices: Vec<[f64; 3]>,
    tip_positions: Vec<[f64; 3]>,
}

fn tables(cfg: &GeneratorConfig, seed: u64) -> Tables {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ab1e5);
    let verbs = (0..cfg.n_verbs)
        .map(|_| {
            let mut tips: Vec<usize> = (0..5).filter(|_| rng.random_bool(0.5)).collect();
            if tips.is_empty() {
                tips.push(rng.random_range(0..5));
            }
            VerbFamily {
                curvature: rng.random_range(-0.25..0.25),
                mani_angle: rng.random_range(0.0..2.0 * PI),
                mani_length: rng.random_range(0.08..0.2),
                mani_curvature: rng.random_range(-0.2..0.2),
                theta: (0..POSE_DIM).map(|i| if i < 3 { rng.random_range(-0.3..0.3) } else { rng.random_range(-0.5..0.5) }).collect(),
                tips,
            }
        })
        .collect();
    let nouns = (0..cfg.n_nouns)
        .map(|_| NounFamily {
            position: [rng.random_range(0.2..0.8), rng.random_range(0.15..0.65)],
            hotspot_offset: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)],
        })
        .collect();
    let shape_map = (0..N_SHAPE * CONTEXT_DIM).map(|_| rng.random_range(-0.3..0.3)).collect();
    let template = HandTemplate::synthetic(cfg.hand_seed);
    Tables {
        verbs,
        nouns,
        shape_map,
        rest_vertices: template.rest_vertices,
        tip_positions: template.tips,
    }
}

const DENSE: usize = 64;
/// Radius around a contacting fingertip inside which vertices are in contact.
const CONTACT_RADIUS: f64 = 0.018;

fn clamp_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Dense bent path from `a` to `b` bowing by `bend` times its length, plus
/// a smooth wobble of amplitude `wobble`.
fn bent_track(a: [f64; 2], b: [f64; 2], bend: f64, wobble: f64) -> Vec<[f64; 2]> {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let perp = [-dy, dx];
    (0..=DENSE)
        .map(|i| {
            if i == DENSE {
                return b;
            }
            let t = i as f64 / DENSE as f64;
            let bow = bend * (PI * t).sin() + wobble * (2.0 * PI * t).sin();
            clamp_unit([a[0] + t * dx + bow * perp[0], a[1] + t * dy + bow * perp[1]])
        })
        .collect()
}

fn generate_sample(tab: &Tables, cfg: &GeneratorConfig, seed: u64, index: usize) -> Result<InteractionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64));
    let noise = cfg.noise_scale;
    let jitter = |rng: &mut ChaCha8Rng, amp: f64| if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 };

    let verb_id = rng.random_range(0..cfg.n_verbs);
    let noun_id = rng.random_range(0..cfg.n_nouns);
    let side = if rng.random_bool(0.5) { HandSide::Right } else { HandSide::Left };
    let context: Vec<f64> = (0..CONTEXT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (verb, noun) = (&tab.verbs[verb_id], &tab.nouns[noun_id]);

    let object = clamp_unit([noun.position[0] + rng.random_range(-0.04..0.04), noun.position[1] + rng.random_range(-0.04..0.04)]);
    let hotspot = clamp_unit([
        object[0] + noun.hotspot_offset[0] + jitter(&mut rng, 0.01 * noise),
        object[1] + noun.hotspot_offset[1] + jitter(&mut rng, 0.01 * noise),
    ]);
    let start = [0.5 + side.sign() * 0.25 + rng.random_range(-0.1..0.1), 0.92 + rng.random_range(-0.05..0.05)];

    let bend = side.sign() * (verb.curvature + 0.05 * context[0]);
    let trend_track = bent_track(start, hotspot, bend, jitter(&mut rng, 0.03 * noise));
    let mut gt_trend = vec![start];
    gt_trend.extend(resample_waypoints(&trend_track, cfg.n_c)?);

    let angle = if side == HandSide::Right { verb.mani_angle } else { PI - verb.mani_angle };
    let length = verb.mani_length * (1.0 + 0.2 * context[1]);
    let end = clamp_unit([hotspot[0] + length * angle.cos(), hotspot[1] + length * angle.sin()]);
    let mani_track = bent_track(hotspot, end, verb.mani_curvature, jitter(&mut rng, 0.03 * noise));
    let mut gt_mani = vec![hotspot];
    gt_mani.extend(resample_waypoints(&mani_track, cfg.n_m)?);

    let gt_theta: Vec<f64> = verb
        .theta
        .iter()
        .enumerate()
        .map(|(i, t)| t + if i < 3 { 0.2 * context[2] } else { 0.0 } + jitter(&mut rng, 0.05 * noise))
        .collect();
    let gt_beta: Vec<f64> = (0..N_SHAPE)
        .map(|s| (0..CONTEXT_DIM).map(|c| tab.shape_map[s * CONTEXT_DIM + c] * context[c]).sum::<f64>())
        .collect();
    let radius = CONTACT_RADIUS * (1.0 + jitter(&mut rng, 0.15 * noise));
    let gt_contact = tab
        .rest_vertices
        .iter()
        .map(|v| {
            let near = verb.tips.iter().any(|&k| {
                let t = tab.tip_positions[k];
                ((v[0] - t[0]).powi(2) + (v[1] - t[1]).powi(2) + (v[2] - t[2]).powi(2)).sqrt() < radius
            });
            near as u8
        })
        .collect();

    Ok(InteractionSample {
        schema_version: SCHEMA_VERSION.into(),
        sample_id: format!("s{index:05}"),
        verb_id,
        noun_id,
        hand_side: side,
        scene_latent: SceneLatent {
            object_position: object,
            hand_start: start,
            context,
        },
        frame_offset_s: 0.5,
        gt_hotspot_point: hotspot,
        gt_trend,
        gt_mani,
        gt_theta,
        gt_beta,
        gt_contact,
    })
}

/// Generates both splits in memory. Samples are produced in parallel from
/// per-sample sub-seeds, so the result does not depend on scheduling.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let tab = tables(cfg, seed);
    let total = cfg.n_train + cfg.n_test;
    let samples = (0..total).into_par_iter().map(|i| generate_sample(&tab, cfg, seed, i)).collect::<Result<Vec<_>>>()?;
    let (train, test) = samples.split_at(cfg.n_train);
    let paths = |split: &str, s: &[InteractionSample]| s.iter().map(|x| format!("samples/{split}/{}.json", x.sample_id)).collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            schema_version: SCHEMA_VERSION.into(),
            generator: cfg.clone(),
            seed,
            n_train: cfg.n_train,
            n_test: cfg.n_test,
            splits: Splits {
                train: paths("train", train),
                test: paths("test", test),
            },
        },
        train: train.to_vec(),
        test: test.to_vec(),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serialises");
    s.push('\n');
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Parses JSON into `T`, reporting the offending path on failure. A
/// top-level `schema_version` other than ours is rejected first.
pub fn parse_versioned<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let schema_err = |path: String, message: String| HoiError::Schema {
        path: format!("{}:{path}", origin.display()),
        message,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| schema_err(".".into(), e.to_string()))?;
    match value.get("schema_version") {
        Some(serde_json::Value::String(v)) if v == SCHEMA_VERSION => {}
        Some(other) => return Err(schema_err("schema_version".into(), format!("unsupported version {other} (expected \"{SCHEMA_VERSION}\")"))),
        None => return Err(schema_err(".".into(), "missing field `schema_version`".into())),
    }
    serde_path_to_error::deserialize(value).map_err(|e| schema_err(e.path().to_string(), e.inner().to_string()))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

impl Dataset {
    /// Writes `manifest.json` and one file per sample under `dir`; returns
    /// the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let all = self.train.iter().chain(&self.test);
        let rels = self.manifest.splits.train.iter().chain(&self.manifest.splits.test);
        for (sample, rel) in all.zip(rels) {
            write_file(&dir.join(rel), &to_json(sample))?;
        }
        let path = dir.join("manifest.json");
        write_file(&path, &to_json(&self.manifest))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = parse_versioned(&read_file(manifest_path)?, manifest_path)?;
        manifest.generator.validate()?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let load_split = |rels: &[String]| -> Result<Vec<InteractionSample>> {
            rels.iter()
                .map(|rel| {
                    let path = base.join(rel);
                    let s: InteractionSample = parse_versioned(&read_file(&path)?, &path)?;
                    s.validate(manifest.generator.n_c, manifest.generator.n_m).map_err(|e| match e {
                        HoiError::Schema { path: p, message } => HoiError::Schema {
                            path: format!("{}:{p}", path.display()),
                            message,
                        },
                        other => other,
                    })?;
                    Ok(s)
                })
                .collect()
        };
        let train = load_split(&manifest.splits.train)?;
        let test = load_split(&manifest.splits.test)?;
        let mut ids: Vec<&str> = train.iter().chain(&test).map(|s| s.sample_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(HoiError::Schema {
                path: format!("{}:splits", manifest_path.display()),
                message: format!("sample id `{}` appears twice", w[0]),
            });
        }
        Ok(Dataset { manifest, train, test })
    }
}

/// Deterministic stand-ins for the pretrained vision-language features:
/// verb and noun embeddings mixed with tokens projected from the scene.
#[derive(Clone, Debug)]
pub struct StubEncoders {
    pub verbs: ParamId,
    pub nouns: ParamId,
    pub scene: Linear,
    pub mix_h_scene: Linear,
    pub mix_h_verb: Linear,
    pub mix_o_scene: Linear,
    pub mix_o_noun: Linear,
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub d: usize,
}

impl StubEncoders {
    pub fn new(bd: &mut Builder, name: &str, n_verbs: usize, n_nouns: usize, d: usize) -> Result<Self> {
        let mut s = bd.sub(name);
        Ok(StubEncoders {
            verbs: s.param("verbs", &[n_verbs, d], Init::Normal(1.0), false)?,
            nouns: s.param("nouns", &[n_nouns, d], Init::Normal(1.0), false)?,
            scene: Linear::new(&mut s, "scene", SCENE_DIM, N_TOKENS * d, true, Init::Uniform)?,
            mix_h_scene: Linear::new(&mut s, "mix_h.scene", d, d, true, Init::Uniform)?,
            mix_h_verb: Linear::new(&mut s, "mix_h.verb", d, d, false, Init::Uniform)?,
            mix_o_scene: Linear::new(&mut s, "mix_o.scene", d, d, true, Init::Uniform)?,
            mix_o_noun: Linear::new(&mut s, "mix_o.noun", d, d, false, Init::Uniform)?,
            n_verbs,
            n_nouns,
            d,
        })
    }

    fn one_hot(ids: &[usize], n: usize, what: &str) -> Result<Tensor> {
        let mut data = vec![0.0; ids.len() * n];
        for (row, &id) in ids.iter().enumerate() {
            if id >= n {
                return Err(HoiError::Config(format!("{what} id {id} out of range 0..{n}")));
            }
            data[row * n + id] = 1.0;
        }
        Ok(Tensor::new(data, &[ids.len(), n])?)
    }

    /// `scene [B, SCENE_DIM]` -> `(H, O)`, each `[B, 16, d]`. H never sees
    /// the noun and O never sees the verb.
    pub fn encode(&self, p: &Binding, verb_ids: &[usize], noun_ids: &[usize], scene: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, d) = (verb_ids.len(), self.d);
        let verb = Self::one_hot(verb_ids, self.n_verbs, "verb")?.matmul(&p.get(self.verbs))?;
        let noun = Self::one_hot(noun_ids, self.n_nouns, "noun")?.matmul(&p.get(self.nouns))?;
        let tokens = self.scene.forward(p, scene)?.reshape(&[b, N_TOKENS, d])?;
        let mix = |ls: &Linear, le: &Linear, e: &Tensor| -> Result<Tensor> {
            let bias = le.forward(p, e)?.reshape(&[b, 1, d])?;
            Ok(ls.forward(p, &tokens)?.add(&bias)?.gelu())
        };
        Ok((mix(&self.mix_h_scene, &self.mix_h_verb, &verb)?, mix(&self.mix_o_scene, &self.mix_o_noun, &noun)?))
    }
}
