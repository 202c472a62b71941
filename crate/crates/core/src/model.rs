//! The full anticipation network: stub features, intention encoders, the
//! three constraint sites (intention, fusion, correction) with swappable
//! strategies, the decomposition head and the five element decoders.

use hoi_autodiff::{no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, CrossBlock, ParallelCross, ResidualCorrection, SelfBlock};
use crate::cvae::{
    default_hotspot_sigma, gaussian_render, ContactHead, HeatmapGrid, HotspotHead, HotspotPrediction, LatentMode, PoseHead, TrajectoryHead,
};
use crate::data::{InteractionSample, StubEncoders, SCENE_DIM};
use crate::deq::{DeqConfig, DeqFusion, DeqState, SolverRegistry};
use crate::error::{HoiError, Result};
use crate::hand::{HandModel, N_KEYPOINTS, N_VERTICES};
use crate::losses::{joint_loss, total_loss, LossBreakdown, LossParts, LossWeights};
use crate::nn::{Binding, Builder, FeedForward, Init, LayerNorm, Linear, ParamEntry, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentDims {
    pub trend: usize,
    pub hotspot: usize,
    pub mani: usize,
    pub pose: usize,
    pub contact: usize,
}

impl Default for LatentDims {
    fn default() -> Self {
        LatentDims::uniform(32)
    }
}

impl LatentDims {
    pub fn uniform(l: usize) -> Self {
        LatentDims {
            trend: l,
            hotspot: l,
            mani: l,
            pose: l,
            contact: l,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_sa_blocks: usize,
    /// Rounds of intention cross-attention.
    pub depth: usize,
    pub ffn_mult: usize,
    pub deq: DeqConfig,
    pub intention_strategy: String,
    pub fusion_strategy: String,
    pub correction_strategy: String,
    pub latent: LatentDims,
    pub enable_cross: bool,
    pub enable_deq: bool,
    pub enable_res: bool,
    pub n_c: usize,
    pub n_m: usize,
    pub heatmap_height: usize,
    pub heatmap_width: usize,
    pub hotspot_sigma: f64,
    pub hand_seed: u64,
    pub n_verbs: usize,
    pub n_nouns: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_sa_blocks: 2,
            depth: 2,
            ffn_mult: 4,
            deq: DeqConfig::default(),
            intention_strategy: "parallel-cross".into(),
            fusion_strategy: "deq".into(),
            correction_strategy: "residual".into(),
            latent: LatentDims::default(),
            enable_cross: true,
            enable_deq: true,
            enable_res: true,
            n_c: 3,
            n_m: 3,
            heatmap_height: 64,
            heatmap_width: 64,
            hotspot_sigma: default_hotspot_sigma(),
            hand_seed: 0,
            n_verbs: 16,
            n_nouns: 32,
        }
    }
}

/// Which strategy runs at each site once the toggles are applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSites {
    pub intention: Option<String>,
    pub fusion: String,
    pub correction: Option<String>,
    /// Settings that had no effect, with the reason.
    pub overridden: Vec<String>,
}

/// Fusion wiring used when the equilibrium module is disabled.
pub const DEQ_OFF_FUSION: &str = "concat";

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            depth: self.depth,
            n_sa_blocks: self.n_sa_blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        self.deq.validate()?;
        let l = &self.latent;
        if [l.trend, l.hotspot, l.mani, l.pose, l.contact].contains(&0) {
            return Err(HoiError::Config("latent dimensions must be positive".into()));
        }
        if self.n_c == 0 || self.n_m == 0 || self.heatmap_height == 0 || self.heatmap_width == 0 {
            return Err(HoiError::Config("trajectory lengths and heatmap size must be positive".into()));
        }
        if !(self.hotspot_sigma > 0.0) {
            return Err(HoiError::Config("hotspot_sigma must be positive".into()));
        }
        let r = self.resolve();
        intention_registry().check(r.intention.as_deref())?;
        fusion_registry().check(Some(&r.fusion))?;
        correction_registry().check(r.correction.as_deref())?;
        Ok(())
    }

    pub fn resolve(&self) -> ResolvedSites {
        let mut overridden = Vec::new();
        let fusion = if self.fusion_strategy != "deq" {
            if !self.enable_deq {
                overridden.push(format!("enable_deq=false ignored: fusion strategy is `{}`", self.fusion_strategy));
            }
            self.fusion_strategy.clone()
        } else if self.enable_deq {
            "deq".into()
        } else {
            DEQ_OFF_FUSION.into()
        };
        ResolvedSites {
            intention: self.enable_cross.then(|| self.intention_strategy.clone()),
            fusion,
            correction: self.enable_res.then(|| self.correction_strategy.clone()),
            overridden,
        }
    }
}

/// Updates both intention streams `[B, T, d]` jointly.
pub trait IntentionSite: Send + Sync {
    fn forward(&self, p: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// Produces `F_i [B, d]` from the two intention streams.
pub trait FusionSite: Send + Sync {
    fn forward(&self, p: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Option<DeqState>)>;
}

/// Corrects one stream `[B, T, d]` with `F_i [B, d]`.
pub trait CorrectionSite: Send + Sync {
    fn forward(&self, p: &Binding, f: &Tensor, fi: &Tensor) -> Result<Tensor>;
}

pub type Maker<T> = fn(&mut Builder, &ModelConfig) -> Result<Box<T>>;

/// Strategies available at one site, selected by name.
pub struct Registry<T: ?Sized> {
    site: &'static str,
    makers: Vec<(&'static str, Maker<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(site: &'static str) -> Self {
        Registry { site, makers: Vec::new() }
    }

    pub fn register(&mut self, name: &'static str, maker: Maker<T>) {
        self.makers.retain(|(n, _)| *n != name);
        self.makers.push((name, maker));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.makers.iter().map(|(n, _)| *n).collect()
    }

    fn find(&self, name: &str) -> Result<Maker<T>> {
        self.makers.iter().find(|(n, _)| *n == name).map(|(_, m)| *m).ok_or_else(|| HoiError::UnknownStrategy {
            site: self.site,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    fn check(&self, name: Option<&str>) -> Result<()> {
        name.map_or(Ok(()), |n| self.find(n).map(|_| ()))
    }

    pub fn build(&self, name: &str, bd: &mut Builder, cfg: &ModelConfig) -> Result<Box<T>> {
        self.find(name)?(bd, cfg)
    }
}

fn mean_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_axis(1, false)?)
}

/// `fi [B, d]` repeated over `tokens` as `[B, tokens, d]`.
fn spread(fi: &Tensor, tokens: usize) -> Result<Tensor> {
    let (b, d) = (fi.shape()[0], fi.shape()[1]);
    Ok(Tensor::ones(&[b, tokens, 1]).mul(&fi.reshape(&[b, 1, d])?)?)
}

struct ParallelIntention(ParallelCross);

impl IntentionSite for ParallelIntention {
    fn forward(&self, p: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Tensor)> {
        self.0.forward(p, ft, fh)
    }
}

/// Each round updates the trend stream first, then the hotspot stream from
/// the updated trend stream.
struct SeriesIntention(Vec<(CrossBlock, CrossBlock)>);

impl IntentionSite for SeriesIntention {
    fn forward(&self, p: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mut a, mut b) = (ft.clone(), fh.clone());
        for (ab, ba) in &self.0 {
            a = ab.forward(p, &a, &b)?;
            b = ba.forward(p, &b, &a)?;
        }
        Ok((a, b))
    }
}

struct SumIntention;

impl IntentionSite for SumIntention {
    fn forward(&self, _: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = ft.add(fh)?;
        Ok((s.clone(), s))
    }
}

struct ConcatIntention(Linear, Linear);

impl IntentionSite for ConcatIntention {
    fn forward(&self, p: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.0.forward(p, &Tensor::concat(&[ft, fh], -1)?)?, self.1.forward(p, &Tensor::concat(&[fh, ft], -1)?)?))
    }
}

pub fn intention_registry() -> Registry<dyn IntentionSite> {
    let mut r: Registry<dyn IntentionSite> = Registry::new("intention");
    r.register("parallel-cross", |bd, cfg| Ok(Box::new(ParallelIntention(ParallelCross::new(bd, "intention", &cfg.attention())?))));
    r.register("series-cross", |bd, cfg| {
        let mut s = bd.sub("intention");
        let rounds = (0..cfg.depth)
            .map(|i| Ok((CrossBlock::new(&mut s, &format!("r{i}.a"), &cfg.attention())?, CrossBlock::new(&mut s, &format!("r{i}.b"), &cfg.attention())?)))
            .collect::<Result<_>>()?;
        Ok(Box::new(SeriesIntention(rounds)))
    });
    r.register("sum", |_, _| Ok(Box::new(SumIntention)));
    r.register("concat", |bd, cfg| {
        let d = cfg.d_model;
        let mut s = bd.sub("intention");
        Ok(Box::new(ConcatIntention(
            Linear::new(&mut s, "t", 2 * d, d, true, Init::Uniform)?,
            Linear::new(&mut s, "h", 2 * d, d, true, Init::Uniform)?,
        )))
    });
    r
}

/// Pooled inputs are layer-normalised first: the update map contracts only
/// when its inputs are of unit scale, and raw token means are not.
struct DeqSite {
    ln_t: LayerNorm,
    ln_h: LayerNorm,
    cell: DeqFusion,
    cfg: DeqConfig,
    solvers: SolverRegistry,
}

impl FusionSite for DeqSite {
    fn forward(&self, p: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Option<DeqState>)> {
        let xt = self.ln_t.forward(p, &mean_tokens(ft)?)?;
        let xh = self.ln_h.forward(p, &mean_tokens(fh)?)?;
        let (fi, state) = self.cell.fuse(p, &xt, &xh, &self.cfg, &self.solvers, None)?;
        Ok((fi, Some(state)))
    }
}

struct SumFusion;

impl FusionSite for SumFusion {
    fn forward(&self, _: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Option<DeqState>)> {
        Ok((mean_tokens(ft)?.add(&mean_tokens(fh)?)?, None))
    }
}

/// Projection of the concatenated pooled streams.
struct ConcatFusion(Linear);

impl FusionSite for ConcatFusion {
    fn forward(&self, p: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Option<DeqState>)> {
        let pooled = Tensor::concat(&[&mean_tokens(ft)?, &mean_tokens(fh)?], -1)?;
        Ok((self.0.forward(p, &pooled)?, None))
    }
}

struct SeriesFusion(CrossBlock, CrossBlock);

impl FusionSite for SeriesFusion {
    fn forward(&self, p: &Binding, ft: &Tensor, fh: &Tensor) -> Result<(Tensor, Option<DeqState>)> {
        let a = self.0.forward(p, ft, fh)?;
        let b = self.1.forward(p, fh, &a)?;
        Ok((mean_tokens(&b)?, None))
    }
}

pub fn fusion_registry() -> Registry<dyn FusionSite> {
    let mut r: Registry<dyn FusionSite> = Registry::new("fusion");
    r.register("deq", |bd, cfg| {
        let mut s = bd.sub("fusion");
        Ok(Box::new(DeqSite {
            ln_t: LayerNorm::new(&mut s, "ln_t", cfg.d_model)?,
            ln_h: LayerNorm::new(&mut s, "ln_h", cfg.d_model)?,
            cell: DeqFusion::new(&mut s, "cell", cfg.d_model)?,
            cfg: cfg.deq.clone(),
            solvers: SolverRegistry::default(),
        }))
    });
    r.register("sum", |_, _| Ok(Box::new(SumFusion)));
    r.register("concat", |bd, cfg| {
        let mut s = bd.sub("fusion");
        Ok(Box::new(ConcatFusion(Linear::new(&mut s, "proj", 2 * cfg.d_model, cfg.d_model, true, Init::Uniform)?)))
    });
    r.register("series-cross", |bd, cfg| {
        let mut s = bd.sub("fusion");
        Ok(Box::new(SeriesFusion(CrossBlock::new(&mut s, "a", &cfg.attention())?, CrossBlock::new(&mut s, "b", &cfg.attention())?)))
    });
    r
}

struct ResidualSite(ResidualCorrection);

impl CorrectionSite for ResidualSite {
    fn forward(&self, p: &Binding, f: &Tensor, fi: &Tensor) -> Result<Tensor> {
        let (b, d) = (fi.shape()[0], fi.shape()[1]);
        self.0.forward(p, f, &fi.reshape(&[b, 1, d])?)
    }
}

struct SumCorrection;

impl CorrectionSite for SumCorrection {
    fn forward(&self, _: &Binding, f: &Tensor, fi: &Tensor) -> Result<Tensor> {
        let (b, d) = (fi.shape()[0], fi.shape()[1]);
        Ok(f.add(&fi.reshape(&[b, 1, d])?)?)
    }
}

struct ConcatCorrection(Linear);

impl CorrectionSite for ConcatCorrection {
    fn forward(&self, p: &Binding, f: &Tensor, fi: &Tensor) -> Result<Tensor> {
        self.0.forward(p, &Tensor::concat(&[f, &spread(fi, f.shape()[1])?], -1)?)
    }
}

struct SeriesCorrection(CrossBlock);

impl CorrectionSite for SeriesCorrection {
    fn forward(&self, p: &Binding, f: &Tensor, fi: &Tensor) -> Result<Tensor> {
        let (b, d) = (fi.shape()[0], fi.shape()[1]);
        self.0.forward(p, f, &fi.reshape(&[b, 1, d])?)
    }
}

/// Correction strategies are built once per stream, under `name`.
pub fn correction_registry() -> Registry<dyn CorrectionSite> {
    let mut r: Registry<dyn CorrectionSite> = Registry::new("correction");
    r.register("residual", |bd, cfg| Ok(Box::new(ResidualSite(ResidualCorrection::new(bd, "block", &cfg.attention())?))));
    r.register("sum", |_, _| Ok(Box::new(SumCorrection)));
    r.register("concat", |bd, cfg| Ok(Box::new(ConcatCorrection(Linear::new(bd, "proj", 2 * cfg.d_model, cfg.d_model, true, Init::Uniform)?))));
    r.register("series-cross", |bd, cfg| Ok(Box::new(SeriesCorrection(CrossBlock::new(bd, "block", &cfg.attention())?))));
    r
}

/// Splits `F_i` into the manipulation, pose and contact features.
struct Decomposition {
    expand: Linear,
    block: SelfBlock,
    to_m: Linear,
    to_p: Linear,
    to_c: Linear,
    /// Pooled features are normalised so the conditions match the unit
    /// scale of the latent samples they are concatenated with.
    ln_p: LayerNorm,
    ln_c: LayerNorm,
    d: usize,
}

/// Tokens the fused feature is expanded into before decomposition.
const DECOMP_TOKENS: usize = 4;

impl Decomposition {
    fn new(bd: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let mut s = bd.sub("decompose");
        Ok(Decomposition {
            expand: Linear::new(&mut s, "expand", d, DECOMP_TOKENS * d, true, Init::Uniform)?,
            block: SelfBlock::new(&mut s, "msa", &cfg.attention())?,
            to_m: Linear::new(&mut s, "m", d, d, true, Init::Uniform)?,
            to_p: Linear::new(&mut s, "p", d, d, true, Init::Uniform)?,
            to_c: Linear::new(&mut s, "c", d, d, true, Init::Uniform)?,
            ln_p: LayerNorm::new(&mut s, "ln_p", d)?,
            ln_c: LayerNorm::new(&mut s, "ln_c", d)?,
            d,
        })
    }

    /// `(F_m [B, 4, d], F_p [B, d], F_c [B, d])`.
    fn forward(&self, p: &Binding, fi: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let b = fi.shape()[0];
        let tokens = self.block.forward(p, &self.expand.forward(p, fi)?.reshape(&[b, DECOMP_TOKENS, self.d])?)?;
        Ok((
            self.to_m.forward(p, &tokens)?,
            self.ln_p.forward(p, &mean_tokens(&self.to_p.forward(p, &tokens)?)?)?,
            self.ln_c.forward(p, &mean_tokens(&self.to_c.forward(p, &tokens)?)?)?,
        ))
    }
}

struct Network {
    stub: StubEncoders,
    trend_sa: Vec<SelfBlock>,
    hot_ln: LayerNorm,
    hot_ffn: FeedForward,
    intention: Option<Box<dyn IntentionSite>>,
    fusion: Box<dyn FusionSite>,
    correction: Option<(Box<dyn CorrectionSite>, Box<dyn CorrectionSite>)>,
    decompose: Decomposition,
    trend: TrajectoryHead,
    hotspot: HotspotHead,
    mani: TrajectoryHead,
    pose: PoseHead,
    contact: ContactHead,
}

/// Ground truth of a batch as tensors.
pub struct Batch {
    pub ids: Vec<String>,
    pub verb_ids: Vec<usize>,
    pub noun_ids: Vec<usize>,
    pub scene: Tensor,
    pub trend: Tensor,
    pub mani: Tensor,
    pub hotspot: Tensor,
    pub pose: Tensor,
    pub joints: Tensor,
    pub contact: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Hand start points `[B, 2]`.
    pub fn start(&self) -> Result<Tensor> {
        Ok(self.trend.narrow(1, 0, 1)?.reshape(&[self.len(), 2])?)
    }
}

/// Everything one forward pass produces before decoding.
/// Intermediate features of one forward pass, before the decoders.
pub struct Features {
    pub ft: Tensor,
    pub fh: Tensor,
    pub fm: Tensor,
    pub fp: Tensor,
    pub fc: Tensor,
    pub deq: Option<DeqState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub sample_id: String,
    pub trend: Vec<[f64; 2]>,
    pub hotspot: HotspotPrediction,
    /// The trend endpoint, where manipulation starts.
    pub contact_point: [f64; 2],
    pub mani: Vec<[f64; 2]>,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub joints21: Vec<[f64; 3]>,
    pub vertices: Vec<[f64; 3]>,
    pub contact_probs: Vec<f64>,
    pub contact_mask: Vec<bool>,
}

/// Scalar diagnostics of one training forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub deq_iters: Option<usize>,
    pub deq_residual: Option<f64>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub hand: HandModel,
    net: Network,
}

fn points(t: &[f64]) -> Vec<[f64; 2]> {
    t.chunks(2).map(|c| [c[0], c[1]]).collect()
}

impl Model {
    /// Builds the network with weights drawn from `seed`. Parameters exist
    /// only for the modules the configuration enables.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let sites = cfg.resolve();
        let attn = cfg.attention();
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bd = Builder::new(&mut store, &mut rng);
        let net = Network {
            stub: StubEncoders::new(&mut bd, "stub", cfg.n_verbs, cfg.n_nouns, d)?,
            trend_sa: (0..cfg.n_sa_blocks).map(|i| SelfBlock::new(&mut bd, &format!("encode_t.sa{i}"), &attn)).collect::<Result<_>>()?,
            hot_ln: LayerNorm::new(&mut bd, "encode_h.ln", d)?,
            hot_ffn: FeedForward::new(&mut bd, "encode_h.ffn", d, cfg.ffn_mult * d, d, false)?,
            intention: match &sites.intention {
                Some(name) => Some(intention_registry().build(name, &mut bd, cfg)?),
                None => None,
            },
            fusion: fusion_registry().build(&sites.fusion, &mut bd, cfg)?,
            correction: match &sites.correction {
                Some(name) => {
                    let reg = correction_registry();
                    Some((reg.build(name, &mut bd.sub("correct_t"), cfg)?, reg.build(name, &mut bd.sub("correct_h"), cfg)?))
                }
                None => None,
            },
            decompose: Decomposition::new(&mut bd, cfg)?,
            trend: TrajectoryHead::new(&mut bd, "trend", &attn, cfg.latent.trend, cfg.n_c)?,
            hotspot: HotspotHead::new(&mut bd, "hotspot", d, cfg.latent.hotspot, cfg.heatmap_height, cfg.heatmap_width)?,
            mani: TrajectoryHead::new(&mut bd, "mani", &attn, cfg.latent.mani, cfg.n_m)?,
            pose: PoseHead::new(&mut bd, "pose", d, cfg.latent.pose)?,
            contact: ContactHead::new(&mut bd, "contact", d, cfg.latent.contact)?,
        };
        Ok(Model {
            cfg: cfg.clone(),
            store,
            hand: HandModel::synthetic(cfg.hand_seed),
            net,
        })
    }

    /// Assembles ground-truth tensors; samples must match the trajectory
    /// lengths of the configuration.
    pub fn batch(&self, samples: &[&InteractionSample]) -> Result<Batch> {
        let cfg = &self.cfg;
        let b = samples.len();
        if b == 0 {
            return Err(HoiError::Config("empty batch".into()));
        }
        for s in samples {
            s.validate(cfg.n_c, cfg.n_m)?;
        }
        let flat2 = |f: &dyn Fn(&InteractionSample) -> &Vec<[f64; 2]>| -> Vec<f64> { samples.iter().flat_map(|s| f(s).iter().flatten().copied().collect::<Vec<_>>()).collect() };
        let mut hot = Vec::with_capacity(b * cfg.heatmap_height * cfg.heatmap_width);
        for s in samples {
            hot.extend(gaussian_render(s.gt_hotspot_point, cfg.hotspot_sigma, cfg.heatmap_height, cfg.heatmap_width)?.values);
        }
        let pose: Vec<f64> = samples.iter().flat_map(|s| s.gt_theta.iter().chain(&s.gt_beta).copied()).collect();
        let pose = Tensor::new(pose, &[b, crate::cvae::POSE_OUT])?;
        let joints = no_grad(|| -> Result<Tensor> {
            let (theta, beta) = PoseHead::split(&pose)?;
            Ok(self.hand.keypoints(&theta, &beta)?.detach())
        })?;
        Ok(Batch {
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            verb_ids: samples.iter().map(|s| s.verb_id).collect(),
            noun_ids: samples.iter().map(|s| s.noun_id).collect(),
            scene: Tensor::new(samples.iter().flat_map(|s| s.scene_features()).collect(), &[b, SCENE_DIM])?,
            trend: Tensor::new(flat2(&|s| &s.gt_trend), &[b, cfg.n_c + 1, 2])?,
            mani: Tensor::new(flat2(&|s| &s.gt_mani), &[b, cfg.n_m + 1, 2])?,
            hotspot: Tensor::new(hot, &[b, cfg.heatmap_height * cfg.heatmap_width])?,
            pose,
            joints,
            contact: Tensor::new(samples.iter().flat_map(|s| s.gt_contact.iter().map(|&c| c as f64)).collect(), &[b, N_VERTICES])?,
        })
    }

    pub fn features(&self, p: &Binding, batch: &Batch) -> Result<Features> {
        let net = &self.net;
        let (h, o) = net.stub.encode(p, &batch.verb_ids, &batch.noun_ids, &batch.scene)?;
        let mut ft = h;
        for block in &net.trend_sa {
            ft = block.forward(p, &ft)?;
        }
        let fh = o.add(&net.hot_ffn.forward(p, &net.hot_ln.forward(p, &o)?)?)?;
        let (ft, fh) = match &net.intention {
            Some(site) => site.forward(p, &ft, &fh)?,
            None => (ft, fh),
        };
        let (fi, deq) = net.fusion.forward(p, &ft, &fh).map_err(|e| match e {
            HoiError::Diverged { iteration, sample: None } => HoiError::Diverged {
                iteration,
                sample: Some(batch.ids.join(",")),
            },
            other => other,
        })?;
        let (ft, fh) = match &net.correction {
            Some((ct, ch)) => (ct.forward(p, &ft, &fi)?, ch.forward(p, &fh, &fi)?),
            None => (ft, fh),
        };
        let (fm, fp, fc) = net.decompose.forward(p, &fi)?;
        Ok(Features { ft, fh, fm, fp, fc, deq })
    }

    /// Training objective on `batch` with posterior latents; the tape is
    /// recorded when `p` tracks parameters.
    pub fn loss(&self, p: &Binding, batch: &Batch, weights: &LossWeights, rng: &mut ChaCha8Rng) -> Result<(Tensor, StepStats)> {
        let net = &self.net;
        let f = self.features(p, batch)?;
        let (_, trend) = net.trend.train(p, &f.ft, &batch.trend, rng)?;
        let (_, hotspot) = net.hotspot.train(p, &mean_tokens(&f.fh)?, &batch.hotspot, rng)?;
        let (_, mani) = net.mani.train(p, &f.fm, &batch.mani, rng)?;
        let (pose_out, pose) = net.pose.train(p, &f.fp, &batch.pose, rng)?;
        let (theta, beta) = PoseHead::split(&pose_out)?;
        let joint = joint_loss(&self.hand.keypoints(&theta, &beta)?, &batch.joints)?;
        let (_, contact) = net.contact.train(p, &f.fc, &batch.contact, rng)?;
        let parts = LossParts {
            trend,
            hotspot,
            pose,
            contact,
            mani,
            joint,
        };
        let (total, loss) = total_loss(&parts, weights)?;
        Ok((
            total,
            StepStats {
                loss,
                deq_iters: f.deq.as_ref().map(|s| s.iterations),
                deq_residual: f.deq.as_ref().map(|s| s.residual),
            },
        ))
    }

    /// Decodes every element from the prior. Manipulation starts where the
    /// predicted trend ends.
    pub fn predict(&self, batch: &Batch, mode: LatentMode, rng: &mut ChaCha8Rng) -> Result<Vec<PredictionBundle>> {
        no_grad(|| {
            let net = &self.net;
            let p = Binding::new(&self.store, false);
            let f = self.features(&p, batch)?;
            let b = batch.len();
            let (n_c, n_m) = (self.cfg.n_c, self.cfg.n_m);
            let trend = net.trend.decode(&p, &f.ft, &batch.start()?, mode, rng)?;
            let hot = net.hotspot.decode(&p, &mean_tokens(&f.fh)?, mode, rng)?;
            let end = trend.narrow(1, n_c, 1)?.reshape(&[b, 2])?;
            let mani = net.mani.decode(&p, &f.fm, &end, mode, rng)?;
            let pose = net.pose.decode(&p, &f.fp, mode, rng)?;
            let contact = net.contact.decode(&p, &f.fc, mode, rng)?;
            let cells = self.cfg.heatmap_height * self.cfg.heatmap_width;
            (0..b)
                .map(|i| {
                    let row = |t: &Tensor, n: usize| t.data()[i * n..(i + 1) * n].to_vec();
                    let tr = points(&row(&trend, 2 * (n_c + 1)));
                    let pose_row = row(&pose, crate::cvae::POSE_OUT);
                    let (theta, beta) = pose_row.split_at(crate::hand::POSE_DIM);
                    let mesh = self.hand.mesh(theta, beta)?;
                    let probs = row(&contact, N_VERTICES);
                    Ok(PredictionBundle {
                        sample_id: batch.ids[i].clone(),
                        contact_point: tr[n_c],
                        trend: tr,
                        hotspot: net.hotspot.finish(&row(&hot, cells), self.cfg.hotspot_sigma)?,
                        mani: points(&row(&mani, 2 * (n_m + 1))),
                        theta: theta.to_vec(),
                        beta: beta.to_vec(),
                        joints21: mesh.joints21,
                        vertices: mesh.vertices,
                        contact_mask: probs.iter().map(|&q| q >= 0.5).collect(),
                        contact_probs: probs,
                    })
                })
                .collect()
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Overwrites parameter values from `entries`, which must name exactly
    /// this model's parameters with the same shapes.
    pub fn load_params(&mut self, entries: &[ParamEntry]) -> Result<()> {
        if entries.len() != self.store.len() {
            return Err(HoiError::Checkpoint(format!(
                "checkpoint has {} parameters, configuration builds {}",
                entries.len(),
                self.store.len()
            )));
        }
        for e in entries {
            let id = self
                .store
                .id_of(&e.name)
                .ok_or_else(|| HoiError::Checkpoint(format!("parameter `{}` is not part of this configuration", e.name)))?;
            let slot = self.store.entry_mut(id);
            if slot.shape != e.shape || e.values.len() != slot.values.len() {
                return Err(HoiError::Checkpoint(format!("parameter `{}` has shape {:?}, expected {:?}", e.name, e.shape, slot.shape)));
            }
            slot.values.clone_from(&e.values);
        }
        Ok(())
    }
}

/// Ground-truth keypoints of one sample, `21 × 3`.
pub fn sample_joints(hand: &HandModel, s: &InteractionSample) -> Result<Vec<[f64; 3]>> {
    let mesh = hand.mesh(&s.gt_theta, &s.gt_beta)?;
    debug_assert_eq!(mesh.joints21.len(), N_KEYPOINTS);
    Ok(mesh.joints21)
}

/// Gaussian ground-truth hotspot grid of one sample.
pub fn sample_hotspot(cfg: &ModelConfig, s: &InteractionSample) -> Result<HeatmapGrid> {
    gaussian_render(s.gt_hotspot_point, cfg.hotspot_sigma, cfg.heatmap_height, cfg.heatmap_width)
}
