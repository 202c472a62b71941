//! Conditional VAE heads for the five interaction elements.
//!
//! Every head shares one shape: an encoder `f_e(Γ, Λ) -> (μ, log σ²)` used
//! only when ground truth is available, and a decoder `f_d(Θ, Λ) -> Γ̂`.
//! At inference `Θ` is drawn from the standard-normal prior, or fixed at its
//! mean in deterministic mode.

use hoi_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, CrossBlock};
use crate::error::{HoiError, Result};
use crate::losses::{bce_contact, kl_loss, mse_recon, ElementLoss};
use crate::nn::{Binding, Builder, FeedForward, Linear, Init};

pub const HIDDEN: usize = 128;
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 10.0;
/// Trajectory steps are predicted and encoded in units of this length, so
/// a typical step is of order one for the networks.
pub const STEP_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// `Θ ~ N(0, I)`.
    Sampled,
    /// `Θ = 0`, the prior mean.
    Deterministic,
}

pub fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(data, shape).expect("length matches shape")
}

/// `μ + exp(½ log σ²) ε` with `ε` from `rng`; `log σ²` is clamped first.
pub fn reparameterize(mu: &Tensor, log_var: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let eps = standard_normal(rng, mu.shape());
    let std = log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX).scale(0.5).exp();
    Ok(mu.add(&std.mul(&eps)?)?)
}

fn prior_latent(mode: LatentMode, rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    match mode {
        LatentMode::Sampled => standard_normal(rng, shape),
        LatentMode::Deterministic => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct CvaeHead {
    pub enc: FeedForward,
    pub dec: FeedForward,
    pub latent: usize,
}

impl CvaeHead {
    /// The encoder's last layer starts at zero so the posterior starts at the prior.
    pub fn new(bd: &mut Builder, name: &str, target: usize, cond: usize, out: usize, latent: usize, zero_dec_out: bool) -> Result<Self> {
        if latent == 0 {
            return Err(HoiError::Config("latent dimension must be positive".into()));
        }
        let mut s = bd.sub(name);
        Ok(CvaeHead {
            enc: FeedForward::new(&mut s, "enc", target + cond, HIDDEN, 2 * latent, true)?,
            dec: FeedForward::new(&mut s, "dec", latent + cond, HIDDEN, out, zero_dec_out)?,
            latent,
        })
    }

    /// `(μ, log σ²)` for targets `Γ [B, target]` under conditions `Λ [B, cond]`.
    pub fn encode(&self, p: &Binding, gamma: &Tensor, lambda: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.enc.forward(p, &Tensor::concat(&[gamma, lambda], -1)?)?;
        let mu = h.narrow(-1, 0, self.latent)?;
        let log_var = h.narrow(-1, self.latent, self.latent)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        Ok((mu, log_var))
    }

    pub fn decode(&self, p: &Binding, theta: &Tensor, lambda: &Tensor) -> Result<Tensor> {
        self.dec.forward(p, &Tensor::concat(&[theta, lambda], -1)?)
    }

    /// Training path: decoder output from a posterior sample, plus the KL term.
    pub fn posterior(&self, p: &Binding, gamma: &Tensor, lambda: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let (mu, log_var) = self.encode(p, gamma, lambda)?;
        let theta = reparameterize(&mu, &log_var, rng)?;
        Ok((self.decode(p, &theta, lambda)?, kl_loss(&mu, &log_var)?))
    }

    pub fn prior(&self, p: &Binding, lambda: &Tensor, mode: LatentMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let theta = prior_latent(mode, rng, &[lambda.shape()[0], self.latent]);
        self.decode(p, &theta, lambda)
    }
}

/// Row-major `height × width` grid of non-negative values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    /// Index of the largest value; ties go to the lowest row-major index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// `(u, v)` of a cell centre, `u` along the width.
    pub fn cell_center(&self, index: usize) -> [f64; 2] {
        let (r, c) = (index / self.width, index % self.width);
        [(c as f64 + 0.5) / self.width as f64, (r as f64 + 0.5) / self.height as f64]
    }

    /// Cell containing a point of the unit square (the far edge belongs to the last cell).
    pub fn cell_of(&self, point: [f64; 2]) -> usize {
        let c = ((point[0] * self.width as f64) as usize).min(self.width - 1);
        let r = ((point[1] * self.height as f64) as usize).min(self.height - 1);
        r * self.width + c
    }
}

/// Hotspot width: 0.05 of the grid diagonal, in unit-square coordinates.
pub fn default_hotspot_sigma() -> f64 {
    0.05 * std::f64::consts::SQRT_2
}

/// Isotropic Gaussian at `point` evaluated at cell centres, normalised to sum 1.
pub fn gaussian_render(point: [f64; 2], sigma: f64, height: usize, width: usize) -> Result<HeatmapGrid> {
    if !(sigma > 0.0) || height == 0 || width == 0 {
        return Err(HoiError::Config("gaussian render needs sigma > 0 and a non-empty grid".into()));
    }
    let mut grid = HeatmapGrid {
        height,
        width,
        values: vec![0.0; height * width],
    };
    let inv = 1.0 / (2.0 * sigma * sigma);
    // evaluated relative to the nearest cell so the sum never underflows
    let anchor = grid.cell_center(grid.cell_of(point));
    let base = ((anchor[0] - point[0]).powi(2) + (anchor[1] - point[1]).powi(2)) * inv;
    for i in 0..height * width {
        let [u, v] = grid.cell_center(i);
        grid.values[i] = (base - ((u - point[0]).powi(2) + (v - point[1]).powi(2)) * inv).exp();
    }
    let total: f64 = grid.values.iter().sum();
    grid.values.iter_mut().for_each(|x| *x /= total);
    Ok(grid)
}

/// Hotspot head: reconstructs the hotspot distribution over the grid.
#[derive(Clone, Debug)]
pub struct HotspotHead {
    pub cvae: CvaeHead,
    pub height: usize,
    pub width: usize,
}

/// Decoded grid, its argmax contact point, and the Gaussian rendered there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotspotPrediction {
    pub grid: HeatmapGrid,
    pub point: [f64; 2],
    pub map: HeatmapGrid,
}

impl HotspotHead {
    pub fn new(bd: &mut Builder, name: &str, d: usize, latent: usize, height: usize, width: usize) -> Result<Self> {
        let cells = height * width;
        Ok(HotspotHead {
            cvae: CvaeHead::new(bd, name, cells, d, cells, latent, false)?,
            height,
            width,
        })
    }

    fn cells(&self) -> f64 {
        (self.height * self.width) as f64
    }

    /// `cond [B, d]`, `gt [B, H·W]` probability grids. The reconstruction
    /// compares densities relative to uniform (probabilities times cell
    /// count) so the term does not vanish with the grid resolution.
    pub fn train(&self, p: &Binding, cond: &Tensor, gt: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, ElementLoss)> {
        let n = self.cells();
        let (logits, kl) = self.cvae.posterior(p, &gt.scale(n), cond, rng)?;
        let probs = logits.softmax(-1)?;
        let recon = mse_recon(&probs.scale(n), &gt.scale(n))?;
        Ok((probs, ElementLoss { recon, kl }))
    }

    /// Probability grids `[B, H·W]`.
    pub fn decode(&self, p: &Binding, cond: &Tensor, mode: LatentMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.cvae.prior(p, cond, mode, rng)?.softmax(-1)?)
    }

    pub fn finish(&self, probs: &[f64], sigma: f64) -> Result<HotspotPrediction> {
        let grid = HeatmapGrid {
            height: self.height,
            width: self.width,
            values: probs.to_vec(),
        };
        let point = grid.cell_center(grid.argmax());
        let map = gaussian_render(point, sigma, self.height, self.width)?;
        Ok(HotspotPrediction { grid, point, map })
    }
}

/// Chained trajectory head: each step conditions on the previous point
/// attending over the feature tokens, then decodes the next step.
#[derive(Clone, Debug)]
pub struct TrajectoryHead {
    pub embed: Linear,
    pub cross: CrossBlock,
    pub cvae: CvaeHead,
    pub n_steps: usize,
    pub d_model: usize,
}

impl TrajectoryHead {
    pub fn new(bd: &mut Builder, name: &str, attn: &AttentionConfig, latent: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(HoiError::Config("trajectory needs at least one step".into()));
        }
        let d = attn.d_model;
        let mut s = bd.sub(name);
        Ok(TrajectoryHead {
            embed: Linear::new(&mut s, "embed", 3, d, true, Init::Uniform)?,
            cross: CrossBlock::new(&mut s, "cross", attn)?,
            cvae: CvaeHead::new(&mut s, "cvae", 2, d, 2, latent, false)?,
            n_steps,
            d_model: d,
        })
    }

    /// Condition for producing step `i` (1-based) from `prev [B, 2]`.
    fn condition(&self, p: &Binding, prev: &Tensor, i: usize, tokens: &Tensor) -> Result<Tensor> {
        let b = prev.shape()[0];
        let frac = Tensor::full(&[b, 1], i as f64 / self.n_steps as f64);
        let q = self.embed.forward(p, &Tensor::concat(&[prev, &frac], -1)?)?.reshape(&[b, 1, self.d_model])?;
        Ok(self.cross.forward(p, &q, tokens)?.reshape(&[b, self.d_model])?)
    }

    fn advance(prev: &Tensor, out: &Tensor) -> Result<Tensor> {
        Ok(prev.add(&out.scale(STEP_SCALE))?.clamp(0.0, 1.0))
    }

    /// Teacher-forced training over `gt [B, n+1, 2]`; returns the predicted
    /// steps `[B, n, 2]` and the element loss (KL averaged over steps).
    pub fn train(&self, p: &Binding, tokens: &Tensor, gt: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, ElementLoss)> {
        let b = gt.shape()[0];
        if gt.shape() != [b, self.n_steps + 1, 2] {
            return Err(HoiError::Config(format!("trajectory target must be [B, {}, 2], got {:?}", self.n_steps + 1, gt.shape())));
        }
        let point = |i: usize| -> Result<Tensor> { Ok(gt.narrow(1, i, 1)?.reshape(&[b, 2])?) };
        let mut preds = Vec::with_capacity(self.n_steps);
        let mut kl = Tensor::scalar(0.0);
        for i in 1..=self.n_steps {
            let prev = point(i - 1)?;
            let lambda = self.condition(p, &prev, i, tokens)?;
            let gamma = point(i)?.sub(&prev)?.scale(1.0 / STEP_SCALE);
            let (out, k) = self.cvae.posterior(p, &gamma, &lambda, rng)?;
            preds.push(Self::advance(&prev, &out)?.reshape(&[b, 1, 2])?);
            kl = kl.add(&k)?;
        }
        let refs: Vec<&Tensor> = preds.iter().collect();
        let pred = Tensor::concat(&refs, 1)?;
        let recon = mse_recon(&pred, &gt.narrow(1, 1, self.n_steps)?)?;
        let kl = kl.scale(1.0 / self.n_steps as f64);
        Ok((pred, ElementLoss { recon, kl }))
    }

    /// Free-running decode from `start [B, 2]`; returns `[B, n+1, 2]` with
    /// element 0 equal to `start`.
    pub fn decode(&self, p: &Binding, tokens: &Tensor, start: &Tensor, mode: LatentMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let b = start.shape()[0];
        let mut points = vec![start.reshape(&[b, 1, 2])?];
        let mut prev = start.clone();
        for i in 1..=self.n_steps {
            let lambda = self.condition(p, &prev, i, tokens)?;
            let out = self.cvae.prior(p, &lambda, mode, rng)?;
            prev = Self::advance(&prev, &out)?;
            points.push(prev.reshape(&[b, 1, 2])?);
        }
        let refs: Vec<&Tensor> = points.iter().collect();
        Ok(Tensor::concat(&refs, 1)?)
    }
}

/// Pose head: 48 pose and 10 shape values, starting at the rest hand.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub cvae: CvaeHead,
}

pub const POSE_OUT: usize = crate::hand::POSE_DIM + crate::hand::N_SHAPE;

impl PoseHead {
    pub fn new(bd: &mut Builder, name: &str, d: usize, latent: usize) -> Result<Self> {
        Ok(PoseHead {
            cvae: CvaeHead::new(bd, name, POSE_OUT, d, POSE_OUT, latent, true)?,
        })
    }

    /// `gt [B, 58]` (θ then β). Returns the decoded `[B, 58]` and the
    /// element loss without the joint term.
    pub fn train(&self, p: &Binding, cond: &Tensor, gt: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, ElementLoss)> {
        let (out, kl) = self.cvae.posterior(p, gt, cond, rng)?;
        let recon = mse_recon(&out, gt)?;
        Ok((out, ElementLoss { recon, kl }))
    }

    pub fn decode(&self, p: &Binding, cond: &Tensor, mode: LatentMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.cvae.prior(p, cond, mode, rng)
    }

    /// Splits `[B, 58]` into `(θ [B, 48], β [B, 10])`.
    pub fn split(out: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((out.narrow(-1, 0, crate::hand::POSE_DIM)?, out.narrow(-1, crate::hand::POSE_DIM, crate::hand::N_SHAPE)?))
    }
}

/// Contact head: per-vertex contact probabilities.
#[derive(Clone, Debug)]
pub struct ContactHead {
    pub cvae: CvaeHead,
}

/// Initial contact probability of every vertex. Contact is sparse, so the
/// output bias starts here rather than at one half; otherwise early training
/// is spent only on pulling hundreds of logits down.
pub const CONTACT_PRIOR: f64 = 0.02;

impl ContactHead {
    pub fn new(bd: &mut Builder, name: &str, d: usize, latent: usize) -> Result<Self> {
        let n = crate::hand::N_VERTICES;
        let cvae = CvaeHead::new(bd, name, n, d, n, latent, false)?;
        if let Some(b) = cvae.dec.l2.b {
            bd.fill(b, (CONTACT_PRIOR / (1.0 - CONTACT_PRIOR)).ln());
        }
        Ok(ContactHead { cvae })
    }

    /// `gt [B, 778]` 0/1 mask; returns probabilities and the BCE element loss.
    pub fn train(&self, p: &Binding, cond: &Tensor, gt: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, ElementLoss)> {
        let (logits, kl) = self.cvae.posterior(p, gt, cond, rng)?;
        let probs = logits.sigmoid();
        let recon = bce_contact(&probs, gt)?;
        Ok((probs, ElementLoss { recon, kl }))
    }

    pub fn decode(&self, p: &Binding, cond: &Tensor, mode: LatentMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.cvae.prior(p, cond, mode, rng)?.sigmoid())
    }
}
