//! Training objective. Every reduction is a mean over the batch and a mean
//! over element dimensions, except the KL term, which sums over latent
//! dimensions before averaging over everything else.

use hoi_autodiff::{Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::error::{HoiError, Result};

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_t: f64,
    pub w_h: f64,
    pub w_p: f64,
    pub w_c: f64,
    pub w_m: f64,
    pub lambda_kl: f64,
    pub zeta_joint: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_t: 1.0,
            w_h: 1.0,
            w_p: 1.0,
            w_c: 1.0,
            w_m: 1.0,
            lambda_kl: 0.005,
            zeta_joint: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_t, self.w_h, self.w_p, self.w_c, self.w_m, self.lambda_kl, self.zeta_joint];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(HoiError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `0.5 Σ_latent (μ² + σ² − 1 − log σ²)`, averaged over the leading axes.
pub fn kl_loss(mu: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    same_shape("kl_loss", mu, log_var)?;
    let latent = *mu.shape().last().unwrap_or(&1) as f64;
    let per = mu.square().add(&log_var.exp())?.sub(log_var)?.add_scalar(-1.0);
    Ok(per.mean().scale(0.5 * latent))
}

pub fn mse_recon(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape("mse_recon", pred, gt)?;
    Ok(pred.sub(gt)?.square().mean())
}

/// Mean absolute error over keypoint coordinates `[.., 21, 3]`.
pub fn joint_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape("joint_loss", pred, gt)?;
    if !pred.shape().ends_with(&[21, 3]) {
        return Err(TensorError::ShapeMismatch {
            op: "joint_loss",
            lhs: pred.shape().to_vec(),
            rhs: vec![21, 3],
        }
        .into());
    }
    Ok(pred.sub(gt)?.abs().mean())
}

/// Binary cross-entropy between clamped probabilities and a 0/1 mask.
pub fn bce_contact(probs: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape("bce_contact", probs, mask)?;
    let p = probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pos = mask.mul(&p.ln())?;
    let neg = mask.neg().add_scalar(1.0).mul(&p.neg().add_scalar(1.0).ln())?;
    Ok(pos.add(&neg)?.mean().neg())
}

/// One interaction element: reconstruction plus its latent KL.
#[derive(Clone, Debug)]
pub struct ElementLoss {
    pub recon: Tensor,
    pub kl: Tensor,
}

impl ElementLoss {
    pub fn vae(&self, lambda_kl: f64) -> Result<Tensor> {
        Ok(self.recon.add(&self.kl.scale(lambda_kl))?)
    }
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub trend: ElementLoss,
    pub hotspot: ElementLoss,
    pub pose: ElementLoss,
    pub contact: ElementLoss,
    pub mani: ElementLoss,
    pub joint: Tensor,
}

/// Scalar values of each weighted term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub trend: f64,
    pub hotspot: f64,
    pub pose: f64,
    pub contact: f64,
    pub mani: f64,
}

/// `w_t L_t + w_h L_h + w_p (L_p + ζ L_joint) + w_c L_c + w_m L_m` with each
/// element loss `recon + λ KL`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let lt = parts.trend.vae(w.lambda_kl)?;
    let lh = parts.hotspot.vae(w.lambda_kl)?;
    let lp = parts.pose.vae(w.lambda_kl)?.add(&parts.joint.scale(w.zeta_joint))?;
    let lc = parts.contact.vae(w.lambda_kl)?;
    let lm = parts.mani.vae(w.lambda_kl)?;
    let total = lt
        .scale(w.w_t)
        .add(&lh.scale(w.w_h))?
        .add(&lp.scale(w.w_p))?
        .add(&lc.scale(w.w_c))?
        .add(&lm.scale(w.w_m))?;
    let v = |t: &Tensor| t.data()[0];
    let breakdown = LossBreakdown {
        total: v(&total),
        trend: v(&lt),
        hotspot: v(&lh),
        pose: v(&lp),
        contact: v(&lc),
        mani: v(&lm),
    };
    Ok((total, breakdown))
}
