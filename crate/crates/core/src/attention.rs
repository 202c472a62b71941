//! Pre-norm self- and cross-attention blocks over `[batch, tokens, d]`.
//!
//! There are no positional encodings, so every block here is equivariant
//! under permutations of its token axes.

use hoi_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HoiError, Result};
use crate::nn::{Binding, Builder, FeedForward, Init, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Rounds of parallel cross-attention between the two intention streams.
    pub depth: usize,
    pub n_sa_blocks: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d_model: 64,
            n_heads: 4,
            ffn_mult: 4,
            depth: 2,
            n_sa_blocks: 2,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(HoiError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_sa_blocks == 0 {
            return Err(HoiError::Config("n_sa_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_width(x: &Tensor, d: usize) -> Result<()> {
    match x.shape() {
        [_, _, w] if *w == d => Ok(()),
        s => Err(HoiError::Config(format!("expected [batch, tokens, {d}], got {s:?}"))),
    }
}

/// Multi-head scaled dot-product attention without biases.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(bd: &mut Builder, name: &str, d: usize, n_heads: usize) -> Result<Self> {
        let mut s = bd.sub(name);
        Ok(MultiHeadAttention {
            q: Linear::new(&mut s, "q", d, d, false, Init::Uniform)?,
            k: Linear::new(&mut s, "k", d, d, false, Init::Uniform)?,
            v: Linear::new(&mut s, "v", d, d, false, Init::Uniform)?,
            o: Linear::new(&mut s, "o", d, d, false, Init::Zeros)?,
            n_heads,
            d_model: d,
        })
    }

    /// Queries from `x [B,Tq,d]`, keys and values from `y [B,Tk,d]`.
    /// Returns the projected output and per-head probabilities `[B,Tq,Tk]`.
    pub fn forward(&self, p: &Binding, x: &Tensor, y: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        check_width(x, self.d_model)?;
        check_width(y, self.d_model)?;
        let (q, k, v) = (self.q.forward(p, x)?, self.k.forward(p, y)?, self.v.forward(p, y)?);
        let hd = self.d_model / self.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.narrow(2, h * hd, hd)?;
            let kh = k.narrow(2, h * hd, hd)?;
            let vh = v.narrow(2, h * hd, hd)?;
            let a = qh.matmul(&kh.transpose(1, 2)?)?.scale(scale).softmax(-1)?;
            heads.push(a.matmul(&vh)?);
            probs.push(a);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let merged = if refs.len() == 1 { heads[0].clone() } else { Tensor::concat(&refs, 2)? };
        Ok((self.o.forward(p, &merged)?, probs))
    }
}

/// `y = x + MSA(LN x); out = y + FFN(LN y)`.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfBlock {
    pub fn new(bd: &mut Builder, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let d = cfg.d_model;
        let mut s = bd.sub(name);
        Ok(SelfBlock {
            ln1: LayerNorm::new(&mut s, "ln1", d)?,
            attn: MultiHeadAttention::new(&mut s, "attn", d, cfg.n_heads)?,
            ln2: LayerNorm::new(&mut s, "ln2", d)?,
            ffn: FeedForward::new(&mut s, "ffn", d, d * cfg.ffn_mult, d, true)?,
        })
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(p, x)?;
        let y = x.add(&self.attn.forward(p, &h, &h)?.0)?;
        Ok(y.add(&self.ffn.forward(p, &self.ln2.forward(p, &y)?)?)?)
    }
}

/// Cross-attention with residual and feed-forward: queries from `x`,
/// keys/values from `y`, each stream with its own pre-norm.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossBlock {
    pub fn new(bd: &mut Builder, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let d = cfg.d_model;
        let mut s = bd.sub(name);
        Ok(CrossBlock {
            ln_q: LayerNorm::new(&mut s, "ln_q", d)?,
            ln_kv: LayerNorm::new(&mut s, "ln_kv", d)?,
            attn: MultiHeadAttention::new(&mut s, "attn", d, cfg.n_heads)?,
            ln2: LayerNorm::new(&mut s, "ln2", d)?,
            ffn: FeedForward::new(&mut s, "ffn", d, d * cfg.ffn_mult, d, true)?,
        })
    }

    pub fn forward(&self, p: &Binding, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (hq, hkv) = (self.ln_q.forward(p, x)?, self.ln_kv.forward(p, y)?);
        let z = x.add(&self.attn.forward(p, &hq, &hkv)?.0)?;
        Ok(z.add(&self.ffn.forward(p, &self.ln2.forward(p, &z)?)?)?)
    }
}

/// Depth rounds of simultaneous cross-attention between two streams.
#[derive(Clone, Debug)]
pub struct ParallelCross {
    /// `(a attends to b, b attends to a)` per round.
    pub rounds: Vec<(CrossBlock, CrossBlock)>,
}

impl ParallelCross {
    pub fn new(bd: &mut Builder, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let mut s = bd.sub(name);
        let rounds = (0..cfg.depth)
            .map(|r| {
                Ok((
                    CrossBlock::new(&mut s, &format!("r{r}.a"), cfg)?,
                    CrossBlock::new(&mut s, &format!("r{r}.b"), cfg)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(ParallelCross { rounds })
    }

    /// Both directions of a round read the same pre-round pair.
    pub fn forward(&self, p: &Binding, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mut a, mut b) = (a.clone(), b.clone());
        for (ab, ba) in &self.rounds {
            let na = ab.forward(p, &a, &b)?;
            let nb = ba.forward(p, &b, &a)?;
            (a, b) = (na, nb);
        }
        Ok((a, b))
    }
}

/// `F + MCA(LN F, LN F_i)` without a feed-forward stage.
#[derive(Clone, Debug)]
pub struct ResidualCorrection {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl ResidualCorrection {
    pub fn new(bd: &mut Builder, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let d = cfg.d_model;
        let mut s = bd.sub(name);
        Ok(ResidualCorrection {
            ln_q: LayerNorm::new(&mut s, "ln_q", d)?,
            ln_kv: LayerNorm::new(&mut s, "ln_kv", d)?,
            attn: MultiHeadAttention::new(&mut s, "attn", d, cfg.n_heads)?,
        })
    }

    /// The correction term alone, `MCA(LN F, LN F_i)`.
    pub fn delta(&self, p: &Binding, f: &Tensor, fi: &Tensor) -> Result<Tensor> {
        let (hq, hkv) = (self.ln_q.forward(p, f)?, self.ln_kv.forward(p, fi)?);
        Ok(self.attn.forward(p, &hq, &hkv)?.0)
    }

    pub fn forward(&self, p: &Binding, f: &Tensor, fi: &Tensor) -> Result<Tensor> {
        Ok(f.add(&self.delta(p, f, fi)?)?)
    }
}
