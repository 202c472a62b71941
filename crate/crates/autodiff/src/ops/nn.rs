use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{normalize_axis, split_at_axis, Tensor};

/// Variance floor used by [`Tensor::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tensor {
    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&self, axis: isize) -> Result<Tensor> {
        let ax = normalize_axis(axis, self.ndim())?;
        let (outer, len, inner) = split_at_axis(self.shape(), ax);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (x[at(a)] - max).exp();
                    y[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    y[at(a)] /= total;
                }
            }
        }
        let probs = Rc::new(y.clone());
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[at(a)] * probs[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] = probs[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalisation over the last dimension followed by an affine map.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| TensorError::Invalid("layer_norm of a scalar".into()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm affine",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / d.max(1);
        let x = self.data();
        let (gw, bw) = (gain.data(), bias.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gw[j] + bw[j];
            }
        }
        let (gain2, xhat, inv_std) = (gain.clone(), Rc::new(xhat), Rc::new(inv_std));
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g| {
                let gw = gain2.data();
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gw[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gw[j];
                        gx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![Some(gx), Some(ggain), Some(gbias)]
            },
        ))
    }
}
