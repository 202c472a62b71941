use crate::error::{Result, TensorError};
use crate::tensor::{normalize_axis, numel, split_at_axis, Tensor};

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor> {
        let ax = normalize_axis(axis, self.ndim())?;
        let (outer, full, inner) = split_at_axis(self.shape(), ax);
        if start + len > full {
            return Err(TensorError::Invalid(format!(
                "narrow {start}..{} exceeds axis {ax} of length {full}",
                start + len
            )));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[ax] = len;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Joins tensors along `axis`; every other dimension must agree.
    pub fn concat(parts: &[&Tensor], axis: isize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let ax = normalize_axis(axis, first.ndim())?;
        for p in parts.iter().skip(1) {
            let same_rank = p.ndim() == first.ndim();
            let agree = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == ax || a == b);
            if !agree {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), ax);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[ax]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[ax] = total;
        let parents: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(out, shape, parents, move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a0: isize, a1: isize) -> Result<Tensor> {
        let nd = self.ndim();
        let (x, y) = (normalize_axis(a0, nd)?, normalize_axis(a1, nd)?);
        let mut shape = self.shape().to_vec();
        shape.swap(x, y);
        let perm = permutation_map(self.shape(), x, y);
        let src = self.data();
        let out: Vec<f64> = perm.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; g.len()];
            for (o, &i) in perm.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Result<Tensor> {
        self.transpose(-2, -1)
    }
}

/// For each element of the transposed tensor, its source offset.
fn permutation_map(shape: &[usize], x: usize, y: usize) -> Vec<usize> {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(x, y);
    let mut src_strides = strides.clone();
    src_strides.swap(x, y);
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
