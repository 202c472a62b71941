//! Trailing-dimension broadcasting.

use crate::error::{Result, TensorError};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// How an operand of shape `input` is read while iterating over `out`.
pub(crate) enum Layout {
    /// Same shape: offset equals output index.
    Same,
    /// Operand repeats every `period` output elements (a trailing suffix).
    Periodic(usize),
    /// Arbitrary broadcast; explicit offset per output element.
    Mapped(Vec<usize>),
}

impl Layout {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Layout {
        if out == input {
            return Layout::Same;
        }
        let in_numel: usize = input.iter().product();
        let pad = out.len() - input.len();
        // input equals a trailing slice of out (after dropping leading 1s)
        let trimmed: &[usize] = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            &input[lead..]
        };
        if out.ends_with(trimmed) {
            return Layout::Periodic(in_numel.max(1));
        }
        let mut strides = vec![0usize; out.len()];
        let mut acc = 1;
        for i in (0..input.len()).rev() {
            strides[pad + i] = if input[i] == 1 { 0 } else { acc };
            acc *= input[i];
        }
        let total: usize = out.iter().product();
        let mut offsets = Vec::with_capacity(total);
        let mut idx = vec![0usize; out.len()];
        let mut off = 0usize;
        for _ in 0..total {
            offsets.push(off);
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Layout::Mapped(offsets)
    }

    #[inline]
    pub(crate) fn offset(&self, i: usize) -> usize {
        match self {
            Layout::Same => i,
            Layout::Periodic(p) => i % p,
            Layout::Mapped(o) => o[i],
        }
    }

    /// Sums an output-shaped gradient back onto the operand's elements.
    pub(crate) fn reduce(&self, g: &[f64], in_numel: usize) -> Vec<f64> {
        match self {
            Layout::Same => g.to_vec(),
            Layout::Periodic(p) => {
                let mut out = vec![0.0; in_numel];
                for chunk in g.chunks(*p) {
                    out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                }
                out
            }
            Layout::Mapped(o) => {
                let mut out = vec![0.0; in_numel];
                for (i, v) in g.iter().enumerate() {
                    out[o[i]] += v;
                }
                out
            }
        }
    }
}
