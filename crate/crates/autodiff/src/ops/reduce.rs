use crate::error::Result;
use crate::tensor::{normalize_axis, split_at_axis, Tensor};

impl Tensor {
    /// Sum of all elements, as a shape-`[]` tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![total], vec![], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums over `axis` (negative counts from the end).
    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = normalize_axis(axis, self.ndim())?;
        let (outer, len, inner) = split_at_axis(self.shape(), ax);
        let src = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[ax] = 1;
        } else {
            shape.remove(ax);
        }
        Ok(Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = normalize_axis(axis, self.ndim())?;
        let len = self.shape()[ax].max(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }
}
