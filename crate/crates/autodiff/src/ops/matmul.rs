use crate::broadcast::{broadcast_shape, Layout};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Strided view of one matrix inside a buffer.
#[derive(Clone, Copy)]
struct MatRef {
    offset: usize,
    rs: isize,
    cs: isize,
}

impl MatRef {
    fn row_major(offset: usize, cols: usize) -> Self {
        MatRef {
            offset,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn transposed(self) -> Self {
        MatRef {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// c[m,n] = a[m,k] * b[k,n] + beta * c
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], av: MatRef, b: &[f64], bv: MatRef, c: &mut [f64], coff: usize, beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(coff + m * n <= c.len());
    // SAFETY: the views stay inside their buffers: every caller derives
    // offsets and strides from shapes whose extents were validated.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(coff),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading (batch) dimensions broadcast from the right.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        if a.ndim() < 2 || b.ndim() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul (needs rank >= 2)",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
        let (k2, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul inner dimension",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }

        // A 2-D right operand folds all batch rows of `a` into one product.
        if b.ndim() == 2 {
            let rows: usize = a.shape()[..a.ndim() - 1].iter().product();
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, a.data(), MatRef::row_major(0, k), b.data(), MatRef::row_major(0, n), &mut out, 0, 0.0);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let (a2, b2) = (a.clone(), b.clone());
            return Ok(Tensor::from_op(out, shape, vec![a.clone(), b.clone()], move |g| {
                let ga = a2.requires_grad().then(|| {
                    let mut ga = vec![0.0; rows * k];
                    gemm(rows, n, k, g, MatRef::row_major(0, n), b2.data(), MatRef::row_major(0, n).transposed(), &mut ga, 0, 0.0);
                    ga
                });
                let gb = b2.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, rows, n, a2.data(), MatRef::row_major(0, k).transposed(), g, MatRef::row_major(0, n), &mut gb, 0, 0.0);
                    gb
                });
                vec![ga, gb]
            }));
        }

        let a_batch = &a.shape()[..a.ndim() - 2];
        let b_batch = &b.shape()[..b.ndim() - 2];
        let batch = broadcast_shape("matmul batch", a_batch, b_batch)?;
        let nb: usize = batch.iter().product();
        let la = Layout::new(&batch, a_batch);
        let lb = Layout::new(&batch, b_batch);
        let a_offs: Vec<usize> = (0..nb).map(|i| la.offset(i) * m * k).collect();
        let b_offs: Vec<usize> = (0..nb).map(|i| lb.offset(i) * k * n).collect();

        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            gemm(m, k, n, a.data(), MatRef::row_major(a_offs[i], k), b.data(), MatRef::row_major(b_offs[i], n), &mut out, i * m * n, 0.0);
        }
        let mut shape = batch.clone();
        shape.extend_from_slice(&[m, n]);
        let (a2, b2) = (a.clone(), b.clone());
        Ok(Tensor::from_op(out, shape, vec![a.clone(), b.clone()], move |g| {
            let ga = a2.requires_grad().then(|| {
                let mut ga = vec![0.0; a2.numel()];
                for i in 0..nb {
                    // dA = dC * B^T, accumulated over broadcast batch entries
                    gemm(m, n, k, g, MatRef::row_major(i * m * n, n), b2.data(), MatRef::row_major(b_offs[i], n).transposed(), &mut ga, a_offs[i], 1.0);
                }
                ga
            });
            let gb = b2.requires_grad().then(|| {
                let mut gb = vec![0.0; b2.numel()];
                for i in 0..nb {
                    gemm(k, m, n, a2.data(), MatRef::row_major(a_offs[i], k).transposed(), g, MatRef::row_major(i * m * n, n), &mut gb, b_offs[i], 1.0);
                }
                gb
            });
            vec![ga, gb]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![1.0, 1.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_is_neutral() {
        let a = Tensor::new((0..12).map(|v| v as f64 * 0.5 - 2.0).collect(), &[2, 2, 3]).unwrap();
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap().data(), a.data());
        let eye_b = Tensor::concat(&[&eye.reshape(&[1, 3, 3]).unwrap(), &eye.reshape(&[1, 3, 3]).unwrap()], 0).unwrap();
        assert_eq!(a.matmul(&eye_b).unwrap().data(), a.data());
    }

    #[test]
    fn inner_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }
}
