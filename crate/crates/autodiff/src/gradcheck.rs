//! Central finite-difference reference for checking tape gradients.
//!
//! The oracle only ever evaluates the forward function (with recording
//! disabled); it shares no code with the reverse sweep it checks.

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Outcome of comparing reverse-mode gradients against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all inputs.
    pub rel_error: f64,
}

/// Numerical gradient of a scalar function by central differences.
pub fn numeric_grad<F>(f: &F, inputs: &[(Vec<f64>, Vec<usize>)], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let eval = |vals: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        no_grad(|| {
            let ts = vals
                .iter()
                .map(|(d, s)| Tensor::new(d.clone(), s))
                .collect::<Result<Vec<_>>>()?;
            f(&ts)?.item()
        })
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].0.len()];
        for j in 0..g.len() {
            let orig = work[i].0[j];
            work[i].0[j] = orig + step;
            let up = eval(&work)?;
            work[i].0[j] = orig - step;
            let down = eval(&work)?;
            work[i].0[j] = orig;
            g[j] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Runs `f` once on the tape and once per coordinate under finite
/// differences, returning both gradient sets and their relative error.
pub fn check<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], step: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves = inputs
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    f(&leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let numeric = numeric_grad(&f, inputs, step)?;
    let rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        rel_error,
    })
}

pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
