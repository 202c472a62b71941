//! Equilibrium fusion of the two intention streams.
//!
//! The joint state `z = [z_t | z_h | F_i]` (each `[B, d]`) is driven to a
//! fixed point of one update map. The forward solve runs off-tape; the
//! result enters the tape as a single node whose backward solves the
//! adjoint fixed point `u = g + J_zᵀ u` and chains it into inputs and
//! parameters.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use hoi_autodiff::{enable_grad, no_grad, vjp, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{HoiError, Result};
use crate::nn::{Binding, Builder, Init, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackwardMode {
    /// Solve the adjoint linear fixed point with the configured solver.
    Adjoint,
    /// Use the upstream gradient as the adjoint (a single Jacobian application).
    OneStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeqConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub solver: String,
    pub anderson_memory: usize,
    pub damping: f64,
    pub backward: BackwardMode,
    pub adjoint_max_iter: usize,
}

impl Default for DeqConfig {
    fn default() -> Self {
        DeqConfig {
            tol: 1e-4,
            max_iter: 50,
            solver: "anderson".into(),
            anderson_memory: 5,
            damping: 1.0,
            backward: BackwardMode::Adjoint,
            adjoint_max_iter: 50,
        }
    }
}

impl DeqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(HoiError::Config("deq tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(HoiError::Config("deq max_iter must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(HoiError::Config("deq damping must lie in (0, 1]".into()));
        }
        if self.anderson_memory == 0 {
            return Err(HoiError::Config("anderson_memory must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    /// Best iterate seen (lowest residual).
    pub z: Vec<f64>,
    /// `max |f(z) - z|` at `z`.
    pub residual: f64,
    /// Updates applied before `z` was accepted, or `max_iter` if none was.
    pub iterations: usize,
    pub converged: bool,
    /// Residual of every evaluated iterate, in order.
    pub history: Vec<f64>,
}

pub type FixedPointMap<'a> = dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a;

pub trait FixedPointSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, f: &mut FixedPointMap, z0: Vec<f64>, cfg: &DeqConfig) -> Result<SolveReport>;
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Shared driver: evaluate, test, then let `next` propose the following iterate.
fn iterate(
    f: &mut FixedPointMap,
    z0: Vec<f64>,
    cfg: &DeqConfig,
    mut next: impl FnMut(&[f64], Vec<f64>) -> Vec<f64>,
) -> Result<SolveReport> {
    let mut x = z0;
    let mut history = Vec::new();
    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    for k in 0..=cfg.max_iter {
        let fx = f(&x)?;
        if fx.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(HoiError::Diverged { iteration: k, sample: None });
        }
        let res = inf_norm_diff(&fx, &x);
        history.push(res);
        if best.as_ref().is_none_or(|b| res < b.1) {
            best = Some((x.clone(), res, k));
        }
        if res <= cfg.tol {
            return Ok(SolveReport {
                z: x,
                residual: res,
                iterations: k,
                converged: true,
                history,
            });
        }
        if k == cfg.max_iter {
            break;
        }
        x = next(&x, fx);
    }
    let (z, residual, _) = best.expect("at least one evaluation");
    Ok(SolveReport {
        z,
        residual,
        iterations: cfg.max_iter,
        converged: false,
        history,
    })
}

/// `z ← (1 − damping)·z + damping·f(z)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PlainIteration;

impl FixedPointSolver for PlainIteration {
    fn name(&self) -> &'static str {
        "plain"
    }

    fn solve(&self, f: &mut FixedPointMap, z0: Vec<f64>, cfg: &DeqConfig) -> Result<SolveReport> {
        let beta = cfg.damping;
        iterate(f, z0, cfg, |x, fx| {
            if beta == 1.0 {
                fx
            } else {
                x.iter().zip(&fx).map(|(a, b)| (1.0 - beta) * a + beta * b).collect()
            }
        })
    }
}

/// Type-II Anderson acceleration over a sliding window of past iterates.
#[derive(Clone, Copy, Debug, Default)]
pub struct Anderson;

/// Solves the small dense system `a y = b` by Gaussian elimination with
/// partial pivoting. `a` is row-major `n × n`.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(piv * n + c, col * n + c);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let factor = a[r * n + col] / a[col * n + col];
            for c in col..n {
                a[r * n + c] -= factor * a[col * n + c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut y = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r * n + c] * y[c]).sum();
        y[r] = (b[r] - s) / a[r * n + r];
    }
    Some(y)
}

impl FixedPointSolver for Anderson {
    fn name(&self) -> &'static str {
        "anderson"
    }

    fn solve(&self, f: &mut FixedPointMap, z0: Vec<f64>, cfg: &DeqConfig) -> Result<SolveReport> {
        let (m, beta) = (cfg.anderson_memory, cfg.damping);
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut fs: Vec<Vec<f64>> = Vec::new();
        iterate(f, z0, cfg, |x, fx| {
            if xs.len() == m {
                xs.remove(0);
                fs.remove(0);
            }
            xs.push(x.to_vec());
            fs.push(fx);
            let n = xs.len();
            let gs: Vec<Vec<f64>> = xs.iter().zip(&fs).map(|(x, f)| f.iter().zip(x).map(|(a, b)| a - b).collect()).collect();
            // min ||Σ α_i g_i||² subject to Σ α_i = 1  ⇔  α ∝ H⁻¹ 1
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let dot: f64 = gs[i].iter().zip(&gs[j]).map(|(a, b)| a * b).sum();
                    h[i * n + j] = dot;
                    h[j * n + i] = dot;
                }
            }
            let scale = (0..n).map(|i| h[i * n + i]).fold(0.0, f64::max);
            for i in 0..n {
                h[i * n + i] += 1e-10 * scale + 1e-300;
            }
            let alpha = solve_dense(h, vec![1.0; n])
                .map(|y| {
                    let s: f64 = y.iter().sum();
                    y.into_iter().map(|v| v / s).collect::<Vec<_>>()
                })
                .filter(|a| a.iter().all(|v| v.is_finite()))
                .unwrap_or_else(|| {
                    let mut a = vec![0.0; n];
                    a[n - 1] = 1.0;
                    a
                });
            let dim = x.len();
            let mut out = vec![0.0; dim];
            for (i, a) in alpha.iter().enumerate() {
                for k in 0..dim {
                    out[k] += a * ((1.0 - beta) * xs[i][k] + beta * fs[i][k]);
                }
            }
            out
        })
    }
}

/// Solvers selectable by name from configuration.
#[derive(Clone)]
pub struct SolverRegistry {
    solvers: BTreeMap<String, Arc<dyn FixedPointSolver>>,
}

impl Default for SolverRegistry {
    fn default() -> Self {
        let mut r = SolverRegistry { solvers: BTreeMap::new() };
        r.register(Arc::new(PlainIteration));
        r.register(Arc::new(Anderson));
        r
    }
}

impl SolverRegistry {
    pub fn register(&mut self, solver: Arc<dyn FixedPointSolver>) {
        self.solvers.insert(solver.name().to_string(), solver);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FixedPointSolver>> {
        self.solvers.get(name).cloned().ok_or_else(|| HoiError::UnknownStrategy {
            site: "solver",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.solvers.keys().cloned().collect()
    }
}

/// Solves `z = f(z)` with the solver named in `cfg`.
pub fn fixed_point_solve(f: &mut FixedPointMap, z0: Vec<f64>, cfg: &DeqConfig) -> Result<SolveReport> {
    cfg.validate()?;
    SolverRegistry::default().get(&cfg.solver)?.solve(f, z0, cfg)
}

/// Diagnostics and final state of one equilibrium solve over a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeqState {
    pub z_t: Vec<f64>,
    pub z_h: Vec<f64>,
    pub f_i: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `z' = LN(GELU(z W_z + x W_x + b))`.
#[derive(Clone, Debug)]
struct Branch {
    wz: usize,
    wx: usize,
    b: usize,
    gain: usize,
    bias: usize,
}

/// `F_i' = LN(GELU(x_t A + x_h B + fused C + b1) W2 + b2)`.
#[derive(Clone, Debug)]
struct Output {
    w1t: usize,
    w1h: usize,
    w1f: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    gain: usize,
    bias: usize,
}

/// Weights of the equilibrium update map. Parameter slots are positions in
/// [`DeqFusion::param_ids`], so the map can be re-evaluated on any tensor
/// list in that order.
#[derive(Clone, Debug)]
pub struct DeqFusion {
    pub d: usize,
    ids: Vec<ParamId>,
    t: Branch,
    h: Branch,
    out: Output,
}

/// Spectral bound applied at init to every matrix that feeds the state back
/// into itself; input projections use the larger general bound.
pub const RECURRENT_SPECTRAL_BOUND: f64 = 0.3;
pub const INPUT_SPECTRAL_BOUND: f64 = 0.9;

impl DeqFusion {
    pub fn new(bd: &mut Builder, name: &str, d: usize) -> Result<Self> {
        let mut s = bd.sub(name);
        let mut ids = Vec::new();
        let mut add = |s: &mut Builder, n: &str, shape: &[usize], init: Init, decay: bool| -> Result<usize> {
            ids.push(s.param(n, shape, init, decay)?);
            Ok(ids.len() - 1)
        };
        let rec = Init::Spectral(RECURRENT_SPECTRAL_BOUND);
        let inp = Init::Spectral(INPUT_SPECTRAL_BOUND);
        let branch = |s: &mut Builder, add: &mut dyn FnMut(&mut Builder, &str, &[usize], Init, bool) -> Result<usize>, tag: &str| -> Result<Branch> {
            Ok(Branch {
                wz: add(s, &format!("{tag}.wz"), &[d, d], rec, true)?,
                wx: add(s, &format!("{tag}.wx"), &[d, d], inp, true)?,
                b: add(s, &format!("{tag}.b"), &[d], Init::Zeros, false)?,
                gain: add(s, &format!("{tag}.ln.gain"), &[d], Init::Ones, false)?,
                bias: add(s, &format!("{tag}.ln.bias"), &[d], Init::Zeros, false)?,
            })
        };
        let t = branch(&mut s, &mut add, "branch_t")?;
        let h = branch(&mut s, &mut add, "branch_h")?;
        let hid = 2 * d;
        let out = Output {
            w1t: add(&mut s, "out.w1t", &[d, hid], inp, true)?,
            w1h: add(&mut s, "out.w1h", &[d, hid], inp, true)?,
            w1f: add(&mut s, "out.w1f", &[d, hid], rec, true)?,
            b1: add(&mut s, "out.b1", &[hid], Init::Zeros, false)?,
            w2: add(&mut s, "out.w2", &[hid, d], inp, true)?,
            b2: add(&mut s, "out.b2", &[d], Init::Zeros, false)?,
            gain: add(&mut s, "out.ln.gain", &[d], Init::Ones, false)?,
            bias: add(&mut s, "out.ln.bias", &[d], Init::Zeros, false)?,
        };
        Ok(DeqFusion { d, ids, t, h, out })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Id of the weight that feeds the fused product into the output net.
    pub fn fused_input_weight(&self) -> ParamId {
        self.ids[self.out.w1f]
    }

    fn branch(&self, br: &Branch, p: &[Tensor], z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let pre = z.matmul(&p[br.wz])?.add(&x.matmul(&p[br.wx])?)?.add(&p[br.b])?;
        Ok(pre.gelu().layer_norm(&p[br.gain], &p[br.bias])?)
    }

    /// One application of the update map to `z [B, 3d]`.
    pub fn apply(&self, p: &[Tensor], z: &Tensor, xt: &Tensor, xh: &Tensor) -> Result<Tensor> {
        let d = self.d;
        let zt = self.branch(&self.t, p, &z.narrow(1, 0, d)?, xt)?;
        let zh = self.branch(&self.h, p, &z.narrow(1, d, d)?, xh)?;
        let fi = z.narrow(1, 2 * d, d)?;
        let fused = fi.mul(&zt)?.add(&fi.mul(&zh)?)?;
        let o = &self.out;
        let hidden = xt
            .matmul(&p[o.w1t])?
            .add(&xh.matmul(&p[o.w1h])?)?
            .add(&fused.matmul(&p[o.w1f])?)?
            .add(&p[o.b1])?
            .gelu();
        let fi_new = hidden.matmul(&p[o.w2])?.add(&p[o.b2])?.layer_norm(&p[o.gain], &p[o.bias])?;
        Ok(Tensor::concat(&[&zt, &zh, &fi_new], 1)?)
    }

    /// Equilibrium fusion of pooled features `xt, xh [B, d]`, starting from
    /// `init` (default all zeros). Returns `F_i* [B, d]` on the tape.
    pub fn fuse(
        &self,
        p: &Binding,
        xt: &Tensor,
        xh: &Tensor,
        cfg: &DeqConfig,
        solvers: &SolverRegistry,
        init: Option<Vec<f64>>,
    ) -> Result<(Tensor, DeqState)> {
        let (b, d) = (xt.shape()[0], self.d);
        if xt.shape() != [b, d] || xh.shape() != [b, d] {
            return Err(HoiError::Config(format!(
                "equilibrium inputs must both be [{b}, {d}], got {:?} and {:?}",
                xt.shape(),
                xh.shape()
            )));
        }
        let mut inputs = vec![xt.clone(), xh.clone()];
        inputs.extend(self.ids.iter().map(|&id| p.get(id)));
        let cell = self.clone();
        let map: StateMap = Rc::new(move |z: &Tensor, ins: &[Tensor]| cell.apply(&ins[2..], z, &ins[0], &ins[1]));
        let z0 = init.unwrap_or_else(|| vec![0.0; b * 3 * d]);
        let (z, report) = equilibrium(map, &inputs, z0, &[b, 3 * d], cfg, solvers.get(&cfg.solver)?)?;
        let mut state = DeqState {
            z_t: Vec::with_capacity(b * d),
            z_h: Vec::with_capacity(b * d),
            f_i: Vec::with_capacity(b * d),
            residual: report.residual,
            iterations: report.iterations,
            converged: report.converged,
        };
        for row in report.z.chunks(3 * d) {
            state.z_t.extend_from_slice(&row[..d]);
            state.z_h.extend_from_slice(&row[d..2 * d]);
            state.f_i.extend_from_slice(&row[2 * d..]);
        }
        Ok((z.narrow(1, 2 * d, d)?, state))
    }
}

/// A state update `z' = f(z, inputs)`, evaluated both off-tape during the
/// solve and on-tape when differentiating.
pub type StateMap = Rc<dyn Fn(&Tensor, &[Tensor]) -> Result<Tensor>>;

/// Solves `z* = map(z*, inputs)` from `z0` and records `z*` as one tape node
/// whose parents are `inputs`. Its backward applies the implicit function
/// theorem according to `cfg.backward`.
pub fn equilibrium(
    map: StateMap,
    inputs: &[Tensor],
    z0: Vec<f64>,
    shape: &[usize],
    cfg: &DeqConfig,
    solver: Arc<dyn FixedPointSolver>,
) -> Result<(Tensor, SolveReport)> {
    cfg.validate()?;
    let consts: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
    let report = {
        let mut f = |z: &[f64]| -> Result<Vec<f64>> {
            no_grad(|| Ok(map(&Tensor::new(z.to_vec(), shape)?, &consts)?.to_vec()))
        };
        solver.solve(&mut f, z0, cfg)?
    };
    let zstar = report.z.clone();
    let (shape_b, cfg_b) = (shape.to_vec(), cfg.clone());
    let z = Tensor::from_op(report.z.clone(), shape.to_vec(), inputs.to_vec(), move |g| {
        implicit_backward(&map, g, &zstar, &shape_b, &consts, &cfg_b, solver.as_ref())
    });
    Ok((z, report))
}

fn implicit_backward(
    map: &StateMap,
    g: &[f64],
    zstar: &[f64],
    shape: &[usize],
    inputs: &[Tensor],
    cfg: &DeqConfig,
    solver: &dyn FixedPointSolver,
) -> Vec<Option<Vec<f64>>> {
    enable_grad(|| {
        let z = Tensor::param(zstar.to_vec(), shape).expect("state shape");
        let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach_param()).collect();
        let fz = map(&z, &leaves).expect("shapes fixed at forward time");
        let u = match cfg.backward {
            BackwardMode::OneStep => g.to_vec(),
            BackwardMode::Adjoint => adjoint(&fz, &z, g, cfg, solver).unwrap_or_else(|| {
                log::warn!("adjoint solve did not converge; using one-step gradient");
                g.to_vec()
            }),
        };
        let wrt: Vec<&Tensor> = leaves.iter().collect();
        vjp(&fz, &u, &wrt).expect("retained tape").into_iter().map(Some).collect()
    })
}

/// Solves `u = g + J_zᵀ u` at the equilibrium; `None` when it fails.
fn adjoint(fz: &Tensor, z: &Tensor, g: &[f64], cfg: &DeqConfig, solver: &dyn FixedPointSolver) -> Option<Vec<f64>> {
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Some(g.to_vec());
    }
    let acfg = DeqConfig {
        tol: cfg.tol * scale,
        max_iter: cfg.adjoint_max_iter,
        ..cfg.clone()
    };
    let mut map = |u: &[f64]| -> Result<Vec<f64>> {
        let jt = vjp(fz, u, &[z])?.pop().expect("one gradient");
        Ok(jt.iter().zip(g).map(|(a, b)| a + b).collect())
    };
    match solver.solve(&mut map, g.to_vec(), &acfg) {
        Ok(r) if r.converged => Some(r.z),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(solver: &str) -> DeqConfig {
        DeqConfig {
            solver: solver.into(),
            ..Default::default()
        }
    }

    #[test]
    fn linear_map_fixed_point_is_two() {
        for s in ["plain", "anderson"] {
            let r = fixed_point_solve(&mut |z: &[f64]| Ok(vec![0.5 * z[0] + 1.0]), vec![0.0], &cfg(s)).unwrap();
            assert!(r.converged && (r.z[0] - 2.0).abs() < 2e-4, "{s}: {r:?}");
            assert!(r.residual <= 1e-4);
        }
    }

    #[test]
    fn tanh_map_matches_long_unrolled_iteration() {
        let f = |z: f64| (0.3 * z + 0.5).tanh();
        let mut oracle = 0.0;
        for _ in 0..1000 {
            oracle = f(oracle);
        }
        let tight = DeqConfig { tol: 1e-9, ..cfg("anderson") };
        let r = fixed_point_solve(&mut |z: &[f64]| Ok(vec![f(z[0])]), vec![0.0], &tight).unwrap();
        assert!((r.z[0] - oracle).abs() < 1e-6);
    }

    #[test]
    fn non_finite_map_reports_iteration() {
        let mut calls = 0;
        let mut f = |z: &[f64]| {
            calls += 1;
            Ok(vec![if calls > 3 { f64::NAN } else { 2.0 * z[0] + 1.0 }])
        };
        let err = fixed_point_solve(&mut f, vec![0.0], &cfg("plain")).unwrap_err();
        assert!(matches!(err, HoiError::Diverged { iteration: 3, .. }), "{err}");
    }

    #[test]
    fn exhausted_budget_returns_best_iterate_unconverged() {
        let c = DeqConfig { max_iter: 3, ..cfg("plain") };
        let r = fixed_point_solve(&mut |z: &[f64]| Ok(vec![0.9 * z[0] + 1.0]), vec![0.0], &c).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert_eq!(r.residual, r.history.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn unknown_solver_is_named() {
        let err = fixed_point_solve(&mut |z: &[f64]| Ok(z.to_vec()), vec![0.0], &cfg("broyden")).unwrap_err();
        assert!(err.to_string().contains("broyden"));
    }

    #[test]
    fn implicit_derivative_of_scalar_map() {
        let x = Tensor::param(vec![0.7], &[1]).unwrap();
        let map: StateMap = Rc::new(|z: &Tensor, ins: &[Tensor]| Ok(z.scale(0.5).add(&ins[0])?));
        let tight = DeqConfig { tol: 1e-12, max_iter: 100, ..cfg("anderson") };
        let solver = SolverRegistry::default().get("anderson").unwrap();
        let (z, _) = equilibrium(map, &[x.clone()], vec![0.0], &[1], &tight, solver).unwrap();
        assert!((z.item().unwrap() - 1.4).abs() < 1e-10);
        z.sum().backward().unwrap();
        assert!((x.grad().unwrap()[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn dense_solve_small_system() {
        let y = solve_dense(vec![2.0, 1.0, 1.0, 3.0], vec![3.0, 5.0]).unwrap();
        assert!((y[0] - 0.8).abs() < 1e-12 && (y[1] - 1.4).abs() < 1e-12);
    }
}
