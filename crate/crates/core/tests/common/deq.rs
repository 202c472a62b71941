//! Seeded equilibrium-fusion instances and the unrolled and
//! finite-difference references they are checked against.

use hoi_autodiff::{no_grad, Tensor};
use hoi_core::deq::{DeqConfig, DeqFusion, DeqState, SolverRegistry};
use hoi_core::nn::{Binding, Builder, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Instance {
    pub store: ParamStore,
    pub cell: DeqFusion,
    pub xt: Vec<f64>,
    pub xh: Vec<f64>,
    pub d: usize,
}

pub fn instance(seed: u64, d: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cell = DeqFusion::new(&mut Builder::new(&mut store, &mut rng), "deq", d).unwrap();
    let xt = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let xh = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    Instance { store, cell, xt, xh, d }
}

pub fn inputs(inst: &Instance, p: &Binding, grad: bool) -> (Tensor, Tensor) {
    let mk = |v: &Vec<f64>| {
        if grad {
            Tensor::param(v.clone(), &[1, inst.d]).unwrap()
        } else {
            Tensor::new(v.clone(), &[1, inst.d]).unwrap()
        }
    };
    let _ = p;
    (mk(&inst.xt), mk(&inst.xh))
}

pub fn solve(inst: &Instance, cfg: &DeqConfig, init: Option<Vec<f64>>) -> DeqState {
    let p = Binding::new(&inst.store, false);
    let (xt, xh) = inputs(inst, &p, false);
    inst.cell.fuse(&p, &xt, &xh, cfg, &SolverRegistry::default(), init).unwrap().1
}

/// Oracle: the update map applied `steps` times from zero, no solver involved.
pub fn unrolled(inst: &Instance, steps: usize) -> Vec<f64> {
    no_grad(|| {
        let p = Binding::new(&inst.store, false);
        let params: Vec<Tensor> = inst.cell.param_ids().iter().map(|&id| p.get(id)).collect();
        let (xt, xh) = inputs(inst, &p, false);
        let mut z = Tensor::zeros(&[1, 3 * inst.d]);
        for _ in 0..steps {
            z = inst.cell.apply(&params, &z, &xt, &xh).unwrap();
        }
        z.to_vec()
    })
}

pub fn joint(s: &DeqState) -> Vec<f64> {
    [s.z_t.clone(), s.z_h.clone(), s.f_i.clone()].concat()
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn solver_cfg(name: &str) -> DeqConfig {
    DeqConfig {
        solver: name.into(),
        ..Default::default()
    }
}
/// Scalar loss `Σ w ⊙ F_i*` and its gradient w.r.t. both inputs and the
/// first entries of every parameter.
pub fn loss_and_grads(inst: &Instance, w: &[f64], cfg: &DeqConfig) -> (f64, Vec<f64>) {
    let p = Binding::new(&inst.store, true);
    let (xt, xh) = inputs(inst, &p, true);
    let (fi, _) = inst.cell.fuse(&p, &xt, &xh, cfg, &SolverRegistry::default(), None).unwrap();
    let loss = fi.mul(&Tensor::new(w.to_vec(), &[1, inst.d]).unwrap()).unwrap().sum();
    let value = loss.item().unwrap();
    loss.backward().unwrap();
    let grads = p.grads();
    let mut g = xt.grad().unwrap();
    g.extend(xh.grad().unwrap());
    for id in inst.cell.param_ids() {
        g.push(grads[id.index()].as_ref().map_or(0.0, |v| v[0]));
    }
    (value, g)
}

pub fn finite_difference(inst: &mut Instance, w: &[f64], cfg: &DeqConfig) -> Vec<f64> {
    let h = 1e-5;
    let eval = |inst: &Instance| no_grad(|| loss_and_value(inst, w, cfg));
    let mut out = Vec::new();
    for which in 0..2 {
        for i in 0..inst.d {
            let v = if which == 0 { &mut inst.xt } else { &mut inst.xh };
            let orig = v[i];
            v[i] = orig + h;
            let up = eval(inst);
            let v = if which == 0 { &mut inst.xt } else { &mut inst.xh };
            v[i] = orig - h;
            let down = eval(inst);
            let v = if which == 0 { &mut inst.xt } else { &mut inst.xh };
            v[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    for id in inst.cell.param_ids().to_vec() {
        let orig = inst.store.entry(id).values[0];
        inst.store.entry_mut(id).values[0] = orig + h;
        let up = eval(inst);
        inst.store.entry_mut(id).values[0] = orig - h;
        let down = eval(inst);
        inst.store.entry_mut(id).values[0] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

pub fn loss_and_value(inst: &Instance, w: &[f64], cfg: &DeqConfig) -> f64 {
    let st = solve(inst, cfg, None);
    st.f_i.iter().zip(w).map(|(a, b)| a * b).sum()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb)
}

pub fn tight() -> DeqConfig {
    DeqConfig {
        tol: 1e-12,
        max_iter: 300,
        adjoint_max_iter: 300,
        ..Default::default()
    }
}
