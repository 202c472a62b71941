//! Reverse sweep over the recorded tape.

use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Post-order of every tensor reachable from `root` through nodes that
/// require grad. Iterative so deep tapes do not exhaust the stack.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.0.node.borrow().as_ref() {
            for p in node.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn add_into(grads: &mut HashMap<usize, Vec<f64>>, id: usize, g: Vec<f64>) {
    match grads.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => {
            grads.insert(id, g);
        }
    }
}

fn check_root(root: &Tensor, seed: &[f64]) -> Result<()> {
    if seed.len() != root.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "backward seed",
            lhs: root.shape().to_vec(),
            rhs: vec![seed.len()],
        });
    }
    if !root.requires_grad() {
        return Err(TensorError::NoGradPath);
    }
    if !root.is_leaf() && root.0.node.borrow().is_none() {
        return Err(TensorError::DetachedTape);
    }
    Ok(())
}

fn sweep(
    root: &Tensor,
    seed: Vec<f64>,
    consume: bool,
    wanted: &HashSet<usize>,
) -> HashMap<usize, Vec<f64>> {
    let order = topo_order(root);
    let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut found = HashMap::new();
    grads.insert(root.id(), seed);

    for t in order.iter().rev() {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        if wanted.contains(&t.id()) {
            found.insert(t.id(), g.clone());
        }
        let contributions = if consume {
            let node = t.0.node.borrow_mut().take();
            node.map(|n| ((n.backward)(&g), n.parents))
        } else {
            t.0.node
                .borrow()
                .as_ref()
                .map(|n| ((n.backward)(&g), n.parents.clone()))
        };
        match contributions {
            Some((parent_grads, parents)) => {
                for (p, pg) in parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        if p.requires_grad() {
                            debug_assert_eq!(pg.len(), p.numel(), "gradient shape for parent");
                            add_into(&mut grads, p.id(), pg);
                        }
                    }
                }
            }
            None => {
                if consume && t.is_leaf() {
                    t.accumulate_grad(&g);
                }
            }
        }
    }
    found
}

impl Tensor {
    /// Back-propagates from a single-element tensor, accumulating into the
    /// `grad` of every reachable leaf. Consumes the tape.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalar(self.shape().to_vec()));
        }
        self.backward_with(vec![1.0])
    }

    /// Like [`Tensor::backward`] with an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<f64>) -> Result<()> {
        check_root(self, &seed)?;
        sweep(self, seed, true, &HashSet::new());
        Ok(())
    }
}

/// Vector-Jacobian product of `output` with `seed`, w.r.t. each of `wrt`.
///
/// The tape is kept and no leaf gradients are touched, so this may be
/// called repeatedly on the same graph.
pub fn vjp(output: &Tensor, seed: &[f64], wrt: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    check_root(output, seed)?;
    let wanted: HashSet<usize> = wrt.iter().map(|t| t.id()).collect();
    let mut found = sweep(output, seed.to_vec(), false, &wanted);
    Ok(wrt
        .iter()
        .map(|t| found.remove(&t.id()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}
