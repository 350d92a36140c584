//! Central finite-difference gradient checking.
//!
//! The numerical side evaluates the forward pass only, so it stays independent
//! of every hand-written backward rule it is compared against.

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Checks gradients of a scalar function of free leaf tensors. Returns the
/// worst per-tensor relative error.
pub fn check_leaf_gradients<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = vals.iter().map(|t| g.constant(t.clone())).collect();
        
        f(&g, &vars).value().item()
    };
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss);
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut work = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Per-parameter report from [`check_param_gradients`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub relative_error: f64,
    pub checked: usize,
}

/// Checks gradients of a scalar loss with respect to every parameter in
/// `store`. At most `max_entries` coordinates per tensor are probed (evenly
/// spaced); `usize::MAX` probes all of them.
pub fn check_param_gradients<F>(store: &ParamStore, max_entries: usize, loss: F) -> Vec<ParamCheck>
where
    F: for<'g> Fn(&'g Graph, &ParamStore, bool) -> Var<'g>,
{
    let g = Graph::new();
    let l = loss(&g, store, true);
    let grads = g.backward(l);
    let mut work = store.clone();
    let mut out = Vec::new();
    for name in store.names() {
        let t = store.get(name);
        let n = t.numel();
        let step = if n <= max_entries { 1 } else { n.div_ceil(max_entries) };
        let idx: Vec<usize> = (0..n).step_by(step).collect();
        let analytic_full = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let analytic: Vec<f64> = idx.iter().map(|&i| analytic_full.data()[i]).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = t.data()[i];
            work.get_mut(name).data_mut()[i] = orig + FD_STEP;
            let plus = {
                let g = Graph::new();
                
                loss(&g, &work, false).value().item()
            };
            work.get_mut(name).data_mut()[i] = orig - FD_STEP;
            let minus = {
                let g = Graph::new();
                
                loss(&g, &work, false).value().item()
            };
            work.get_mut(name).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        out.push(ParamCheck {
            name: name.clone(),
            relative_error: relative_error(&analytic, &numeric),
            checked: idx.len(),
        });
    }
    out
}
