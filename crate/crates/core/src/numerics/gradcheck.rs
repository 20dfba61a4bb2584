//! Finite-difference verification of analytic gradients.

use crate::error::{bail, Result};

use super::{Graph, ParamStore, Tensor, Var};

/// Central-difference step used when no other value is given.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar(g: &Graph<f64>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        bail!(Dimension, "grad_check needs a scalar function, got {:?}", v.shape());
    }
    Ok(v.data()[0])
}

/// Worst relative error between backprop and central differences over every
/// element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |ts: &[Tensor<f64>], record: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = if record { Graph::new() } else { Graph::no_grad() };
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = run(inputs, true)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[ti].shape());
        let analytic = grads.get(*var).unwrap_or(&zero).clone();
        for e in 0..inputs[ti].len() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + eps;
            let (gp, _, op) = run(&work, false)?;
            let plus = eval_scalar(&gp, op)?;
            work[ti].data_mut()[e] = orig - eps;
            let (gm, _, om) = run(&work, false)?;
            let minus = eval_scalar(&gm, om)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

/// Same check with respect to every trainable parameter of `store`.
pub fn grad_check_params<F>(store: &mut ParamStore<f64>, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()));
        for e in 0..analytic.len() {
            let orig = store.tensor(id).data()[e];
            store.tensor_mut(id).data_mut()[e] = orig + eps;
            let mut gp = Graph::no_grad();
            let op = f(&mut gp, store)?;
            let plus = eval_scalar(&gp, op)?;
            store.tensor_mut(id).data_mut()[e] = orig - eps;
            let mut gm = Graph::no_grad();
            let om = f(&mut gm, store)?;
            let minus = eval_scalar(&gm, om)?;
            store.tensor_mut(id).data_mut()[e] = orig;
            worst = worst.max(rel_err(analytic.data()[e], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
