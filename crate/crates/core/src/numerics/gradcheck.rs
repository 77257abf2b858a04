//! Central finite-difference oracle for analytic gradients.

use super::graph::{Graph, Module, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error measure used by every check: `|a - n| / max(1, |a|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1e-2]")));
    }
    Ok(())
}

fn eval_inputs<F>(loss_fn: &mut F, inputs: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = loss_fn(&mut g, &vars)?;
    Ok(g.value(root).item())
}

/// Max relative error between the tape gradient of `loss_fn` and central
/// differences, over every scalar of every input tensor.
///
/// `loss_fn` receives one graph variable per input and must return a scalar.
pub fn finite_diff_check<F>(mut loss_fn: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = loss_fn(&mut g, &vars)?;
    let base = g.value(root).item();
    let grads = g.backward(root)?;
    if eval_inputs(&mut loss_fn, inputs)? != base {
        return Err(Error::Inconsistent(
            "loss function returned different values for identical inputs".into(),
        ));
    }

    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval_inputs(&mut loss_fn, &work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval_inputs(&mut loss_fn, &work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Same check over the parameters of a [`Module`]; `loss_fn` binds the
/// module's parameters itself (by name) and returns a scalar.
pub fn finite_diff_check_module<M, F>(module: &mut M, mut loss_fn: F, eps: f64) -> Result<f64>
where
    M: Module,
    F: FnMut(&mut Graph, &M) -> Result<Var>,
{
    check_eps(eps)?;
    module.zero_grad();
    let mut g = Graph::new();
    let root = loss_fn(&mut g, module)?;
    let base = g.value(root).item();
    let grads = g.backward(root)?;
    grads.accumulate(module.params_mut())?;
    let analytic: Vec<Tensor> = module.params().iter().map(|p| p.grad.clone()).collect();
    module.zero_grad();

    let mut eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss_fn(&mut g, m)?;
        Ok(g.value(root).item())
    };
    if eval(module)? != base {
        return Err(Error::Inconsistent(
            "loss function returned different values for identical parameters".into(),
        ));
    }

    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = module.params()[k].value.data()[i];
            module.params_mut()[k].value.data_mut()[i] = orig + eps;
            let up = eval(module)?;
            module.params_mut()[k].value.data_mut()[i] = orig - eps;
            let down = eval(module)?;
            module.params_mut()[k].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
