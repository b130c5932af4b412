//! Central-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and
/// central differences with step `h`, over every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, &all)
}

/// [`finite_diff_check`] restricted to the listed coordinates of `x`.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&g, xv)?;
    g.backward(y)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |point: Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let v = g.variable(point);
        let y = f(&g, v)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check against the parameters of a store, probing at most
/// `per_param` coordinates (evenly strided) of every parameter tensor.
pub fn finite_diff_check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    h: f64,
    per_param: usize,
) -> Result<f64>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let g = Graph::new();
    let y = f(&g, store)?;
    g.backward(y)?;
    store.accumulate_grads(&g);
    drop(g);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let y = f(&g, store)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let numel = store.value(id).numel();
        let stride = (numel / per_param.max(1)).max(1);
        for i in (0..numel).step_by(stride) {
            let analytic = store.grad(id).data()[i];
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let fp = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let fm = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    store.zero_grad();
    Ok(worst)
}
