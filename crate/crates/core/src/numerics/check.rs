//! Central finite-difference checks for tape gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Worst component-wise disagreement between autodiff and central
/// differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub components: usize,
}

/// Relative error with a floor on the denominator so components that are
/// numerically zero on both sides are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares parameter gradients of the scalar built by `f` against
/// central differences with step `h`.
pub fn check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        g.value(out).item()
    };
    let mut worst = 0.0f64;
    let mut components = 0;
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            components += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        components,
    })
}

/// Same check for the gradient with respect to an input tensor.
pub fn check_input<F>(x: &Tensor, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone())?;
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone())?;
        let out = f(&mut g, v)?;
        g.value(out).item()
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        probe.data_mut()[j] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[j] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[j] = orig;
        worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * h)));
    }
    Ok(GradCheck {
        max_rel_err: worst,
        components: x.len(),
    })
}
