//! Central finite-difference gradient checking.
//!
//! Always runs at `Precision::F64`; f32 rounding makes difference quotients
//! unreliable at the tight tolerances used in tests.

use super::{Graph, ParamBinding, ParamStore, Precision, Tensor, Var};
use crate::error::Result;

/// Compare analytic gradients of a scalar-valued graph function against
/// central finite differences.
///
/// `build` receives a fresh graph plus one `Var` per input tensor (all
/// requiring gradients for the analytic pass) and must return the scalar loss.
/// Returns the maximum relative error over every element of every input,
/// where relative error is `|a - n| / max(1e-6, |a| + |n|)`.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut g = Graph::with_precision(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_precision(Precision::F64);
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut max_rel = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += step;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Finite-difference check for every element of every parameter a model
/// forward touches.
///
/// `loss` builds the scalar loss from a fresh graph and a binding over the
/// store. The analytic pass records which parameters were bound; the numeric
/// pass perturbs each of their elements in place and re-runs the forward.
/// Returns the maximum relative error, as in [`check_gradients`].
pub fn check_param_gradients<F>(store: &mut ParamStore, loss: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamBinding) -> Result<Var>,
{
    let (touched, analytic) = {
        let mut g = Graph::with_precision(Precision::F64);
        let bind = ParamBinding::new(store);
        let l = loss(&mut g, &bind)?;
        g.backward(l)?;
        let touched = bind.bound();
        let analytic: Vec<Vec<f64>> = touched
            .iter()
            .map(|&(_, v)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect();
        (touched, analytic)
    };

    let mut max_rel = 0.0f64;
    for ((name, _), grads) in touched.iter().zip(&analytic) {
        let base = store.get(name)?.clone();
        for ei in 0..base.numel() {
            let mut numeric_at = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[ei] += delta;
                store.set(name, t)?;
                let mut g = Graph::with_precision(Precision::F64);
                let bind = ParamBinding::new(store);
                let l = loss(&mut g, &bind)?;
                Ok(g.value(l).data()[0])
            };
            let numeric = (numeric_at(step)? - numeric_at(-step)?) / (2.0 * step);
            store.set(name, base.clone())?;
            let a = grads[ei];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

