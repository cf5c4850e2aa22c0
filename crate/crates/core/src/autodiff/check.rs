use std::collections::BTreeMap;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Elementwise comparison; a NaN on either side is reported with its index.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::GradCheck {
            index: analytic.len().min(numeric.len()),
            reason: format!("length {} vs {}", analytic.len(), numeric.len()),
        });
    }
    let mut worst = 0.0f64;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.is_nan() || n.is_nan() {
            return Err(Error::GradCheck { index: i, reason: format!("NaN (analytic {a}, numeric {n})") });
        }
        worst = worst.max(rel_error(*a, *n));
    }
    Ok(worst)
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, point: &Tensor, step: f64) -> Result<Vec<f64>> {
    let mut x = point.clone();
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let hi = f(&x)?;
        x.data_mut()[i] = orig - step;
        let lo = f(&x)?;
        x.data_mut()[i] = orig;
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

/// Checks the gradient of `build(x)` at `point`; returns the max relative error.
pub fn finite_difference_check<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_inputs(|g, xs| build(g, xs[0]), std::slice::from_ref(point), step)
}

/// Like [`finite_difference_check`] over several inputs at once. The graph
/// is built once and re-run with perturbed bindings.
pub fn finite_difference_check_inputs<F>(build: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let names: Vec<String> = (0..points.len()).map(|i| format!("x{i}")).collect();
    let vars: Vec<Var> = points.iter().zip(&names).map(|(p, n)| g.input(n, p.clone())).collect();
    let y = build(&mut g, &vars)?;
    g.mark_output("y", y);
    g.backward(y)?;
    let mut worst = 0.0f64;
    let mut offset = 0;
    for (k, p) in points.iter().enumerate() {
        let analytic = g.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        let mut bindings: BTreeMap<String, Tensor> =
            names.iter().cloned().zip(points.iter().cloned()).collect();
        let mut eval = g.clone();
        let numeric = numeric_gradient(
            |x| {
                bindings.insert(names[k].clone(), x.clone());
                eval.evaluate(&bindings)?["y"].item()
            },
            p,
            step,
        )?;
        let e = compare_gradients(analytic.data(), &numeric).map_err(|e| match e {
            Error::GradCheck { index, reason } => Error::GradCheck { index: offset + index, reason },
            other => other,
        })?;
        worst = worst.max(e);
        offset += p.numel();
    }
    Ok(worst)
}

/// Gradient check of a parameterized scalar (for example a full training
/// loss) with respect to every parameter in `store`. `build` must be
/// deterministic. At most `per_param` evenly spaced entries of each tensor
/// are perturbed.
pub fn param_gradcheck<F>(store: &ParamStore, build: F, step: f64, per_param: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let y = build(&mut g, store)?;
    let grads = g.backward(y)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    for (name, value) in store.iter() {
        let n = value.numel();
        let count = n.min(per_param.max(1));
        let zeros = Tensor::zeros(value.shape());
        let analytic = grads.get(name).unwrap_or(&zeros);
        for c in 0..count {
            let i = c * n / count;
            let eval = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                s.get_mut(name)?.data_mut()[i] += delta;
                let mut g = Graph::new();
                let y = build(&mut g, &s)?;
                g.value(y).item()
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = analytic.data()[i];
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::GradCheck { index: i, reason: format!("NaN in `{name}`") });
            }
            let e = rel_error(a, numeric);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("{name}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
