//! Central finite-difference verification of analytical gradients (64-bit).

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor of the relative error, so exact zeros compare absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-4, floor: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Builds the graph once per evaluation with every input as a parameter and
/// compares `d loss / d input` against `(L(x+h) - L(x-h)) / 2h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: GradCheck, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zero).clone();
        for e in 0..inputs[i].len() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - cfg.step;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[e];
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference at input {i} element {e}")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}
