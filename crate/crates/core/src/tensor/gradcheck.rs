//! Central finite-difference gradient oracle.
//!
//! Everything here evaluates the loss through plain forward passes only; it
//! never touches `backward()`, so it stays an independent check of the
//! reverse-mode sweep.

use super::{no_grad, Scalar, Tensor};

/// One disagreement between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Central finite differences of `eval` with respect to every element of
/// `param`, at step size `h`. The parameter is restored afterwards.
pub fn finite_difference_grad<F: Scalar>(
    param: &Tensor<F>,
    h: f64,
    eval: &mut dyn FnMut() -> f64,
) -> Vec<f64> {
    let original = param.data_clone();
    let mut grads = Vec::with_capacity(original.len());
    let mut work = original.clone();
    for i in 0..original.len() {
        let base = original[i].to_f64();
        work[i] = F::from_f64(base + h);
        param.set_data(&work);
        let plus = no_grad(&mut *eval);
        work[i] = F::from_f64(base - h);
        param.set_data(&work);
        let minus = no_grad(&mut *eval);
        work[i] = original[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    param.set_data(&original);
    grads
}

/// Checks accumulated analytic gradients on `named` parameters against
/// central finite differences of `eval`. Agreement criterion:
/// `|a - n| <= rtol * max(|a|, |n|) + atol`.
pub fn check_gradients<F: Scalar>(
    named: &[(String, Tensor<F>)],
    h: f64,
    rtol: f64,
    atol: f64,
    eval: &mut dyn FnMut() -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (path, param) in named {
        let analytic = param
            .grad()
            .unwrap_or_else(|| vec![F::zero(); param.numel()]);
        let numeric = finite_difference_grad(param, h, eval);
        for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let a = a.to_f64();
            report.checked += 1;
            let diff = (a - n).abs();
            let scale = a.abs().max(n.abs());
            if scale > 0.0 {
                report.worst_rel_err = report.worst_rel_err.max(diff / scale.max(atol));
            }
            if diff > rtol * scale + atol {
                report.mismatches.push(GradMismatch {
                    path: path.clone(),
                    index: i,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
    report
}
