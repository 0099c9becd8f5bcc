//! Central finite-difference checks for [`LossModel`] derivatives.

use crate::error::{Error, Result};
use crate::model::LossModel;

/// Maximum scaled errors `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub grad_h: f64,
    pub grad_a: f64,
    pub hess_h: f64,
    /// Largest asymmetry `|H_kl − H_lk|` of the analytic Hessian.
    pub hess_asymmetry: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.grad_h.max(self.grad_a).max(self.hess_h)
    }
}

fn scaled_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

pub fn finite_diff_check(
    model: &dyn LossModel,
    h: &[f64],
    y: f64,
    a: &[f64],
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 1e-8 && step < 1e-2) {
        return Err(Error::config(format!("step {step} outside (1e-8, 1e-2)")));
    }
    let l = model.width();
    let lp = model.head_width();
    if h.len() != l || a.len() != lp {
        return Err(Error::shape(format!(
            "expected h of length {l} and a of length {lp}, got {} and {}",
            h.len(),
            a.len()
        )));
    }

    let mut grad = vec![0.0; l];
    model.grad_h(h, y, a, &mut grad);
    let mut grad_a = vec![0.0; lp];
    model.grad_a(h, y, a, &mut grad_a);
    let mut hess = vec![0.0; l * l];
    model.hess_h(h, y, a, &mut hess);

    let mut report = GradCheckReport {
        grad_h: 0.0,
        grad_a: 0.0,
        hess_h: 0.0,
        hess_asymmetry: 0.0,
    };

    let mut hp = h.to_vec();
    let mut hm = h.to_vec();
    let mut gp = vec![0.0; l];
    let mut gm = vec![0.0; l];
    for k in 0..l {
        hp[k] = h[k] + step;
        hm[k] = h[k] - step;
        let num = (model.psi(&hp, y, a) - model.psi(&hm, y, a)) / (2.0 * step);
        report.grad_h = report.grad_h.max(scaled_err(grad[k], num));

        model.grad_h(&hp, y, a, &mut gp);
        model.grad_h(&hm, y, a, &mut gm);
        for m in 0..l {
            let num = (gp[m] - gm[m]) / (2.0 * step);
            report.hess_h = report.hess_h.max(scaled_err(hess[m * l + k], num));
        }
        hp[k] = h[k];
        hm[k] = h[k];
    }

    let mut ap = a.to_vec();
    let mut am = a.to_vec();
    for k in 0..lp {
        ap[k] = a[k] + step;
        am[k] = a[k] - step;
        let num = (model.psi(h, y, &ap) - model.psi(h, y, &am)) / (2.0 * step);
        report.grad_a = report.grad_a.max(scaled_err(grad_a[k], num));
        ap[k] = a[k];
        am[k] = a[k];
    }

    for k in 0..l {
        for m in 0..k {
            report.hess_asymmetry = report
                .hess_asymmetry
                .max((hess[k * l + m] - hess[m * l + k]).abs());
        }
    }
    Ok(report)
}
