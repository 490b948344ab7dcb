//! Central finite-difference checks against tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    /// `max_i |a_i − n_i| / max(|a_i|, |n_i|, REL_EPS)`.
    pub max_rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// Flat index of the element with the largest error and its two
    /// gradient values.
    pub worst: (usize, f64, f64),
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl InputReport {
    /// Largest relative error over elements where either gradient exceeds
    /// `floor`, and the largest absolute difference over the rest.
    ///
    /// Exact symmetries (a bias feeding a batch norm, say) give gradients
    /// that are analytically zero; their central differences are pure
    /// rounding noise, which no relative measure can resolve.
    pub fn split_at(&self, floor: f64) -> (f64, f64) {
        let mut rel = 0.0f64;
        let mut abs = 0.0f64;
        for (&a, &n) in self.analytic.data().iter().zip(self.numeric.data()) {
            if a.abs().max(n.abs()) > floor {
                rel = rel.max(rel_err(a, n));
            } else {
                abs = abs.max((a - n).abs());
            }
        }
        (rel, abs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// [`InputReport::split_at`] over all inputs.
    pub fn split_at(&self, floor: f64) -> (f64, f64) {
        self.inputs.iter().map(|r| r.split_at(floor)).fold((0.0, 0.0), |acc, x| {
            (acc.0.max(x.0), acc.1.max(x.1))
        })
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_EPS)
}

/// Compares tape gradients of a scalar function against
/// `(f(x+h) − f(x−h)) / 2h`, one element at a time.
///
/// `f` is rebuilt on a fresh tape for every evaluation.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value().data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check base evaluation".into()));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let v = f(&tape, &vars)?.value().data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check perturbed evaluation".into()))
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            numeric.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        let mut max_rel_err = 0.0;
        let mut worst = (0, 0.0, 0.0);
        for (i, (&a, &n)) in grad.data().iter().zip(numeric.data()).enumerate() {
            let e = rel_err(a, n);
            if e > max_rel_err {
                max_rel_err = e;
                worst = (i, a, n);
            }
        }
        reports.push(InputReport {
            max_rel_err,
            worst,
            analytic_norm: grad.norm(),
            numeric_norm: numeric.norm(),
            analytic: grad.clone(),
            numeric,
        });
    }
    Ok(GradReport { inputs: reports })
}
