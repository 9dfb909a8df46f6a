use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Gradient checker configuration.
///
/// Per-coordinate relative error is `|a - n| / max(|a|, |n|, floor)`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
    /// Restricts the check to these flat coordinates; `None` checks all.
    pub coords: Option<Vec<usize>>,
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheck { eps, tol, floor: 1e-6, coords: None }
    }

    pub fn with_coords(mut self, coords: Vec<usize>) -> Self {
        self.coords = Some(coords);
        self
    }

    pub fn run<F>(&self, f: F, x: &Tensor<f64>) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
    {
        if !(1e-7..=1e-4).contains(&self.eps) {
            return Err(Error::InvalidArgument(format!("grad_check eps {} outside [1e-7, 1e-4]", self.eps)));
        }
        let analytic = {
            let tape = Tape::new();
            let xv = tape.variable(x.clone());
            let y = f(&tape, xv)?;
            let grads = tape.backward(y)?;
            grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()])
        };
        let eval = |t: Tensor<f64>| -> Result<f64> {
            let tape = Tape::new();
            let xv = tape.constant(t);
            let y = f(&tape, xv)?;
            let v = y.item();
            Ok(v)
        };
        let coords: Vec<usize> = match &self.coords {
            Some(c) => c.clone(),
            None => (0..x.numel()).collect(),
        };
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            checked: coords.len(),
            tol: self.tol,
            passed: true,
        };
        for &i in &coords {
            let mut plus = x.clone();
            plus.data_mut()[i] += self.eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= self.eps;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * self.eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "grad_check finite difference" });
            }
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(self.floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = i;
            }
        }
        report.passed = report.max_rel_err <= self.tol;
        Ok(report)
    }
}

/// Compares tape gradients of scalar `f` at `x` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    GradCheck::new(eps, tol).run(f, x)
}
