//! Central finite differences as an independent oracle for the tape.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Central difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is ~0 from turning rounding noise into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst mismatch.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckOutcome {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare tape gradients of `build` against central differences, for every
/// input tensor. `build` must be a pure function of its inputs.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64, floor: f64) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("leaf grad")).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    // Probe once so build errors surface as errors, not panics inside the closure.
    eval(inputs)?;

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    for (k, x) in inputs.iter().enumerate() {
        let num = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[k] = probe.clone();
                eval(&xs).expect("probe evaluation")
            },
            x,
            h,
        );
        for (i, (&a, &n)) in analytic[k].data().iter().zip(num.data()).enumerate() {
            let e = relative_error(a, n, floor);
            if e > max_rel_err || e.is_nan() {
                max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
                worst = (k, i);
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckOutcome { max_rel_err, worst, analytic, numeric })
}
