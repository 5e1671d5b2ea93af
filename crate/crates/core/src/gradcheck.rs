//! Finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Comparison settings for [`check_gradients`].
///
/// The relative error of one coordinate is
/// `|tape − fd| / max(|tape|, |fd|, floor)`; `floor` keeps coordinates whose
/// true gradient is ~0 from being judged on cancellation noise alone.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-4,
            tol: 1e-6,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Checks `d f / d x` for a single input tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let settings = GradCheck {
        h,
        tol,
        ..GradCheck::default()
    };
    check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), settings)
}

/// Compares the tape gradient of scalar `f` with respect to every input
/// against five-point central differences, one coordinate at a time.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], settings: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>()
    };

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(value.item())
    };

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tol: settings.tol,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let orig = probe[ti].data()[ei];
            let h = settings.h;
            let mut at = |offset: f64| -> Result<f64> {
                probe[ti].data_mut()[ei] = orig + offset;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe[ti].data_mut()[ei] = orig;

            // Five-point stencil: truncation error O(h^4).
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = grad.data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(settings.floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, ei);
            }
            report.max_abs_error = report.max_abs_error.max(abs);
            report.checked += 1;
        }
    }
    Ok(report)
}
