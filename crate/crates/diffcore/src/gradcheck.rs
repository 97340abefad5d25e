//! Central finite differences as an independent oracle for the tape.

use crate::error::{DiffError, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// The numeric derivative uses the fourth-order central stencil
/// `(8[f(x+h) − f(x−h)] − [f(x+2h) − f(x−2h)]) / 12h`, so step sizes around
/// `1e-3` balance truncation against rounding in double precision.
///
/// Returns `max_k |analytic_k - numeric_k| / (|numeric_k| + 1e-8)`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`finite_difference_check`] over several inputs at once; the result is the
/// maximum relative error across every coordinate of every input.
pub fn finite_difference_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(DiffError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("eps must be positive, got {eps}"),
        });
    }
    let mut tape = Tape::strict();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    ensure_finite(tape.value(loss).item().f64())?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor<T>]| -> Result<f64> {
        let mut t = Tape::strict();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        let v = t.value(out).item().f64();
        ensure_finite(v)?;
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..inputs[which].len() {
            let orig = inputs[which].data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                probe[which].data_mut()[k] = orig + T::c(offset);
                eval(&probe)
            };
            let near = at(eps)? - at(-eps)?;
            let far = at(2.0 * eps)? - at(-2.0 * eps)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (8.0 * near - far) / (12.0 * eps);
            let err = (analytic.data()[k].f64() - numeric).abs() / (numeric.abs() + REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn ensure_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op: "finite_difference_check" })
    }
}
