//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate every analytic backward pass. The
//! numeric side re-runs the caller's forward builder with perturbed inputs,
//! so it is independent of the backward implementation it checks.

use crate::tape::{Tape, Value};
use ndarray::ArrayD;

/// Builds a graph over leaves created from `inputs` (in order) and returns
/// the leaf handles plus a scalar root.
pub type GraphBuilder<'a> = dyn Fn(&mut Tape, &[ArrayD<f64>]) -> (Vec<Value>, Value) + 'a;

fn eval(build: &GraphBuilder, inputs: &[ArrayD<f64>]) -> f64 {
    let mut tape = Tape::new();
    let (_, root) = build(&mut tape, inputs);
    tape.scalar(root)
}

/// Central finite difference of the scalar output with respect to every
/// element of every input.
pub fn numeric_grad(build: &GraphBuilder, inputs: &[ArrayD<f64>]) -> Vec<ArrayD<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = ArrayD::zeros(inputs[i].raw_dim());
        for idx in 0..inputs[i].len() {
            let base = inputs[i].as_slice().unwrap()[idx];
            let h = 1e-6 * base.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[idx] = base + h;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[idx] = base - h;
            let df = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
            gi.as_slice_mut().unwrap()[idx] = df;
        }
        grads.push(gi);
    }
    grads
}

/// Compare the analytic gradient of `build`'s root against central finite
/// differences at relative tolerance `rel_tol`. Returns a description of the
/// first violation, if any.
pub fn check_gradients(
    build: &GraphBuilder,
    inputs: &[ArrayD<f64>],
    rel_tol: f64,
) -> Result<(), String> {
    let mut tape = Tape::new();
    let (leaves, root) = build(&mut tape, inputs);
    assert_eq!(leaves.len(), inputs.len(), "builder must expose every input leaf");
    let analytic = tape.backward(root);
    let numeric = numeric_grad(build, inputs);

    for (i, (leaf, num)) in leaves.iter().zip(&numeric).enumerate() {
        let zero = ArrayD::zeros(inputs[i].raw_dim());
        let ana = analytic.get(*leaf).unwrap_or(&zero);
        for (idx, (&a, &n)) in ana.iter().zip(num.iter()).enumerate() {
            let denom = a.abs().max(n.abs()).max(1.0);
            let err = (a - n).abs() / denom;
            if !err.is_finite() || err > rel_tol {
                return Err(format!(
                    "input {i} element {idx}: analytic {a:.9e} vs numeric {n:.9e} (rel err {err:.3e} > {rel_tol:.1e})"
                ));
            }
        }
    }
    Ok(())
}
