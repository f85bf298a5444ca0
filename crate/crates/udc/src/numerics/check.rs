//! Central finite-difference gradient checking.
//!
//! Used throughout the test suites to validate every analytic backward pass.
//! Lives in the library (not a test helper) so integration tests can reuse
//! one definition of the comparison rule.

use super::graph::{Graph, Val};
use super::Parameter;

/// Step size for central differences; with f64 values this balances
/// truncation against round-off near the 1e-4 tolerance used in tests.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative. Near-zero
/// pairs compare absolutely so noise below round-off never dominates.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        // Both essentially zero: exact disagreement would still show up here,
        // round-off noise should not.
        if (analytic - numeric).abs() < 1e-9 {
            0.0
        } else {
            1.0
        }
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare the analytic gradients of `build`'s scalar loss against central
/// finite differences for every coordinate of every parameter in `params`.
/// Returns the maximum relative error observed.
///
/// `build` must reconstruct the loss from the parameters' *current* values
/// each call; it is invoked `2 * n_coords + 1` times.
pub fn grad_check(params: &[Parameter], build: &dyn Fn(&mut Graph) -> Val) -> f64 {
    for p in params {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let loss = build(&mut g);
    g.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.borrow().grad.data().to_vec()).collect();

    let eval = |params: &[Parameter], build: &dyn Fn(&mut Graph) -> Val| -> f64 {
        let _ = params;
        let mut g = Graph::new();
        let loss = build(&mut g);
        g.scalar(loss)
    };

    let mut max_rel: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let n = p.borrow().value.data().len();
        for ci in 0..n {
            let orig = p.borrow().value.data()[ci];
            p.borrow_mut().value.data_mut()[ci] = orig + FD_STEP;
            let up = eval(params, build);
            p.borrow_mut().value.data_mut()[ci] = orig - FD_STEP;
            let down = eval(params, build);
            p.borrow_mut().value.data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic[pi][ci], numeric));
        }
    }
    for p in params {
        p.zero_grad();
    }
    max_rel
}
