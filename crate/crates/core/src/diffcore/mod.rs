//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is built per evaluation: every op computes its value when it
//! is appended, and [`Graph::backward`] sweeps the node list once in reverse.
//! Elementwise binary ops broadcast only when one operand's shape is a
//! suffix of the other's (repetition over leading batch dimensions).
//! [`Graph::stop_grad`] passes a value through while cutting every gradient
//! path behind it.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let hi = f(&probe);
            probe[i] = orig - step;
            let lo = f(&probe);
            probe[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`, maximised over entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
