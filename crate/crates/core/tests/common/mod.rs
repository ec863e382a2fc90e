//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use led_core::autograd::{Tape, Var};
use led_core::rng::{domain, stream};
use led_core::{Result, Tensor};
use rand::Rng;

pub mod grad_cases;

/// Central finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Uniform tensor on `[lo, hi)` from a seeded stream.
pub fn uniform(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, domain::SYNTH, 0xF00D);
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares reverse-mode gradients of `build` with central differences at
/// up to `per_leaf` sampled coordinates of every leaf.
///
/// `build` records a scalar loss from leaf vars bound to `leaves`.
pub fn fd_check<F>(leaves: &[Tensor<f64>], per_leaf: usize, seed: u64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = stream(seed, domain::SYNTH, 0xFD);
    let mut report = FdReport { checked: 0, max_rel_err: 0.0 };
    for (li, leaf) in leaves.iter().enumerate() {
        // a leaf off the loss path has zero gradient
        let zeros = Tensor::zeros(leaf.dims());
        let analytic = grads.get(vars[li]).unwrap_or(&zeros);
        let n = leaf.len();
        let coords: Vec<usize> = if n <= per_leaf {
            (0..n).collect()
        } else {
            (0..per_leaf).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[c] += FD_STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[c] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let a = analytic.data()[c];
            // the floor lets two vanishing gradients compare equal
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
