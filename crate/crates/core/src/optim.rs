//! Adam without weight decay.
//!
//! Step counts are kept per parameter, so a parameter that receives no
//! gradient in some iteration (an unused CSA branch) is simply not stepped.

use std::collections::BTreeMap;

use crate::error::{LedError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: BTreeMap<String, Tensor<T>>,
    second_moment: BTreeMap<String, Tensor<T>>,
    steps: BTreeMap<String, u64>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8).unwrap()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
            return Err(LedError::invalid(format!(
                "adam needs 0 <= beta < 1 and epsilon > 0 (got {beta1}, {beta2}, {epsilon})"
            )));
        }
        Ok(AdamState {
            beta1,
            beta2,
            epsilon,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            steps: BTreeMap::new(),
        })
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first_moment.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.second_moment.get(name)
    }

    /// Number of updates applied to `name` so far.
    pub fn steps(&self, name: &str) -> u64 {
        self.steps.get(name).copied().unwrap_or(0)
    }
}

/// One bias-corrected Adam update over named parameters.
///
/// `params` and `grads` are paired by position. Moments are created lazily
/// (zero) the first time a name is seen and must keep the same dims.
pub fn adam_step<T: Scalar>(
    params: &mut [(&str, &mut Tensor<T>)],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(LedError::shape(format!(
            "adam_step got {} params and {} grads",
            params.len(),
            grads.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.dims() != g.dims() {
            return Err(LedError::shape(format!(
                "adam_step: gradient dims {:?} differ from parameter {name} dims {:?}",
                g.dims(),
                p.dims()
            )));
        }
        if let Some(m) = state.first_moment.get(*name) {
            if m.dims() != p.dims() {
                return Err(LedError::shape(format!(
                    "adam_step: moment dims for {name} changed"
                )));
            }
        }
    }
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for ((name, p), g) in params.iter_mut().zip(grads) {
        let t = state.steps.entry(name.to_string()).or_insert(0);
        *t += 1;
        let bc1 = 1.0 - b1.powi(*t as i32);
        let bc2 = 1.0 - b2.powi(*t as i32);
        let m = state
            .first_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.dims()));
        let v = state
            .second_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.dims()));
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gf = gv.as_f64();
            let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
            *mv = T::from_f64(mf);
            *vv = T::from_f64(vf);
            let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + eps);
            *pv = T::from_f64(pv.as_f64() - update);
        }
    }
    Ok(())
}
