//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Parameters
//! enter as named leaves; [`Tape::backward`] walks the recorded operations in
//! reverse and returns a [`Gradients`] map. The tape is not consumed, so
//! `backward` may be called again (each call recomputes from scratch).
//! Gradients are only computed along paths that reach a leaf registered with
//! `requires_grad = true`.

use std::collections::BTreeMap;

use crate::error::{LedError, Result};
use crate::ops::{self, Needs};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv3x3 {
        input: Var,
        weight: Var,
        bias: Var,
        pad: Option<Var>,
        cols: Vec<T>,
    },
    Conv1x1 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    TransposedConv2 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mean {
        input: Var,
    },
    L1 {
        pred: Var,
        target: Var,
    },
    FuseWeight {
        w0: Var,
        scale: Var,
        w1: Option<Var>,
    },
    FuseBias {
        w0: Var,
        shift: Var,
        b0: Var,
        b1: Option<Var>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradients (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An anonymous leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A named parameter leaf. Binding the same name twice returns the first Var.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, requires_grad: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, requires_grad);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Binds `name` to an existing var; later [`Tape::param`] calls with that name return it.
    pub fn bind_param(&mut self, name: &str, var: Var) {
        self.params.insert(name.to_string(), var);
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var, pad: Option<Var>) -> Result<Var> {
        let out = ops::conv3x3(
            self.value(input),
            self.value(weight),
            self.value(bias),
            pad.map(|p| self.value(p)),
        )?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias) || pad.is_some_and(|p| self.rg(p));
        Ok(self.push(
            out.output,
            Op::Conv3x3 {
                input,
                weight,
                bias,
                pad,
                cols: out.cols,
            },
            rg,
        ))
    }

    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::conv1x1(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Conv1x1 { input, weight, bias }, rg))
    }

    pub fn transposed_conv2(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::transposed_conv2(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::TransposedConv2 { input, weight, bias }, rg))
    }

    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let out = ops::channel_affine(self.value(input), self.value(scale), self.value(shift))?;
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        Ok(self.push(out, Op::ChannelAffine { input, scale, shift }, rg))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let out = ops::leaky_relu(self.value(input), slope);
        let rg = self.rg(input);
        self.push(out, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(LedError::shape(format!(
                "add dims mismatch {:?} vs {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.dims().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let m = v.sum() / T::from_f64(v.len() as f64);
        let rg = self.rg(input);
        self.push(Tensor::scalar(m), Op::Mean { input }, rg)
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let l = ops::l1_loss(self.value(pred), self.value(target))?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(l), Op::L1 { pred, target }, rg))
    }

    pub fn fuse_weight(&mut self, w0: Var, scale: Var, w1: Option<Var>) -> Result<Var> {
        let out = ops::fuse_weight(self.value(w0), self.value(scale), w1.map(|w| self.value(w)))?;
        let rg = self.rg(w0) || self.rg(scale) || w1.is_some_and(|w| self.rg(w));
        Ok(self.push(out, Op::FuseWeight { w0, scale, w1 }, rg))
    }

    pub fn fuse_bias(&mut self, w0: Var, shift: Var, b0: Var, b1: Option<Var>) -> Result<Var> {
        let out = ops::fuse_bias(
            self.value(w0),
            self.value(shift),
            self.value(b0),
            b1.map(|b| self.value(b)),
        )?;
        let rg = self.rg(w0) || self.rg(shift) || self.rg(b0) || b1.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::FuseBias { w0, shift, b0, b1 }, rg))
    }

    /// Gradients of the single-element `loss` w.r.t. every node on a path
    /// to a `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if matches!(node.op, Op::Leaf) {
            return Err(LedError::NoGraph(
                "backward called on a leaf; no operations were recorded".into(),
            ));
        }
        if node.value.len() != 1 {
            return Err(LedError::shape(format!(
                "backward needs a single-element loss, got dims {:?}",
                node.value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(node.value.dims().to_vec(), vec![T::one()]).unwrap());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Option<Tensor<T>>| {
            if let Some(t) = t {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3x3 {
                input,
                weight,
                bias,
                pad,
                cols,
            } => {
                let needs = Needs {
                    input: self.rg(*input),
                    weight: self.rg(*weight),
                    bias: self.rg(*bias),
                    pad: pad.is_some_and(|p| self.rg(p)),
                };
                let r = ops::conv3x3_backward(
                    self.value(*input).dims(),
                    self.value(*weight),
                    cols,
                    g,
                    needs,
                );
                acc(*input, r.input);
                acc(*weight, r.weight);
                acc(*bias, r.bias);
                if let Some(p) = pad {
                    acc(*p, r.pad);
                }
            }
            Op::Conv1x1 {
                input,
                weight,
                bias,
            } => {
                let needs = Needs {
                    input: self.rg(*input),
                    weight: self.rg(*weight),
                    bias: self.rg(*bias),
                    pad: false,
                };
                let r = ops::conv1x1_backward(self.value(*input), self.value(*weight), g, needs);
                acc(*input, r.input);
                acc(*weight, r.weight);
                acc(*bias, r.bias);
            }
            Op::TransposedConv2 {
                input,
                weight,
                bias,
            } => {
                let needs = Needs {
                    input: self.rg(*input),
                    weight: self.rg(*weight),
                    bias: self.rg(*bias),
                    pad: false,
                };
                let r = ops::transposed_conv2_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    needs,
                );
                acc(*input, r.input);
                acc(*weight, r.weight);
                acc(*bias, r.bias);
            }
            Op::ChannelAffine {
                input,
                scale,
                shift,
            } => {
                let needs = Needs {
                    input: self.rg(*input),
                    weight: self.rg(*scale),
                    bias: self.rg(*shift),
                    pad: false,
                };
                let (gi, gs, gt) =
                    ops::channel_affine_backward(self.value(*input), self.value(*scale), g, needs);
                acc(*input, gi);
                acc(*scale, gs);
                acc(*shift, gt);
            }
            Op::LeakyRelu { input, slope } => {
                acc(
                    *input,
                    Some(ops::leaky_relu_backward(self.value(*input), *slope, g)),
                );
            }
            Op::MaxPool2 { input, argmax } => {
                acc(
                    *input,
                    Some(ops::maxpool2_backward(self.value(*input).dims(), argmax, g)),
                );
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).dims()[1];
                let (ga, gb) = ops::split_channels(g, ca).expect("concat gradient split");
                if self.rg(*a) {
                    acc(*a, Some(ga));
                }
                if self.rg(*b) {
                    acc(*b, Some(gb));
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    acc(*a, Some(g.clone()));
                }
                if self.rg(*b) {
                    acc(*b, Some(g.clone()));
                }
            }
            Op::Mean { input } => {
                let x = self.value(*input);
                let v = g.data()[0] / T::from_f64(x.len() as f64);
                acc(*input, Some(Tensor::full(x.dims(), v)));
            }
            Op::L1 { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = g.data()[0];
                let base = ops::l1_loss_grad(p, t).map(|v| v * scale);
                if self.rg(*target) {
                    acc(*target, Some(base.map(|v| -v)));
                }
                if self.rg(*pred) {
                    acc(*pred, Some(base));
                }
            }
            Op::FuseWeight { w0, scale, w1 } => {
                let w0v = self.value(*w0);
                let d = w0v.dims();
                let cin = d[1];
                if self.rg(*w0) {
                    let s = self.value(*scale).data();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(idx, &gv)| gv * s[(idx / 9) % cin])
                        .collect();
                    acc(*w0, Some(Tensor::new(d.to_vec(), data).unwrap()));
                }
                if self.rg(*scale) {
                    let mut gs = vec![T::zero(); cin];
                    for (idx, (&gv, &wv)) in g.data().iter().zip(w0v.data()).enumerate() {
                        gs[(idx / 9) % cin] += gv * wv;
                    }
                    acc(*scale, Some(Tensor::new(vec![cin], gs).unwrap()));
                }
                if let Some(w1) = w1 {
                    if self.rg(*w1) {
                        acc(*w1, Some(g.clone()));
                    }
                }
            }
            Op::FuseBias { w0, shift, b0, b1 } => {
                let w0v = self.value(*w0);
                let d = w0v.dims();
                let (cout, cin) = (d[0], d[1]);
                if self.rg(*b0) {
                    acc(*b0, Some(g.clone()));
                }
                if let Some(b1) = b1 {
                    if self.rg(*b1) {
                        acc(*b1, Some(g.clone()));
                    }
                }
                if self.rg(*w0) {
                    let t = self.value(*shift).data();
                    let data = (0..w0v.len())
                        .map(|idx| g.data()[idx / (cin * 9)] * t[(idx / 9) % cin])
                        .collect();
                    acc(*w0, Some(Tensor::new(d.to_vec(), data).unwrap()));
                }
                if self.rg(*shift) {
                    let mut gt = vec![T::zero(); cin];
                    for o in 0..cout {
                        for (i, gti) in gt.iter_mut().enumerate() {
                            let taps: T = w0v.data()[(o * cin + i) * 9..(o * cin + i + 1) * 9]
                                .iter()
                                .copied()
                                .sum();
                            *gti += g.data()[o] * taps;
                        }
                    }
                    acc(*shift, Some(Tensor::new(vec![cin], gt).unwrap()));
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(t),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter, if it required one and was reached.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_leaf_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(x), Err(LedError::NoGraph(_))));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 2, 2]), true);
        let y = tape.leaky_relu(x, 0.2);
        assert!(matches!(tape.backward(y), Err(LedError::Shape(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 1, 2], 3.0), true);
        let y = tape.add(x, x).unwrap();
        let l = tape.mean(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        let s = tape.param("s", &Tensor::ones(&[2]), false);
        let t = tape.param("t", &Tensor::zeros(&[2]), true);
        let y = tape.channel_affine(x, s, t).unwrap();
        let l = tape.mean(y);
        let g = tape.backward(l).unwrap();
        assert!(g.param("s").is_none());
        assert!(g.param("t").is_some());
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64 - 1.5), true);
        let y = tape.leaky_relu(x, 0.2);
        let l = tape.mean(y);
        let a = tape.backward(l).unwrap().get(x).unwrap().clone();
        let b = tape.backward(l).unwrap().get(x).unwrap().clone();
        assert_eq!(a, b);
    }
}
