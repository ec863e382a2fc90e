//! The RepNR block and its exact fusion into a plain 3x3 convolution.
//!
//! A block applies a camera-specific channel affine (CSA) to its input and
//! feeds the result to a shared 3x3 convolution. The padding ring of that
//! convolution carries the CSA shift, i.e. the affine acts on the zero-padded
//! input, which makes the fused convolution reproduce the block exactly at
//! every pixel including borders. During the second fine-tuning phase a
//! parallel, zero-initialized 3x3 convolution (OMNR) is added on the raw
//! input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{LedError, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Training phase of a block or a whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    FinetuneCsa,
    FinetuneOmnr,
    Deployed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::FinetuneCsa => "finetune_csa",
            Phase::FinetuneOmnr => "finetune_omnr",
            Phase::Deployed => "deployed",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = LedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune_csa" => Ok(Phase::FinetuneCsa),
            "finetune_omnr" => Ok(Phase::FinetuneOmnr),
            "deployed" => Ok(Phase::Deployed),
            other => Err(LedError::Format(format!("unknown phase {other:?}"))),
        }
    }
}

/// How the target-camera CSA is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsaInit {
    /// Arithmetic mean of the pre-trained branches.
    Average,
    /// Scale 1, shift 0.
    Unit,
}

impl std::str::FromStr for CsaInit {
    type Err = LedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(CsaInit::Average),
            "unit" => Ok(CsaInit::Unit),
            other => Err(LedError::invalid(format!("unknown CSA init mode {other:?}"))),
        }
    }
}

/// Forward strategy for RepNR blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Affine, shared convolution and OMNR evaluated separately.
    #[default]
    MultiBranch,
    /// Weights fused on the tape first (online reparameterization).
    Reparameterized,
}

/// Per-input-channel affine `scale * x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaBranch<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> CsaBranch<T> {
    pub fn unit(channels: usize) -> Self {
        CsaBranch {
            scale: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
        }
    }
}

/// A plain 3x3 convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainConv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> PlainConv<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::conv3x3(x, &self.weight, &self.bias, None)?.output)
    }

    pub fn forward_on(&self, tape: &mut Tape<T>, x: Var, prefix: &str, trainable: bool) -> Result<Var> {
        let w = tape.param(&format!("{prefix}.conv.weight"), &self.weight, trainable);
        let b = tape.param(&format!("{prefix}.conv.bias"), &self.bias, trainable);
        tape.conv3x3(x, w, b, None)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Uniform fan-in scaled initialization, bound `sqrt(6 / fan_in)`.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| T::from_f64(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepNrBlock<T> {
    branches: Vec<CsaBranch<T>>,
    shared_weight: Tensor<T>,
    shared_bias: Tensor<T>,
    omnr: Option<PlainConv<T>>,
    phase: Phase,
}

impl<T: Scalar> RepNrBlock<T> {
    /// Fresh pre-training block with `m` unit CSA branches.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || cin == 0 || cout == 0 {
            return Err(LedError::invalid("RepNR block needs m, cin, cout >= 1"));
        }
        Ok(RepNrBlock {
            branches: (0..m).map(|_| CsaBranch::unit(cin)).collect(),
            shared_weight: he_uniform(&[cout, cin, 3, 3], cin * 9, rng),
            shared_bias: Tensor::zeros(&[cout]),
            omnr: None,
            phase: Phase::Pretrain,
        })
    }

    /// Assembles a block from explicit parts, checking every invariant.
    pub fn from_parts(
        branches: Vec<CsaBranch<T>>,
        shared_weight: Tensor<T>,
        shared_bias: Tensor<T>,
        omnr: Option<PlainConv<T>>,
        phase: Phase,
    ) -> Result<Self> {
        let d = shared_weight.dims();
        if d.len() != 4 || d[2] != 3 || d[3] != 3 {
            return Err(LedError::shape(format!("shared weight must be [Cout,Cin,3,3], got {d:?}")));
        }
        let (cout, cin) = (d[0], d[1]);
        if shared_bias.dims() != [cout] {
            return Err(LedError::shape("shared bias length must equal Cout"));
        }
        for b in &branches {
            if b.scale.dims() != [cin] || b.shift.dims() != [cin] {
                return Err(LedError::shape("CSA branch length must equal Cin"));
            }
        }
        if let Some(o) = &omnr {
            if o.weight.dims() != d || o.bias.dims() != [cout] {
                return Err(LedError::shape("OMNR shape must match the shared convolution"));
            }
        }
        match phase {
            Phase::Pretrain if branches.is_empty() || omnr.is_some() => {
                return Err(LedError::Phase("pretrain blocks need >= 1 branch and no OMNR".into()))
            }
            Phase::FinetuneCsa if branches.len() != 1 || omnr.is_some() => {
                return Err(LedError::Phase("finetune_csa blocks need one branch and no OMNR".into()))
            }
            Phase::FinetuneOmnr if branches.len() != 1 || omnr.is_none() => {
                return Err(LedError::Phase("finetune_omnr blocks need one branch and an OMNR".into()))
            }
            Phase::Deployed => {
                return Err(LedError::Phase("deployed blocks are plain convolutions".into()))
            }
            _ => {}
        }
        Ok(RepNrBlock {
            branches,
            shared_weight,
            shared_bias,
            omnr,
            phase,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn branches(&self) -> &[CsaBranch<T>] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [CsaBranch<T>] {
        &mut self.branches
    }

    pub fn shared_weight(&self) -> &Tensor<T> {
        &self.shared_weight
    }

    pub fn shared_bias(&self) -> &Tensor<T> {
        &self.shared_bias
    }

    pub fn omnr(&self) -> Option<&PlainConv<T>> {
        self.omnr.as_ref()
    }

    pub fn in_channels(&self) -> usize {
        self.shared_weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.shared_weight.dims()[0]
    }

    fn select_branch(&self, branch: Option<usize>) -> Result<usize> {
        if self.phase != Phase::Pretrain {
            return Ok(0);
        }
        match branch {
            None => Err(LedError::invalid(
                "pre-training blocks need a branch index to select a CSA",
            )),
            Some(k) if k >= self.branches.len() => Err(LedError::invalid(format!(
                "branch index {k} out of range for {} branches",
                self.branches.len()
            ))),
            Some(k) => Ok(k),
        }
    }

    fn csa_name(&self, prefix: &str, k: usize) -> String {
        if self.phase == Phase::Pretrain {
            format!("{prefix}.csa.{k}")
        } else {
            format!("{prefix}.csa.t")
        }
    }

    /// Names and tensors of every parameter under `prefix`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            (format!("{prefix}.conv.weight"), &self.shared_weight),
            (format!("{prefix}.conv.bias"), &self.shared_bias),
        ];
        for (k, b) in self.branches.iter().enumerate() {
            let base = self.csa_name(prefix, k);
            out.push((format!("{base}.scale"), &b.scale));
            out.push((format!("{base}.shift"), &b.shift));
        }
        if let Some(o) = &self.omnr {
            out.push((format!("{prefix}.omnr.weight"), &o.weight));
            out.push((format!("{prefix}.omnr.bias"), &o.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<String> = self.named_params(prefix).into_iter().map(|(n, _)| n).collect();
        let mut tensors: Vec<&mut Tensor<T>> = vec![&mut self.shared_weight, &mut self.shared_bias];
        for b in self.branches.iter_mut() {
            tensors.push(&mut b.scale);
            tensors.push(&mut b.shift);
        }
        if let Some(o) = self.omnr.as_mut() {
            tensors.push(&mut o.weight);
            tensors.push(&mut o.bias);
        }
        names.into_iter().zip(tensors).collect()
    }

    /// Which parameter groups train in the current phase: (shared conv, CSA, OMNR).
    fn trainable_groups(&self) -> (bool, bool, bool) {
        match self.phase {
            Phase::Pretrain => (true, true, false),
            Phase::FinetuneCsa => (false, true, false),
            Phase::FinetuneOmnr => (false, false, true),
            Phase::Deployed => (false, false, false),
        }
    }

    /// Records the block on `tape`. `frozen` disables every gradient.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        branch: Option<usize>,
        prefix: &str,
        exec: Execution,
        frozen: bool,
    ) -> Result<Var> {
        let k = self.select_branch(branch)?;
        let (tc, tcsa, tomnr) = self.trainable_groups();
        let (tc, tcsa, tomnr) = (tc && !frozen, tcsa && !frozen, tomnr && !frozen);
        let w0 = tape.param(&format!("{prefix}.conv.weight"), &self.shared_weight, tc);
        let b0 = tape.param(&format!("{prefix}.conv.bias"), &self.shared_bias, tc);
        let base = self.csa_name(prefix, k);
        let scale = tape.param(&format!("{base}.scale"), &self.branches[k].scale, tcsa);
        let shift = tape.param(&format!("{base}.shift"), &self.branches[k].shift, tcsa);
        let omnr = self.omnr.as_ref().map(|o| {
            (
                tape.param(&format!("{prefix}.omnr.weight"), &o.weight, tomnr),
                tape.param(&format!("{prefix}.omnr.bias"), &o.bias, tomnr),
            )
        });
        match exec {
            Execution::MultiBranch => {
                let a = tape.channel_affine(x, scale, shift)?;
                let y = tape.conv3x3(a, w0, b0, Some(shift))?;
                match omnr {
                    Some((w1, b1)) => {
                        let z = tape.conv3x3(x, w1, b1, None)?;
                        tape.add(y, z)
                    }
                    None => Ok(y),
                }
            }
            Execution::Reparameterized => {
                let w = tape.fuse_weight(w0, scale, omnr.map(|o| o.0))?;
                let b = tape.fuse_bias(w0, shift, b0, omnr.map(|o| o.1))?;
                tape.conv3x3(x, w, b, None)
            }
        }
    }

    /// Tape-free forward pass.
    pub fn forward(&self, x: &Tensor<T>, branch: Option<usize>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward_on(&mut tape, xv, branch, "block", Execution::MultiBranch, true)?;
        Ok(tape.value(y).clone())
    }

    /// Replaces the pre-training branches with a single target-camera CSA.
    pub fn init_target_csa(&mut self, mode: CsaInit) -> Result<()> {
        if self.phase != Phase::Pretrain {
            return Err(LedError::Phase(format!(
                "target CSA can only be initialized from pretrain, block is {}",
                self.phase.as_str()
            )));
        }
        let cin = self.in_channels();
        let target = match mode {
            CsaInit::Unit => CsaBranch::unit(cin),
            CsaInit::Average => {
                let m = T::from_f64(self.branches.len() as f64);
                let mean = |pick: fn(&CsaBranch<T>) -> &Tensor<T>| {
                    Tensor::from_fn(&[cin], |i| {
                        self.branches.iter().map(|b| pick(b).data()[i]).sum::<T>() / m
                    })
                };
                CsaBranch {
                    scale: mean(|b| &b.scale),
                    shift: mean(|b| &b.shift),
                }
            }
        };
        self.branches = vec![target];
        self.phase = Phase::FinetuneCsa;
        Ok(())
    }

    /// Adds an all-zero OMNR branch; the block output is unchanged.
    pub fn add_omnr(&mut self) -> Result<()> {
        if self.phase != Phase::FinetuneCsa {
            return Err(LedError::Phase(format!(
                "OMNR can only be added in finetune_csa, block is {}",
                self.phase.as_str()
            )));
        }
        self.omnr = Some(PlainConv {
            weight: Tensor::zeros(self.shared_weight.dims()),
            bias: Tensor::zeros(&[self.out_channels()]),
        });
        self.phase = Phase::FinetuneOmnr;
        Ok(())
    }

    /// Fuses a single-branch block into one convolution.
    pub fn fuse(&self) -> Result<PlainConv<T>> {
        if self.branches.len() != 1 {
            return Err(LedError::invalid(format!(
                "block has {} branches; use fuse_branch to pick one",
                self.branches.len()
            )));
        }
        self.fuse_branch(0)
    }

    /// Fuses branch `k` (plus OMNR, if present) into one convolution.
    pub fn fuse_branch(&self, k: usize) -> Result<PlainConv<T>> {
        let b = self
            .branches
            .get(k)
            .ok_or_else(|| LedError::invalid(format!("no branch {k}")))?;
        let w1 = self.omnr.as_ref().map(|o| &o.weight);
        let b1 = self.omnr.as_ref().map(|o| &o.bias);
        Ok(PlainConv {
            weight: ops::fuse_weight(&self.shared_weight, &b.scale, w1)?,
            bias: ops::fuse_bias(&self.shared_weight, &b.shift, &self.shared_bias, b1)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    fn random_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, domain::INIT, 0);
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unit_branch_equals_plain_conv() {
        let mut rng = stream(1, domain::INIT, 0);
        let block = RepNrBlock::<f64>::new(3, 4, 2, &mut rng).unwrap();
        let x = random_tensor(&[1, 3, 5, 6], 2);
        let plain = PlainConv {
            weight: block.shared_weight().clone(),
            bias: block.shared_bias().clone(),
        };
        assert_eq!(block.forward(&x, Some(1)).unwrap(), plain.forward(&x).unwrap());
    }

    #[test]
    fn branch_index_rules() {
        let mut rng = stream(1, domain::INIT, 0);
        let block = RepNrBlock::<f64>::new(2, 2, 3, &mut rng).unwrap();
        let x = random_tensor(&[1, 2, 4, 4], 3);
        assert!(block.forward(&x, None).is_err());
        assert!(block.forward(&x, Some(3)).is_err());
        assert!(block.forward(&x, Some(2)).is_ok());
    }

    #[test]
    fn averaged_init() {
        let mut rng = stream(1, domain::INIT, 0);
        let mut block = RepNrBlock::<f64>::new(1, 1, 2, &mut rng).unwrap();
        block.branches_mut()[1] = CsaBranch {
            scale: Tensor::full(&[1], 3.0),
            shift: Tensor::full(&[1], 2.0),
        };
        let mut unit = block.clone();
        block.init_target_csa(CsaInit::Average).unwrap();
        assert_eq!(block.branches().len(), 1);
        assert_eq!(block.branches()[0].scale.data(), &[2.0]);
        assert_eq!(block.branches()[0].shift.data(), &[1.0]);
        assert_eq!(block.phase(), Phase::FinetuneCsa);
        assert!(block.init_target_csa(CsaInit::Average).is_err());
        unit.init_target_csa(CsaInit::Unit).unwrap();
        assert_eq!(unit.branches()[0], CsaBranch::unit(1));
    }

    #[test]
    fn single_branch_average_is_identity() {
        let mut rng = stream(4, domain::INIT, 0);
        let mut block = RepNrBlock::<f64>::new(3, 2, 1, &mut rng).unwrap();
        let b = CsaBranch {
            scale: random_tensor(&[3], 5),
            shift: random_tensor(&[3], 6),
        };
        block.branches_mut()[0] = b.clone();
        block.init_target_csa(CsaInit::Average).unwrap();
        assert_eq!(block.branches()[0], b);
    }

    #[test]
    fn add_omnr_phase_rules() {
        let mut rng = stream(1, domain::INIT, 0);
        let mut block = RepNrBlock::<f64>::new(2, 2, 2, &mut rng).unwrap();
        assert!(block.add_omnr().is_err());
        block.init_target_csa(CsaInit::Average).unwrap();
        block.add_omnr().unwrap();
        let o = block.omnr().unwrap();
        assert_eq!(o.weight.data().iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        assert!(block.add_omnr().is_err());
    }

    #[test]
    fn fuse_identity_and_scale() {
        let mut rng = stream(1, domain::INIT, 0);
        let mut block = RepNrBlock::<f64>::new(2, 3, 1, &mut rng).unwrap();
        let fused = block.fuse().unwrap();
        assert_eq!(&fused.weight, block.shared_weight());
        assert_eq!(&fused.bias, block.shared_bias());
        block.branches_mut()[0].scale = Tensor::full(&[2], 2.0);
        let fused = block.fuse().unwrap();
        assert_eq!(fused.weight, block.shared_weight().map(|v| 2.0 * v));
    }

    #[test]
    fn multi_branch_fuse_needs_index() {
        let mut rng = stream(1, domain::INIT, 0);
        let block = RepNrBlock::<f64>::new(2, 3, 2, &mut rng).unwrap();
        assert!(block.fuse().is_err());
        assert!(block.fuse_branch(1).is_ok());
        assert!(block.fuse_branch(2).is_err());
    }

    #[test]
    fn from_parts_checks_phase_invariants() {
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        let b = Tensor::<f64>::zeros(&[2]);
        assert!(RepNrBlock::from_parts(vec![], w.clone(), b.clone(), None, Phase::Pretrain).is_err());
        assert!(RepNrBlock::from_parts(
            vec![CsaBranch::unit(2), CsaBranch::unit(2)],
            w.clone(),
            b.clone(),
            None,
            Phase::FinetuneCsa
        )
        .is_err());
        assert!(RepNrBlock::from_parts(vec![CsaBranch::unit(3)], w, b, None, Phase::Pretrain).is_err());
    }
}
