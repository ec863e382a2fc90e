//! Finite-difference cases for every differentiable operator and the toy network.

use led_core::autograd::{Tape, Var};
use led_core::network::{LedNetwork, NetworkConfig, Precision, Transition};
use led_core::repnr::{CsaInit, Execution};
use led_core::rng::{domain, stream};
use led_core::{Result, Tensor};

use super::{fd_check, uniform, FdReport};

/// Coordinates sampled per leaf.
pub const PER_LEAF: usize = 32;

/// L1 against a fixed random target keeps every loss non-trivial.
fn l1_to_target(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let dims = tape.value(y).dims().to_vec();
    let t = tape.constant(uniform(&dims, -1.0, 1.0, seed));
    tape.l1_loss(y, t)
}

fn check(leaves: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> FdReport {
    fd_check(leaves, PER_LEAF, 11, build).expect("finite-difference check ran")
}

pub fn conv3x3_with_padding_ring() -> FdReport {
    let leaves = [
        uniform(&[2, 3, 5, 6], -1.0, 1.0, 1),
        uniform(&[4, 3, 3, 3], -1.0, 1.0, 2),
        uniform(&[4], -1.0, 1.0, 3),
        uniform(&[3], -1.0, 1.0, 4),
    ];
    check(&leaves, |t, v| {
        let y = t.conv3x3(v[0], v[1], v[2], Some(v[3]))?;
        l1_to_target(t, y, 9)
    })
}

pub fn conv1x1_and_transposed() -> FdReport {
    let leaves = [
        uniform(&[2, 3, 4, 4], -1.0, 1.0, 1),
        uniform(&[5, 3, 1, 1], -1.0, 1.0, 2),
        uniform(&[5], -1.0, 1.0, 3),
        uniform(&[5, 2, 2, 2], -1.0, 1.0, 4),
        uniform(&[2], -1.0, 1.0, 5),
    ];
    check(&leaves, |t, v| {
        let y = t.conv1x1(v[0], v[1], v[2])?;
        let z = t.transposed_conv2(y, v[3], v[4])?;
        l1_to_target(t, z, 9)
    })
}

pub fn affine_leaky_pool_concat() -> FdReport {
    let leaves = [
        uniform(&[2, 3, 4, 6], -1.0, 1.0, 1),
        uniform(&[3], 0.5, 1.5, 2),
        uniform(&[3], -0.5, 0.5, 3),
        uniform(&[2, 2, 2, 3], -1.0, 1.0, 4),
    ];
    check(&leaves, |t, v| {
        let a = t.channel_affine(v[0], v[1], v[2])?;
        let r = t.leaky_relu(a, 0.2);
        let p = t.maxpool2(r)?;
        let c = t.concat_channels(p, v[3])?;
        l1_to_target(t, c, 9)
    })
}

pub fn add_and_mean() -> FdReport {
    let leaves = [uniform(&[4, 9], -1.0, 1.0, 1), uniform(&[4, 9], -1.0, 1.0, 2)];
    check(&leaves, |t, v| {
        let s = t.add(v[0], v[1])?;
        let r = t.leaky_relu(s, 0.3);
        Ok(t.mean(r))
    })
}

pub fn fusion_ops() -> FdReport {
    let leaves = [
        uniform(&[4, 3, 3, 3], -1.0, 1.0, 1),
        uniform(&[3], 0.5, 1.5, 2),
        uniform(&[4, 3, 3, 3], -1.0, 1.0, 3),
        uniform(&[3], -0.5, 0.5, 4),
        uniform(&[4], -0.5, 0.5, 5),
        uniform(&[4], -0.5, 0.5, 6),
        uniform(&[1, 3, 5, 5], -1.0, 1.0, 7),
    ];
    check(&leaves, |t, v| {
        let w = t.fuse_weight(v[0], v[1], Some(v[2]))?;
        let b = t.fuse_bias(v[0], v[3], v[4], Some(v[5]))?;
        let y = t.conv3x3(v[6], w, b, None)?;
        l1_to_target(t, y, 9)
    })
}

/// The whole toy network, with every parameter and the input as checked leaves.
fn network_loss(phase: Option<Transition>, exec: Execution) -> FdReport {
    let cfg = NetworkConfig {
        base_width: 2,
        stages: 3,
        precision: Precision::Double,
        ..NetworkConfig::default()
    };
    let mut net = LedNetwork::<f64>::build(cfg, 2, &mut stream(3, domain::INIT, 0)).unwrap();
    if let Some(p) = phase {
        net.set_phase(Transition::ToFinetuneCsa(CsaInit::Average)).unwrap();
        if p == Transition::ToFinetuneOmnr {
            net.set_phase(p).unwrap();
        }
    }
    // move CSAs and OMNR off their neutral initial values
    for (i, (_, t)) in net.named_params_mut().into_iter().enumerate() {
        let noise = uniform(t.dims(), -0.2, 0.2, 100 + i as u64);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    let mut leaves: Vec<Tensor<f64>> = net.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    leaves.push(uniform(&[1, 4, 8, 8], 0.0, 1.0, 55));
    let branch = if phase.is_none() { Some(1) } else { None };
    fd_check(&leaves, PER_LEAF, 17, |tape, vars| {
        for (name, &v) in names.iter().zip(vars) {
            tape.bind_param(name, v);
        }
        let y = net.forward_on(tape, vars[names.len()], branch, exec)?;
        l1_to_target(tape, y, 9)
    })
    .expect("finite-difference check ran")
}

pub fn network_pretrain() -> FdReport {
    network_loss(None, Execution::MultiBranch)
}

pub fn network_finetune_omnr_reparameterized() -> FdReport {
    network_loss(Some(Transition::ToFinetuneOmnr), Execution::Reparameterized)
}

pub type GradCase = fn() -> FdReport;

/// Every case by name.
pub fn all() -> Vec<(&'static str, GradCase)> {
    vec![
        ("conv3x3", conv3x3_with_padding_ring),
        ("conv1x1+tconv", conv1x1_and_transposed),
        ("affine+leaky+pool+concat", affine_leaky_pool_concat),
        ("add+mean", add_and_mean),
        ("fuse_weight+fuse_bias", fusion_ops),
        ("network pretrain", network_pretrain),
        ("network finetune_omnr fused", network_finetune_omnr_reparameterized),
    ]
}
