//! Five-stage UNet assembled from RepNR blocks.
//!
//! Encoder stage `s` holds two RepNR blocks of width `base_width * 2^(s-1)`,
//! each followed by leaky-ReLU, then 2x2 max pooling (except the deepest
//! stage). Decoder stage `s` upsamples with a stride-2 transposed
//! convolution, concatenates the encoder skip and applies two more RepNR
//! blocks. A plain 1x1 convolution maps to the output channels. The network
//! predicts the clean image directly.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{LedError, Result};
use crate::repnr::{he_uniform, CsaBranch, CsaInit, Execution, Phase, PlainConv, RepNrBlock};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = LedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(LedError::invalid(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_width: usize,
    pub stages: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
    pub precision: Precision,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_width: 32,
            stages: 5,
            in_channels: 4,
            out_channels: 4,
            leaky_slope: 0.2,
            precision: Precision::Single,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(LedError::invalid("network needs at least two stages"));
        }
        if self.base_width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(LedError::invalid("channel counts must be >= 1"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(LedError::invalid("leaky slope must lie in (0,1)"));
        }
        Ok(())
    }

    /// Channel width of 1-based stage `s`.
    pub fn width(&self, s: usize) -> usize {
        self.base_width << (s - 1)
    }

    /// Spatial extents must be divisible by this factor.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.stages - 1)
    }
}

/// Phase transitions across the whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    /// Freeze all convolutions and collapse the CSA branches into CSA^T.
    ToFinetuneCsa(CsaInit),
    /// Freeze CSA^T too and add zero OMNR branches.
    ToFinetuneOmnr,
    /// Freeze every parameter.
    FreezeAll,
}

#[derive(Debug, Clone, PartialEq)]
enum ConvUnit<T> {
    RepNr(RepNrBlock<T>),
    Plain(PlainConv<T>),
}

impl<T: Scalar> ConvUnit<T> {
    fn forward_on(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        branch: Option<usize>,
        prefix: &str,
        exec: Execution,
        frozen: bool,
    ) -> Result<Var> {
        match self {
            ConvUnit::RepNr(b) => b.forward_on(tape, x, branch, prefix, exec, frozen),
            ConvUnit::Plain(p) => p.forward_on(tape, x, prefix, false),
        }
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        match self {
            ConvUnit::RepNr(b) => b.named_params(prefix),
            ConvUnit::Plain(p) => vec![
                (format!("{prefix}.conv.weight"), &p.weight),
                (format!("{prefix}.conv.bias"), &p.bias),
            ],
        }
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            ConvUnit::RepNr(b) => b.named_params_mut(prefix),
            ConvUnit::Plain(p) => vec![
                (format!("{prefix}.conv.weight"), &mut p.weight),
                (format!("{prefix}.conv.bias"), &mut p.bias),
            ],
        }
    }

    fn repnr_mut(&mut self) -> Result<&mut RepNrBlock<T>> {
        match self {
            ConvUnit::RepNr(b) => Ok(b),
            ConvUnit::Plain(_) => Err(LedError::Phase("network is already deployed".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage<T> {
    /// Transposed-convolution upsampler (decoder stages only).
    up: Option<(Tensor<T>, Tensor<T>)>,
    blocks: Vec<ConvUnit<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedNetwork<T> {
    config: NetworkConfig,
    m: usize,
    phase: Phase,
    frozen: bool,
    encoder: Vec<Stage<T>>,
    /// Decoder stages ordered from deepest (stage `stages - 1`) to stage 1.
    decoder: Vec<Stage<T>>,
    head_weight: Tensor<T>,
    head_bias: Tensor<T>,
}

fn enc_prefix(s: usize, j: usize) -> String {
    format!("enc.s{s}.b{j}")
}

fn dec_prefix(s: usize, j: usize) -> String {
    format!("dec.s{s}.b{j}")
}

impl<T: Scalar> LedNetwork<T> {
    /// Builds a pre-training network with `m` CSA branches per block.
    pub fn build<R: Rng + ?Sized>(config: NetworkConfig, m: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if m == 0 {
            return Err(LedError::invalid("need at least one CSA branch"));
        }
        let mut encoder = Vec::with_capacity(config.stages);
        for s in 1..=config.stages {
            let cin = if s == 1 { config.in_channels } else { config.width(s - 1) };
            let w = config.width(s);
            encoder.push(Stage {
                up: None,
                blocks: vec![
                    ConvUnit::RepNr(RepNrBlock::new(cin, w, m, rng)?),
                    ConvUnit::RepNr(RepNrBlock::new(w, w, m, rng)?),
                ],
            });
        }
        let mut decoder = Vec::with_capacity(config.stages - 1);
        for s in (1..config.stages).rev() {
            let (wide, w) = (config.width(s + 1), config.width(s));
            let up_w = he_uniform(&[wide, w, 2, 2], wide, rng);
            decoder.push(Stage {
                up: Some((up_w, Tensor::zeros(&[w]))),
                blocks: vec![
                    ConvUnit::RepNr(RepNrBlock::new(2 * w, w, m, rng)?),
                    ConvUnit::RepNr(RepNrBlock::new(w, w, m, rng)?),
                ],
            });
        }
        let w1 = config.width(1);
        let head_weight = he_uniform(&[config.out_channels, w1, 1, 1], w1, rng);
        Ok(LedNetwork {
            config,
            m,
            phase: Phase::Pretrain,
            frozen: false,
            encoder,
            decoder,
            head_weight,
            head_bias: Tensor::zeros(&[config.out_channels]),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Number of CSA branches used during pre-training.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let [_, c, h, w] = dims else {
            return Err(LedError::shape(format!("network input must be NCHW, got {dims:?}")));
        };
        if *c != self.config.in_channels {
            return Err(LedError::shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let f = self.config.spatial_multiple();
        if h % f != 0 || w % f != 0 {
            return Err(LedError::shape(format!(
                "spatial size {h}x{w} must be divisible by {f}"
            )));
        }
        Ok(())
    }

    /// Records the full network on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        branch: Option<usize>,
        exec: Execution,
    ) -> Result<Var> {
        self.check_input(tape.value(x).dims())?;
        if self.phase == Phase::Pretrain && branch.is_none() {
            return Err(LedError::invalid(
                "pre-training network needs a branch index",
            ));
        }
        let slope = T::from_f64(self.config.leaky_slope);
        let convs_trainable = self.phase == Phase::Pretrain && !self.frozen;
        let stages = self.config.stages;

        let mut skips = Vec::with_capacity(stages);
        let mut h = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            let s = i + 1;
            for (j, unit) in stage.blocks.iter().enumerate() {
                h = unit.forward_on(tape, h, branch, &enc_prefix(s, j + 1), exec, self.frozen)?;
                h = tape.leaky_relu(h, slope);
            }
            if s < stages {
                skips.push(h);
                h = tape.maxpool2(h)?;
            }
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            let s = stages - 1 - i;
            let (uw, ub) = stage.up.as_ref().expect("decoder stage has an upsampler");
            let uw = tape.param(&format!("dec.s{s}.up.weight"), uw, convs_trainable);
            let ub = tape.param(&format!("dec.s{s}.up.bias"), ub, convs_trainable);
            let up = tape.transposed_conv2(h, uw, ub)?;
            h = tape.concat_channels(up, skips[s - 1])?;
            for (j, unit) in stage.blocks.iter().enumerate() {
                h = unit.forward_on(tape, h, branch, &dec_prefix(s, j + 1), exec, self.frozen)?;
                h = tape.leaky_relu(h, slope);
            }
        }
        let hw = tape.param("head.weight", &self.head_weight, convs_trainable);
        let hb = tape.param("head.bias", &self.head_bias, convs_trainable);
        tape.conv1x1(h, hw, hb)
    }

    /// Tape-free inference.
    pub fn forward(&self, x: &Tensor<T>, branch: Option<usize>) -> Result<Tensor<T>> {
        self.forward_with(x, branch, Execution::MultiBranch)
    }

    pub fn forward_with(&self, x: &Tensor<T>, branch: Option<usize>, exec: Execution) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward_on(&mut tape, xv, branch, exec)?;
        Ok(tape.value(y).clone())
    }

    fn units(&self) -> impl Iterator<Item = (String, &ConvUnit<T>)> {
        let stages = self.config.stages;
        let enc = self.encoder.iter().enumerate().flat_map(|(i, st)| {
            st.blocks
                .iter()
                .enumerate()
                .map(move |(j, u)| (enc_prefix(i + 1, j + 1), u))
        });
        let dec = self.decoder.iter().enumerate().flat_map(move |(i, st)| {
            st.blocks
                .iter()
                .enumerate()
                .map(move |(j, u)| (dec_prefix(stages - 1 - i, j + 1), u))
        });
        enc.chain(dec)
    }

    fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvUnit<T>> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|st| st.blocks.iter_mut())
    }

    /// Every RepNR block with its canonical prefix (empty once deployed).
    pub fn repnr_blocks(&self) -> Vec<(String, &RepNrBlock<T>)> {
        self.units()
            .filter_map(|(p, u)| match u {
                ConvUnit::RepNr(b) => Some((p, b)),
                ConvUnit::Plain(_) => None,
            })
            .collect()
    }

    /// All parameters by canonical dotted name, sorted by name.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let stages = self.config.stages;
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        for (p, u) in self.units() {
            out.extend(u.named_params(&p));
        }
        for (i, st) in self.decoder.iter().enumerate() {
            let s = stages - 1 - i;
            let (w, b) = st.up.as_ref().unwrap();
            out.push((format!("dec.s{s}.up.weight"), w));
            out.push((format!("dec.s{s}.up.bias"), b));
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let stages = self.config.stages;
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, st) in self.encoder.iter_mut().enumerate() {
            for (j, u) in st.blocks.iter_mut().enumerate() {
                out.extend(u.named_params_mut(&enc_prefix(i + 1, j + 1)));
            }
        }
        for (i, st) in self.decoder.iter_mut().enumerate() {
            let s = stages - 1 - i;
            for (j, u) in st.blocks.iter_mut().enumerate() {
                out.extend(u.named_params_mut(&dec_prefix(s, j + 1)));
            }
            let (w, b) = st.up.as_mut().unwrap();
            out.push((format!("dec.s{s}.up.weight"), w));
            out.push((format!("dec.s{s}.up.bias"), b));
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Whether the optimizer may update `name` in the current phase.
    pub fn is_trainable(&self, name: &str) -> bool {
        if self.frozen {
            return false;
        }
        match self.phase {
            Phase::Pretrain => true,
            Phase::FinetuneCsa => name.contains(".csa.t."),
            Phase::FinetuneOmnr => name.contains(".omnr."),
            Phase::Deployed => false,
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.named_params()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| self.is_trainable(n))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Applies a phase transition in the order pretrain -> finetune_csa -> finetune_omnr.
    pub fn set_phase(&mut self, transition: Transition) -> Result<()> {
        match transition {
            Transition::FreezeAll => {
                self.frozen = true;
                Ok(())
            }
            Transition::ToFinetuneCsa(mode) => {
                if self.phase != Phase::Pretrain {
                    return Err(LedError::Phase(format!(
                        "cannot enter finetune_csa from {}",
                        self.phase.as_str()
                    )));
                }
                for u in self.units_mut() {
                    u.repnr_mut()?.init_target_csa(mode)?;
                }
                self.phase = Phase::FinetuneCsa;
                Ok(())
            }
            Transition::ToFinetuneOmnr => {
                if self.phase != Phase::FinetuneCsa {
                    return Err(LedError::Phase(format!(
                        "cannot enter finetune_omnr from {}",
                        self.phase.as_str()
                    )));
                }
                for u in self.units_mut() {
                    u.repnr_mut()?.add_omnr()?;
                }
                self.phase = Phase::FinetuneOmnr;
                Ok(())
            }
        }
    }

    /// Fuses every RepNR block into a plain convolution.
    pub fn deploy(&self) -> Result<Self> {
        match self.phase {
            Phase::Pretrain => Err(LedError::Phase(
                "pre-training network needs a branch selection to deploy".into(),
            )),
            Phase::Deployed => Ok(self.clone()),
            _ => self.deploy_inner(None),
        }
    }

    /// Deploys a pre-training network through CSA branch `k`.
    pub fn deploy_branch(&self, k: usize) -> Result<Self> {
        if self.phase != Phase::Pretrain {
            return Err(LedError::Phase("deploy_branch applies to pre-training networks".into()));
        }
        if k >= self.m {
            return Err(LedError::invalid(format!("no branch {k}")));
        }
        self.deploy_inner(Some(k))
    }

    fn deploy_inner(&self, branch: Option<usize>) -> Result<Self> {
        let mut out = self.clone();
        for u in out.units_mut() {
            let fused = match u {
                ConvUnit::RepNr(b) => match branch {
                    Some(k) => b.fuse_branch(k)?,
                    None => b.fuse()?,
                },
                ConvUnit::Plain(p) => p.clone(),
            };
            *u = ConvUnit::Plain(fused);
        }
        out.phase = Phase::Deployed;
        out.frozen = true;
        Ok(out)
    }

    /// Canonical tensors and metadata for the checkpoint container.
    pub fn to_checkpoint(&self) -> (BTreeMap<String, Tensor<T>>, BTreeMap<String, String>) {
        let tensors = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let c = &self.config;
        let meta = [
            ("phase", self.phase.as_str().to_string()),
            ("m", self.m.to_string()),
            ("base_width", c.base_width.to_string()),
            ("stages", c.stages.to_string()),
            ("in_channels", c.in_channels.to_string()),
            ("out_channels", c.out_channels.to_string()),
            ("leaky_slope", format!("{:?}", c.leaky_slope)),
            ("frozen", self.frozen.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        (tensors, meta)
    }

    /// Rebuilds a network from [`LedNetwork::to_checkpoint`] output.
    pub fn from_checkpoint(
        tensors: BTreeMap<String, Tensor<T>>,
        meta: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| LedError::Format(format!("checkpoint metadata lacks {k:?}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| LedError::Format(format!("metadata {k} is not an integer")))
        };
        let phase: Phase = get("phase")?.parse()?;
        let m = parse_usize("m")?;
        let config = NetworkConfig {
            base_width: parse_usize("base_width")?,
            stages: parse_usize("stages")?,
            in_channels: meta.get("in_channels").map_or(Ok(4), |_| parse_usize("in_channels"))?,
            out_channels: meta.get("out_channels").map_or(Ok(4), |_| parse_usize("out_channels"))?,
            leaky_slope: match meta.get("leaky_slope") {
                Some(v) => v
                    .parse()
                    .map_err(|_| LedError::Format("metadata leaky_slope is not a number".into()))?,
                None => 0.2,
            },
            precision: match T::DTYPE {
                crate::tensor::DType::F32 => Precision::Single,
                crate::tensor::DType::F64 => Precision::Double,
            },
        };
        config.validate().map_err(|e| LedError::Format(e.to_string()))?;
        let frozen = meta.get("frozen").is_some_and(|v| v == "true");

        let mut pool = tensors;
        let mut take = |name: String| {
            pool.remove(&name)
                .ok_or_else(|| LedError::Format(format!("checkpoint lacks tensor {name}")))
        };
        let mut load_unit = |prefix: String| -> Result<ConvUnit<T>> {
            let weight = take(format!("{prefix}.conv.weight"))?;
            let bias = take(format!("{prefix}.conv.bias"))?;
            let branch = |take: &mut dyn FnMut(String) -> Result<Tensor<T>>, base: String| -> Result<CsaBranch<T>> {
                Ok(CsaBranch {
                    scale: take(format!("{base}.scale"))?,
                    shift: take(format!("{base}.shift"))?,
                })
            };
            let unit = match phase {
                Phase::Deployed => ConvUnit::Plain(PlainConv { weight, bias }),
                Phase::Pretrain => {
                    let branches = (0..m)
                        .map(|k| branch(&mut take, format!("{prefix}.csa.{k}")))
                        .collect::<Result<Vec<_>>>()?;
                    ConvUnit::RepNr(RepNrBlock::from_parts(branches, weight, bias, None, phase)?)
                }
                Phase::FinetuneCsa | Phase::FinetuneOmnr => {
                    let b = branch(&mut take, format!("{prefix}.csa.t"))?;
                    let omnr = if phase == Phase::FinetuneOmnr {
                        Some(PlainConv {
                            weight: take(format!("{prefix}.omnr.weight"))?,
                            bias: take(format!("{prefix}.omnr.bias"))?,
                        })
                    } else {
                        None
                    };
                    ConvUnit::RepNr(RepNrBlock::from_parts(vec![b], weight, bias, omnr, phase)?)
                }
            };
            Ok(unit)
        };
        let stages = config.stages;
        let mut encoder = Vec::new();
        for s in 1..=stages {
            let blocks = vec![load_unit(enc_prefix(s, 1))?, load_unit(enc_prefix(s, 2))?];
            encoder.push(Stage { up: None, blocks });
        }
        let mut decoder = Vec::new();
        for s in (1..stages).rev() {
            let blocks = vec![load_unit(dec_prefix(s, 1))?, load_unit(dec_prefix(s, 2))?];
            decoder.push(Stage { up: None, blocks });
        }
        for (i, st) in decoder.iter_mut().enumerate() {
            let s = stages - 1 - i;
            st.up = Some((take(format!("dec.s{s}.up.weight"))?, take(format!("dec.s{s}.up.bias"))?));
        }
        let head_weight = take("head.weight".into())?;
        let head_bias = take("head.bias".into())?;
        if let Some(extra) = pool.keys().next() {
            return Err(LedError::Format(format!("unexpected tensor {extra} in checkpoint")));
        }
        let net = LedNetwork {
            config,
            m,
            phase,
            frozen,
            encoder,
            decoder,
            head_weight,
            head_bias,
        };
        net.check_shapes()?;
        Ok(net)
    }

    /// Verifies the channel plumbing of every layer.
    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let expect = |name: &str, got: &[usize], want: &[usize]| {
            if got != want {
                Err(LedError::Format(format!("{name} has dims {got:?}, expected {want:?}")))
            } else {
                Ok(())
            }
        };
        for (p, t) in self.named_params() {
            let dims = t.dims().to_vec();
            let (s, j) = match parse_stage(&p) {
                Some(v) => v,
                None => continue,
            };
            let w = c.width(s);
            let cin = if p.starts_with("enc") {
                if j == 1 {
                    if s == 1 { c.in_channels } else { c.width(s - 1) }
                } else {
                    w
                }
            } else if j == 1 {
                2 * w
            } else {
                w
            };
            if p.ends_with("conv.weight") || p.ends_with("omnr.weight") {
                expect(&p, &dims, &[w, cin, 3, 3])?;
            } else if p.ends_with("conv.bias") || p.ends_with("omnr.bias") {
                expect(&p, &dims, &[w])?;
            } else if p.ends_with(".scale") || p.ends_with(".shift") {
                expect(&p, &dims, &[cin])?;
            }
        }
        for (i, st) in self.decoder.iter().enumerate() {
            let s = c.stages - 1 - i;
            let (uw, ub) = st.up.as_ref().unwrap();
            expect("up.weight", uw.dims(), &[c.width(s + 1), c.width(s), 2, 2])?;
            expect("up.bias", ub.dims(), &[c.width(s)])?;
        }
        expect("head.weight", self.head_weight.dims(), &[c.out_channels, c.width(1), 1, 1])?;
        expect("head.bias", self.head_bias.dims(), &[c.out_channels])?;
        Ok(())
    }
}

/// `enc.s3.b2.conv.weight` -> (3, 2).
fn parse_stage(name: &str) -> Option<(usize, usize)> {
    let mut parts = name.split('.');
    let side = parts.next()?;
    if side != "enc" && side != "dec" {
        return None;
    }
    let s = parts.next()?.strip_prefix('s')?.parse().ok()?;
    let j = parts.next()?.strip_prefix('b')?.parse().ok()?;
    Some((s, j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    fn small(stages: usize) -> NetworkConfig {
        NetworkConfig {
            base_width: 2,
            stages,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn shape_contract() {
        let net = LedNetwork::<f32>::build(small(3), 2, &mut stream(0, domain::INIT, 0)).unwrap();
        let x = Tensor::<f32>::full(&[1, 4, 8, 12], 0.3);
        let y = net.forward(&x, Some(0)).unwrap();
        assert_eq!(y.dims(), &[1, 4, 8, 12]);
        assert!(y.is_finite());
        let bad = Tensor::<f32>::full(&[1, 4, 6, 8], 0.3);
        assert!(matches!(net.forward(&bad, Some(0)), Err(LedError::Shape(_))));
        assert!(net.forward(&x, None).is_err());
    }

    #[test]
    fn builds_are_seeded() {
        let a = LedNetwork::<f32>::build(small(3), 2, &mut stream(5, domain::INIT, 0)).unwrap();
        let b = LedNetwork::<f32>::build(small(3), 2, &mut stream(5, domain::INIT, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn illegal_transitions() {
        let mut net = LedNetwork::<f64>::build(small(2), 2, &mut stream(0, domain::INIT, 0)).unwrap();
        assert!(net.set_phase(Transition::ToFinetuneOmnr).is_err());
        net.set_phase(Transition::ToFinetuneCsa(CsaInit::Average)).unwrap();
        assert!(net.set_phase(Transition::ToFinetuneCsa(CsaInit::Average)).is_err());
        net.set_phase(Transition::ToFinetuneOmnr).unwrap();
        assert!(net.set_phase(Transition::ToFinetuneOmnr).is_err());
    }

    #[test]
    fn pretrain_deploy_needs_branch() {
        let net = LedNetwork::<f64>::build(small(2), 2, &mut stream(0, domain::INIT, 0)).unwrap();
        assert!(net.deploy().is_err());
        let d = net.deploy_branch(1).unwrap();
        let x = Tensor::<f64>::full(&[1, 4, 4, 4], 0.5);
        assert!(net.forward(&x, Some(1)).unwrap().max_abs_diff(&d.forward(&x, None).unwrap()) < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_every_phase() {
        let mut net = LedNetwork::<f32>::build(small(3), 3, &mut stream(1, domain::INIT, 0)).unwrap();
        let check = |net: &LedNetwork<f32>| {
            let (t, m) = net.to_checkpoint();
            let back = LedNetwork::<f32>::from_checkpoint(t, &m).unwrap();
            assert_eq!(&back, net);
        };
        check(&net);
        net.set_phase(Transition::ToFinetuneCsa(CsaInit::Average)).unwrap();
        check(&net);
        net.set_phase(Transition::ToFinetuneOmnr).unwrap();
        check(&net);
        check(&net.deploy().unwrap());
    }

    #[test]
    fn checkpoint_rejects_missing_and_extra() {
        let net = LedNetwork::<f32>::build(small(2), 1, &mut stream(1, domain::INIT, 0)).unwrap();
        let (mut t, m) = net.to_checkpoint();
        t.insert("bogus".into(), Tensor::zeros(&[1]));
        assert!(LedNetwork::<f32>::from_checkpoint(t.clone(), &m).is_err());
        t.remove("bogus");
        t.remove("head.bias");
        assert!(LedNetwork::<f32>::from_checkpoint(t, &m).is_err());
    }

    #[test]
    fn canonical_names() {
        let net = LedNetwork::<f32>::build(small(2), 2, &mut stream(1, domain::INIT, 0)).unwrap();
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        for want in [
            "enc.s1.b1.conv.weight",
            "enc.s1.b1.csa.1.scale",
            "enc.s2.b2.csa.0.shift",
            "dec.s1.b2.conv.bias",
            "dec.s1.up.weight",
            "head.weight",
        ] {
            assert!(names.iter().any(|n| n == want), "missing {want}");
        }
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }
}
