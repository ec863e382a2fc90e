//! Pre-training over virtual cameras, two-phase few-shot fine-tuning, the
//! synthetic target-camera fixture and inference.
//!
//! Every random draw comes from a counter-based stream keyed by
//! `(seed, domain, iteration or item)`, so batches can be synthesized in
//! parallel and runs are bit-reproducible.

use std::f64::consts::PI;

use rand::Rng;

use crate::autograd::Tape;
use crate::camera::{sample_noise_instance, CameraParams};
use crate::error::{LedError, Result};
use crate::network::{LedNetwork, Transition};
use crate::noise::{synthesize_noisy, synthesize_noisy_adu, NoiseInstance, SensorLevels};
use crate::optim::{adam_step, AdamState};
use crate::par;
use crate::raw::{pack_bayer, BayerFrame};
use crate::repnr::{CsaInit, Execution, Phase};
use crate::rng::{domain, hash_unit, stream};
use crate::tensor::{Scalar, Tensor};

/// Digital gains used when none are configured.
pub const DEFAULT_RATIOS: [f64; 3] = [100.0, 250.0, 300.0];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Crop side in Bayer pixels; the packed side is half of it.
    pub patch_size: usize,
    pub lr_initial: f64,
    /// `(fraction of iterations, rate)` steps, fractions strictly increasing in (0, 1].
    pub lr_schedule: Vec<(f64, f64)>,
    pub ratios: Vec<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale pre-training: halve at 50%, drop to a tenth at 90%.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            iterations: 257_600,
            batch_size: 1,
            patch_size: 512,
            lr_initial: 1e-4,
            lr_schedule: vec![(0.5, 5e-5), (0.9, 1e-5)],
            ratios: DEFAULT_RATIOS.to_vec(),
            seed: 0,
        }
    }

    /// Fine-tuning phase 1 (CSA^T only).
    pub fn finetune_csa_default() -> Self {
        TrainConfig {
            iterations: 1000,
            lr_initial: 1e-4,
            lr_schedule: Vec::new(),
            ..Self::pretrain_default()
        }
    }

    /// Fine-tuning phase 2 (OMNR only).
    pub fn finetune_omnr_default() -> Self {
        TrainConfig {
            iterations: 500,
            lr_initial: 1e-5,
            lr_schedule: Vec::new(),
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LedError::invalid("batch_size must be >= 1"));
        }
        let multiple = 2usize << (stages.max(1) - 1);
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(multiple) {
            return Err(LedError::invalid(format!(
                "patch_size {} must be a positive multiple of {multiple} for a {stages}-stage network",
                self.patch_size
            )));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(LedError::invalid("lr_initial must be > 0"));
        }
        let mut prev = 0.0;
        for &(f, r) in &self.lr_schedule {
            if !(f > prev && f <= 1.0) {
                return Err(LedError::invalid(
                    "lr_schedule fractions must be strictly increasing in (0, 1]",
                ));
            }
            if !(r > 0.0 && r.is_finite()) {
                return Err(LedError::invalid("lr_schedule rates must be > 0"));
            }
            prev = f;
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r >= 1.0)) {
            return Err(LedError::invalid("ratios must be non-empty and all >= 1"));
        }
        Ok(())
    }

    /// Learning rate at 0-based `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let frac = iteration as f64 / self.iterations.max(1) as f64;
        self.lr_schedule
            .iter()
            .rfind(|(f, _)| frac >= *f)
            .map_or(self.lr_initial, |&(_, r)| r)
    }
}

/// Deterministic out-of-model corruption of the fixture target camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutOfModelSpec {
    /// Half-width of the per-pixel uniform fixed pattern, ADU.
    pub fixed_pattern_amplitude: f64,
    pub banding_period: f64,
    /// Amplitude of the sinusoidal column banding, ADU.
    pub banding_amplitude: f64,
    pub seed: u64,
}

impl Default for OutOfModelSpec {
    fn default() -> Self {
        OutOfModelSpec {
            fixed_pattern_amplitude: 8.0,
            banding_period: 16.0,
            banding_amplitude: 4.0,
            seed: 0,
        }
    }
}

impl OutOfModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fixed_pattern_amplitude >= 0.0 && self.banding_amplitude >= 0.0) {
            return Err(LedError::invalid("out-of-model amplitudes must be >= 0"));
        }
        if !(self.banding_period >= 2.0) {
            return Err(LedError::invalid("banding period must be >= 2"));
        }
        Ok(())
    }

    /// The additive `[H, W]` map in ADU. It depends only on these settings, not on the frame.
    pub fn pattern_adu(&self, height: usize, width: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                let fixed = (2.0 * hash_unit(self.seed, row as u64, col as u64) - 1.0) * self.fixed_pattern_amplitude;
                let band = self.banding_amplitude * (2.0 * PI * col as f64 / self.banding_period).sin();
                out.push(fixed + band);
            }
        }
        out
    }
}

/// Synthetic normalized Bayer plane: a shaded background with random
/// rectangles, discs and sinusoidally textured patches, modulated per CFA site.
/// Shape edges ramp over about two pixels, like an optically blurred capture.
/// Values stay below [`SCENE_EXPOSURE`], the dim range of linear low-light references.
pub fn procedural_scene<T: Scalar>(height: usize, width: usize, seed: u64, index: u64) -> Tensor<T> {
    const EDGE: f64 = 2.0;
    let mut rng = stream(seed, domain::SCENE, index);
    let (hf, wf) = (height as f64, width as f64);
    let base = rng.random_range(0.05..0.35);
    let (gx, gy) = (rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25));
    let tint = |rng: &mut crate::rng::StreamRng| [rng.random_range(0.6..1.0), 1.0, rng.random_range(0.6..1.0)];
    let bg = tint(&mut rng);
    let mut rgb = vec![[0.0f64; 3]; height * width];
    for y in 0..height {
        for x in 0..width {
            let v = base + gx * (x as f64 / wf - 0.5) + gy * (y as f64 / hf - 0.5);
            rgb[y * width + x] = bg.map(|t| t * v);
        }
    }
    let shapes = rng.random_range(4..10);
    for _ in 0..shapes {
        let level = rng.random_range(0.02..0.9);
        let color = tint(&mut rng).map(|t| t * level);
        let (cx, cy) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        let (rx, ry) = (rng.random_range(0.05..0.3) * wf, rng.random_range(0.05..0.3) * hf);
        let kind = rng.random_range(0..3);
        let period = rng.random_range(8.0..24.0);
        let angle = rng.random_range(0.0..PI);
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                // signed distance to the boundary in pixels, positive inside
                let inside = match kind {
                    1 => {
                        let r = ((px / rx).powi(2) + (py / ry).powi(2)).sqrt();
                        (1.0 - r) * rx.min(ry)
                    }
                    _ => (rx - px.abs()).min(ry - py.abs()),
                };
                let alpha = (inside / EDGE + 0.5).clamp(0.0, 1.0);
                if alpha == 0.0 {
                    continue;
                }
                let texture = if kind == 2 {
                    let phase = (px * angle.cos() + py * angle.sin()) / period;
                    0.75 + 0.25 * (2.0 * PI * phase).sin()
                } else {
                    1.0
                };
                let px = &mut rgb[y * width + x];
                for (c, v) in px.iter_mut().enumerate() {
                    *v = (1.0 - alpha) * *v + alpha * color[c] * texture;
                }
            }
        }
    }
    Tensor::from_fn(&[height, width], |i| {
        let (y, x) = (i / width, i % width);
        let site = match (y % 2, x % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        };
        T::from_f64((SCENE_EXPOSURE * rgb[i][site]).clamp(0.0, 1.0))
    })
}

/// Exposure applied to procedural scenes, whose layout values reach 0.9.
pub const SCENE_EXPOSURE: f64 = 0.15;

/// `count` procedural scenes of `height x width`.
pub fn procedural_dataset<T: Scalar>(count: usize, height: usize, width: usize, seed: u64) -> Vec<Tensor<T>> {
    par::map_indices(count, |i| procedural_scene(height, width, seed, i as u64))
}

/// Crops the last two axes top-left to multiples of `multiple`.
pub fn crop_to_multiple<T: Scalar>(t: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let dims = t.dims();
    if dims.len() < 2 || multiple == 0 {
        return Err(LedError::shape("crop_to_multiple needs two spatial axes"));
    }
    let n = dims.len();
    let (h, w) = (dims[n - 2], dims[n - 1]);
    let (ch, cw) = (h - h % multiple, w - w % multiple);
    if ch == 0 || cw == 0 {
        return Err(LedError::shape(format!("{h}x{w} is smaller than {multiple}")));
    }
    if (ch, cw) == (h, w) {
        return Ok(t.clone());
    }
    crop_window(t, 0, 0, ch, cw)
}

/// `[.., top..top+h, left..left+w]` of the last two axes.
fn crop_window<T: Scalar>(t: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let dims = t.dims();
    let n = dims.len();
    let (sh, sw) = (dims[n - 2], dims[n - 1]);
    if top + h > sh || left + w > sw {
        return Err(LedError::shape(format!(
            "window {h}x{w} at ({top},{left}) exceeds {sh}x{sw}"
        )));
    }
    let lead: usize = dims[..n - 2].iter().product();
    let mut data = Vec::with_capacity(lead * h * w);
    for l in 0..lead {
        for y in 0..h {
            let row = (l * sh + top + y) * sw + left;
            data.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    let mut out_dims = dims.to_vec();
    out_dims[n - 2] = h;
    out_dims[n - 1] = w;
    Tensor::new(out_dims, data)
}

/// Random crop with even offsets, preserving the RGGB phase.
fn random_bayer_crop<T: Scalar, R: Rng + ?Sized>(plane: &Tensor<T>, patch: usize, rng: &mut R) -> Result<Tensor<T>> {
    let &[h, w] = plane.dims() else {
        return Err(LedError::shape("expected an [H, W] Bayer plane"));
    };
    if patch > h || patch > w {
        return Err(LedError::shape(format!("patch {patch} exceeds frame {h}x{w}")));
    }
    let top = 2 * rng.random_range(0..=(h - patch) / 2);
    let left = 2 * rng.random_range(0..=(w - patch) / 2);
    crop_window(plane, top, left, patch, patch)
}

fn pack<T: Scalar>(plane: Tensor<T>) -> Result<Tensor<T>> {
    Ok(pack_bayer(&BayerFrame::new(plane, SensorLevels::default())?))
}

/// `clamp(x * ratio, 0, 1)`.
pub fn amplify<T: Scalar>(x: &Tensor<T>, ratio: f64) -> Tensor<T> {
    let r = T::from_f64(ratio);
    x.map(|v| (v * r).max(T::zero()).min(T::one()))
}

/// What the training loops report after each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressEvent {
    pub stage: &'static str,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

pub type Progress<'a> = &'a mut dyn FnMut(ProgressEvent);

/// One forward/backward/Adam step; returns the loss.
fn train_step<T: Scalar>(
    net: &mut LedNetwork<T>,
    input: Tensor<T>,
    target: Tensor<T>,
    branch: Option<usize>,
    adam: &mut AdamState<T>,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let y = net.forward_on(&mut tape, x, branch, Execution::MultiBranch)?;
    let t = tape.constant(target);
    let loss_var = tape.l1_loss(y, t)?;
    let loss = tape.value(loss_var).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(LedError::Numeric(format!("loss became {loss}")));
    }
    let grads = tape.backward(loss_var)?;
    let trainable = net.trainable_names();
    let mut owned = Vec::new();
    for name in &trainable {
        if let Some(g) = grads.param(name) {
            owned.push((name.clone(), g.clone()));
        }
    }
    let mut params: Vec<(String, &mut Tensor<T>)> = net
        .named_params_mut()
        .into_iter()
        .filter(|(n, _)| owned.iter().any(|(o, _)| o == n))
        .collect();
    // both lists are in canonical (sorted) order
    let mut refs: Vec<(&str, &mut Tensor<T>)> = params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    let grads: Vec<&Tensor<T>> = owned.iter().map(|(_, g)| g).collect();
    adam_step(&mut refs, &grads, adam, lr)?;
    Ok(loss)
}

/// One synthesized training example: amplified input and clean target, packed.
fn pretrain_item<T: Scalar>(
    clean: &[Tensor<T>],
    camera: &CameraParams,
    cfg: &TrainConfig,
    item: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut rng = stream(cfg.seed, domain::PRETRAIN_ITEM, item);
    let frame = &clean[rng.random_range(0..clean.len())];
    let crop = random_bayer_crop(frame, cfg.patch_size, &mut rng)?;
    let ratio = cfg.ratios[rng.random_range(0..cfg.ratios.len())];
    let inst = sample_noise_instance(camera, ratio, &mut rng)?;
    let noisy = synthesize_noisy(&crop, &inst, &SensorLevels::default(), &mut rng)?;
    Ok((amplify(&pack(noisy)?, ratio), pack(crop)?))
}

fn stack_batch<T: Scalar>(items: Vec<Result<(Tensor<T>, Tensor<T>)>>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (inputs, targets): (Vec<_>, Vec<_>) = items.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
}

fn check_clean_set<T: Scalar>(clean: &[Tensor<T>], patch: usize) -> Result<()> {
    if clean.is_empty() {
        return Err(LedError::invalid("clean dataset is empty"));
    }
    for f in clean {
        match f.dims() {
            &[h, w] if h >= patch && w >= patch && h % 2 == 0 && w % 2 == 0 => {}
            d => {
                return Err(LedError::shape(format!(
                    "clean frame {d:?} cannot hold an even {patch}x{patch} crop"
                )))
            }
        }
    }
    Ok(())
}

/// Pre-trains `net` with one CSA branch per virtual camera. Returns the loss trace.
pub fn pretrain<T: Scalar>(
    net: &mut LedNetwork<T>,
    cameras: &[CameraParams],
    clean: &[Tensor<T>],
    cfg: &TrainConfig,
    progress: Progress<'_>,
) -> Result<Vec<f64>> {
    if net.phase() != Phase::Pretrain || net.is_frozen() {
        return Err(LedError::Phase(format!(
            "pretrain needs a trainable pretrain-phase network, got {}",
            net.phase().as_str()
        )));
    }
    if cameras.len() != net.m() {
        return Err(LedError::invalid(format!(
            "network has {} CSA branches but {} cameras were given",
            net.m(),
            cameras.len()
        )));
    }
    for c in cameras {
        c.validate()?;
    }
    cfg.validate(net.config().stages)?;
    check_clean_set(clean, cfg.patch_size)?;
    let mut adam = AdamState::default();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let k = stream(cfg.seed, domain::PRETRAIN_STEP, it as u64).random_range(0..cameras.len());
        let base = (it * cfg.batch_size) as u64;
        let items = par::map_indices(cfg.batch_size, |b| pretrain_item(clean, &cameras[k], cfg, base + b as u64));
        let (input, target) = stack_batch(items)?;
        let lr = cfg.lr_at(it);
        let loss = train_step(net, input, target, Some(k), &mut adam, lr)
            .map_err(|e| tag_iteration(e, "pretrain", it))?;
        progress(ProgressEvent {
            stage: "pretrain",
            iteration: it,
            lr,
            loss,
        });
        trace.push(loss);
    }
    Ok(trace)
}

fn tag_iteration(e: LedError, stage: &str, it: usize) -> LedError {
    match e {
        LedError::Numeric(m) => LedError::Numeric(format!("{stage} iteration {it}: {m}")),
        other => other,
    }
}

/// A normalized noisy/clean Bayer pair. `instance` is known only for synthesized pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotPair<T> {
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
    pub ratio: f64,
    pub instance: Option<NoiseInstance>,
}

/// Synthesizes `pairs_per_ratio` pairs per ratio on the target camera, adding
/// the out-of-model map in ADU. Pair `j` uses clean frame `j`.
pub fn make_target_dataset<T: Scalar>(
    base_clean: &[Tensor<T>],
    target: &CameraParams,
    oom: &OutOfModelSpec,
    ratios: &[f64],
    pairs_per_ratio: usize,
    seed: u64,
) -> Result<Vec<FewShotPair<T>>> {
    target.validate()?;
    oom.validate()?;
    if ratios.is_empty() || pairs_per_ratio == 0 {
        return Err(LedError::invalid("need at least one ratio and one pair per ratio"));
    }
    let total = ratios.len() * pairs_per_ratio;
    if base_clean.len() < total {
        return Err(LedError::invalid(format!(
            "need {total} clean frames, got {}",
            base_clean.len()
        )));
    }
    let levels = SensorLevels::default();
    let range = levels.range();
    let pairs = par::map_indices(total, |j| -> Result<FewShotPair<T>> {
        let clean = &base_clean[j];
        let &[h, w] = clean.dims() else {
            return Err(LedError::shape("clean frames must be [H, W] planes"));
        };
        let ratio = ratios[j / pairs_per_ratio];
        let mut rng = stream(seed, domain::TARGET_PAIR, j as u64);
        let inst = sample_noise_instance(target, ratio, &mut rng)?;
        let adu = synthesize_noisy_adu(clean, &inst, &levels, &mut rng)?;
        let pattern = oom.pattern_adu(h, w);
        let noisy = adu.iter().zip(&pattern).map(|(a, p)| (a + p) / range).collect::<Vec<_>>();
        Ok(FewShotPair {
            noisy: Tensor::from_f64_slice(&[h, w], &noisy)?,
            clean: clean.clone(),
            ratio,
            instance: Some(inst),
        })
    });
    pairs.into_iter().collect()
}

/// One fine-tuning example: a crop of a pair sampled with replacement.
fn finetune_item<T: Scalar>(pairs: &[FewShotPair<T>], cfg: &TrainConfig, item: u64, stage: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut rng = stream(cfg.seed ^ stage.rotate_left(32), domain::FINETUNE_STEP, item);
    let p = &pairs[rng.random_range(0..pairs.len())];
    let &[h, w] = p.clean.dims() else {
        return Err(LedError::shape("few-shot pairs must be [H, W] planes"));
    };
    if cfg.patch_size > h || cfg.patch_size > w {
        return Err(LedError::shape(format!("patch {} exceeds pair {h}x{w}", cfg.patch_size)));
    }
    let top = 2 * rng.random_range(0..=(h - cfg.patch_size) / 2);
    let left = 2 * rng.random_range(0..=(w - cfg.patch_size) / 2);
    let noisy = crop_window(&p.noisy, top, left, cfg.patch_size, cfg.patch_size)?;
    let clean = crop_window(&p.clean, top, left, cfg.patch_size, cfg.patch_size)?;
    Ok((amplify(&pack(noisy)?, p.ratio), pack(clean)?))
}

fn finetune_loop<T: Scalar>(
    net: &mut LedNetwork<T>,
    pairs: &[FewShotPair<T>],
    cfg: &TrainConfig,
    stage: &'static str,
    stage_key: u64,
    progress: Progress<'_>,
) -> Result<Vec<f64>> {
    cfg.validate(net.config().stages)?;
    let mut adam = AdamState::default();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let base = (it * cfg.batch_size) as u64;
        let items = par::map_indices(cfg.batch_size, |b| finetune_item(pairs, cfg, base + b as u64, stage_key));
        let (input, target) = stack_batch(items)?;
        let lr = cfg.lr_at(it);
        let loss = train_step(net, input, target, None, &mut adam, lr).map_err(|e| tag_iteration(e, stage, it))?;
        progress(ProgressEvent {
            stage,
            iteration: it,
            lr,
            loss,
        });
        trace.push(loss);
    }
    Ok(trace)
}

fn check_pairs<T: Scalar>(pairs: &[FewShotPair<T>]) -> Result<()> {
    if pairs.is_empty() {
        return Err(LedError::invalid("few-shot set is empty"));
    }
    Ok(())
}

/// Phase 1: freezes every convolution, collapses the CSAs with `init` and
/// trains CSA^T only.
pub fn finetune_csa<T: Scalar>(
    net: &mut LedNetwork<T>,
    pairs: &[FewShotPair<T>],
    cfg: &TrainConfig,
    init: CsaInit,
    progress: Progress<'_>,
) -> Result<Vec<f64>> {
    check_pairs(pairs)?;
    if net.phase() != Phase::Pretrain {
        return Err(LedError::Phase(format!(
            "fine-tuning starts from a pre-trained network, got {}",
            net.phase().as_str()
        )));
    }
    cfg.validate(net.config().stages)?;
    net.set_phase(Transition::ToFinetuneCsa(init))?;
    finetune_loop(net, pairs, cfg, "finetune_csa", 1, progress)
}

/// Phase 2: freezes CSA^T, adds zero OMNR branches and trains them only.
pub fn finetune_omnr<T: Scalar>(
    net: &mut LedNetwork<T>,
    pairs: &[FewShotPair<T>],
    cfg: &TrainConfig,
    progress: Progress<'_>,
) -> Result<Vec<f64>> {
    check_pairs(pairs)?;
    if net.phase() != Phase::FinetuneCsa {
        return Err(LedError::Phase(format!(
            "OMNR training follows CSA^T training, got {}",
            net.phase().as_str()
        )));
    }
    cfg.validate(net.config().stages)?;
    net.set_phase(Transition::ToFinetuneOmnr)?;
    finetune_loop(net, pairs, cfg, "finetune_omnr", 2, progress)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneTrace {
    pub csa: Vec<f64>,
    pub omnr: Vec<f64>,
}

/// Both fine-tuning phases in order.
pub fn finetune<T: Scalar>(
    net: &mut LedNetwork<T>,
    pairs: &[FewShotPair<T>],
    phase1: &TrainConfig,
    phase2: &TrainConfig,
    init: CsaInit,
    progress: Progress<'_>,
) -> Result<FinetuneTrace> {
    check_pairs(pairs)?;
    phase2.validate(net.config().stages)?;
    let csa = finetune_csa(net, pairs, phase1, init, progress)?;
    let omnr = finetune_omnr(net, pairs, phase2, progress)?;
    Ok(FinetuneTrace { csa, omnr })
}

/// `clamp(net(clamp(noisy * ratio, 0, 1)), 0, 1)` on packed `[4,h,w]` or `[N,4,h,w]` input.
pub fn denoise<T: Scalar>(net: &LedNetwork<T>, noisy_packed: &Tensor<T>, ratio: f64) -> Result<Tensor<T>> {
    denoise_branch(net, noisy_packed, ratio, None)
}

/// [`denoise`] through CSA branch `branch` of a pre-training network.
pub fn denoise_branch<T: Scalar>(
    net: &LedNetwork<T>,
    noisy_packed: &Tensor<T>,
    ratio: f64,
    branch: Option<usize>,
) -> Result<Tensor<T>> {
    if !(ratio >= 1.0) {
        return Err(LedError::invalid(format!("ratio must be >= 1, got {ratio}")));
    }
    let single = noisy_packed.ndim() == 3;
    let input = if single {
        let mut d = vec![1];
        d.extend_from_slice(noisy_packed.dims());
        amplify(noisy_packed, ratio).reshape(&d)?
    } else {
        amplify(noisy_packed, ratio)
    };
    let out = net.forward(&input, branch)?;
    let out = out.map(|v| v.max(T::zero()).min(T::one()));
    if single {
        out.squeeze_leading()
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig {
            iterations: 100,
            ..TrainConfig::pretrain_default()
        };
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(49), 1e-4);
        assert_eq!(cfg.lr_at(50), 5e-5);
        assert_eq!(cfg.lr_at(95), 1e-5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig {
            patch_size: 64,
            ..TrainConfig::pretrain_default()
        };
        cfg.validate(5).unwrap();
        cfg.patch_size = 48;
        assert!(cfg.validate(5).is_err());
        cfg.patch_size = 64;
        cfg.lr_schedule = vec![(0.5, 1e-5), (0.5, 1e-6)];
        assert!(cfg.validate(5).is_err());
        cfg.lr_schedule.clear();
        cfg.ratios = vec![0.5];
        assert!(cfg.validate(5).is_err());
    }

    #[test]
    fn default_finetune_budget() {
        let total = TrainConfig::finetune_csa_default().iterations + TrainConfig::finetune_omnr_default().iterations;
        assert_eq!(total, 1500);
        assert_eq!(TrainConfig::finetune_omnr_default().lr_initial, 1e-5);
    }

    #[test]
    fn scenes_are_seeded_and_in_range() {
        let a = procedural_scene::<f32>(32, 32, 3, 7);
        assert_eq!(a, procedural_scene::<f32>(32, 32, 3, 7));
        assert_ne!(a, procedural_scene::<f32>(32, 32, 3, 8));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_to_multiple_keeps_top_left() {
        let t = Tensor::<f64>::from_fn(&[1, 5, 6], |i| i as f64);
        let c = crop_to_multiple(&t, 4).unwrap();
        assert_eq!(c.dims(), &[1, 4, 4]);
        assert_eq!(&c.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(c.data()[4], 6.0);
    }

    #[test]
    fn oom_pattern_is_a_sensor_property() {
        let oom = OutOfModelSpec::default();
        assert_eq!(oom.pattern_adu(4, 8), oom.pattern_adu(4, 8));
        let zero = OutOfModelSpec {
            fixed_pattern_amplitude: 0.0,
            banding_amplitude: 0.0,
            ..oom
        };
        assert!(zero.pattern_adu(4, 8).iter().all(|v| *v == 0.0));
        assert!(OutOfModelSpec { banding_period: 1.0, ..oom }.validate().is_err());
    }
}
