//! Subcommand bodies. Every output goes through an atomic write.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use led_core::camera::{
    fit_gain_line, generate_virtual_cameras, sample_noise_instance, select_fewshot_pairs, CameraParams,
    PairCandidate, SelectionMode,
};
use led_core::metrics::evaluate;
use led_core::network::{LedNetwork, Precision};
use led_core::noise::synthesize_noisy_adu;
use led_core::raw::{
    checkpoint_dtype, load_pair, network_from_container, pack_bayer, read_image, unpack_bayer, write_atomic,
    write_checkpoint, write_image, BayerFrame, Container, DatasetManifest, ManifestEntry,
};
use led_core::repnr::{CsaInit, Phase};
use led_core::rng::{domain, stream};
use led_core::training::{
    denoise, finetune, pretrain, procedural_scene, FewShotPair, ProgressEvent, TrainConfig,
};
use led_core::{DType, LedError, Scalar, Tensor};

use crate::config::RunConfig;
use crate::CliError;

type CliResult<T = ()> = Result<T, CliError>;

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

// ------------------------------------------------------------ cameras

pub fn gen_cameras(cfg: &RunConfig, m: usize, out: &Path) -> CliResult {
    let cams = generate_virtual_cameras(m, &cfg.space()?).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut bytes = Vec::new();
    for c in &cams {
        serde_json::to_writer(&mut bytes, c).map_err(|e| CliError::Data(e.to_string()))?;
        bytes.push(b'\n');
    }
    write_atomic(out, &bytes)?;
    eprintln!("wrote {} cameras to {}", cams.len(), out.display());
    Ok(())
}

pub fn read_cameras(path: &Path) -> CliResult<Vec<CameraParams>> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let cams = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let c: CameraParams = serde_json::from_str(l).map_err(|e| data_err(path, format!("line {}: {e}", i + 1)))?;
            c.validate().map_err(|e| data_err(path, format!("line {}: {e}", i + 1)))?;
            Ok(c)
        })
        .collect::<CliResult<Vec<_>>>()?;
    if cams.is_empty() {
        return Err(data_err(path, "no cameras"));
    }
    Ok(cams)
}

// ------------------------------------------------------------ data sets

/// Writes `count` procedural clean frames next to the manifest at `out`.
pub fn gen_scenes(count: usize, height: usize, width: usize, seed: u64, out: &Path) -> CliResult {
    if count == 0 || !height.is_multiple_of(2) || !width.is_multiple_of(2) || height == 0 || width == 0 {
        return Err(CliError::Usage("need count >= 1 and even, non-zero height and width".into()));
    }
    let dir = parent_dir(out);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let frame = procedural_scene::<f32>(height, width, seed, i as u64);
        let name = format!("scene{i:04}.ledc");
        let meta = BTreeMap::from([("scene_seed".to_string(), seed.to_string())]);
        write_image(&dir.join(&name), &frame, &meta)?;
        entries.push(ManifestEntry {
            clean_path: name.into(),
            noisy_path: None,
            ratio: 1.0,
            camera_id: "procedural".into(),
            k: None,
            scene_id: format!("scene{i:04}"),
        });
    }
    DatasetManifest { entries }.write(out)?;
    eprintln!("wrote {count} scenes to {}", dir.display());
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn read_manifest(path: &Path) -> CliResult<DatasetManifest> {
    let m = DatasetManifest::read(path).map_err(|e| data_err(path, e))?;
    if m.is_empty() {
        return Err(data_err(path, "manifest has no entries"));
    }
    Ok(m)
}

/// Synthesizes one noisy frame per clean entry and ratio. Pair `j` uses
/// camera `j mod cameras` and stream `j`; `oom` adds the out-of-model map.
pub fn synth(
    cfg: &RunConfig,
    cameras: &Path,
    clean: &Path,
    ratios: &[f64],
    oom: bool,
    seed: u64,
    out: &Path,
) -> CliResult {
    if ratios.is_empty() || ratios.iter().any(|r| !(*r >= 1.0)) {
        return Err(CliError::Usage("ratios must be non-empty and >= 1".into()));
    }
    let cams = read_cameras(cameras)?;
    let manifest = read_manifest(clean)?;
    let levels = cfg.levels()?;
    let components = cfg.components()?;
    let oom_spec = oom.then(|| cfg.oom()).transpose()?;
    let dir = parent_dir(out);
    let mut entries = Vec::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        let frame = read_image::<f64>(&entry.clean_path).map_err(|e| data_err(&entry.clean_path, e))?.image;
        let &[h, w] = frame.dims() else {
            return Err(data_err(&entry.clean_path, "clean image must be an [H, W] Bayer plane"));
        };
        let clean_abs = fs::canonicalize(&entry.clean_path).map_err(|e| data_err(&entry.clean_path, e))?;
        let pattern = oom_spec.map(|s| s.pattern_adu(h, w));
        for (r, &ratio) in ratios.iter().enumerate() {
            let j = i * ratios.len() + r;
            let cam_index = j % cams.len();
            let mut rng = stream(seed, domain::SYNTH, j as u64);
            let mut inst = sample_noise_instance(&cams[cam_index], ratio, &mut rng)?;
            inst.enabled = components;
            let mut adu = synthesize_noisy_adu(&frame, &inst, &levels, &mut rng)?;
            if let Some(p) = &pattern {
                adu.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            let range = levels.range();
            let noisy: Vec<f64> = adu.iter().map(|a| a / range).collect();
            let camera_id = format!("cam{cam_index}");
            let meta = BTreeMap::from([
                ("K".to_string(), format!("{:?}", inst.k)),
                ("sigma_tl".to_string(), format!("{:?}", inst.sigma_tl)),
                ("sigma_r".to_string(), format!("{:?}", inst.sigma_r)),
                ("ratio".to_string(), format!("{ratio:?}")),
                ("camera_id".to_string(), camera_id.clone()),
            ]);
            let name = format!("{}_x{ratio}.ledc", entry.scene_id);
            let image = Tensor::<f32>::from_f64_slice(&[h, w], &noisy)?;
            write_image(&dir.join(&name), &image, &meta)?;
            entries.push(ManifestEntry {
                clean_path: clean_abs.clone(),
                noisy_path: Some(name.into()),
                ratio,
                camera_id,
                k: Some(inst.k),
                scene_id: entry.scene_id.clone(),
            });
        }
    }
    let n = entries.len();
    DatasetManifest { entries }.write(out)?;
    eprintln!("wrote {n} noisy frames to {}", dir.display());
    Ok(())
}

// ------------------------------------------------------------ training

/// Collects progress events and writes them as CSV on success.
struct ProgressLog {
    path: Option<PathBuf>,
    csv: String,
}

impl ProgressLog {
    fn new(path: Option<&Path>) -> Self {
        ProgressLog {
            path: path.map(Path::to_path_buf),
            csv: String::from("stage,iteration,lr,loss\n"),
        }
    }

    fn record(&mut self, e: ProgressEvent) {
        let _ = writeln!(self.csv, "{},{},{:e},{:.8}", e.stage, e.iteration, e.lr, e.loss);
    }

    fn finish(self) -> CliResult {
        if let Some(p) = self.path {
            write_atomic(&p, self.csv.as_bytes())?;
        }
        Ok(())
    }
}

fn clean_frames<T: Scalar>(manifest: &DatasetManifest) -> CliResult<Vec<Tensor<T>>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let img = read_image::<T>(&e.clean_path).map_err(|err| data_err(&e.clean_path, err))?.image;
            if img.ndim() != 2 {
                return Err(data_err(&e.clean_path, "clean image must be an [H, W] Bayer plane"));
            }
            Ok(img)
        })
        .collect()
}

pub fn run_pretrain(
    cfg: &RunConfig,
    clean: &Path,
    cameras: &Path,
    seed: u64,
    out: &Path,
    progress: Option<&Path>,
) -> CliResult {
    let net_cfg = cfg.network()?;
    let tc = cfg.pretrain(seed)?;
    tc.validate(net_cfg.stages).map_err(|e| CliError::Usage(e.to_string()))?;
    let cams = read_cameras(cameras)?;
    let manifest = read_manifest(clean)?;
    match net_cfg.precision {
        Precision::Single => pretrain_as::<f32>(net_cfg, &cams, &manifest, &tc, seed, out, progress),
        Precision::Double => pretrain_as::<f64>(net_cfg, &cams, &manifest, &tc, seed, out, progress),
    }
}

fn pretrain_as<T: Scalar>(
    net_cfg: led_core::network::NetworkConfig,
    cams: &[CameraParams],
    manifest: &DatasetManifest,
    tc: &TrainConfig,
    seed: u64,
    out: &Path,
    progress: Option<&Path>,
) -> CliResult {
    let frames = clean_frames::<T>(manifest)?;
    let mut net = LedNetwork::<T>::build(net_cfg, cams.len(), &mut stream(seed, domain::INIT, 0))?;
    let mut log = ProgressLog::new(progress);
    let trace = pretrain(&mut net, cams, &frames, tc, &mut |e| log.record(e))?;
    write_checkpoint(out, &net)?;
    log.finish()?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        eprintln!("pretrain: {} iterations, loss {first:.5} -> {last:.5}", trace.len());
    }
    Ok(())
}

fn read_container(path: &Path) -> CliResult<Container> {
    Container::read(path).map_err(|e| data_err(path, e))
}

/// Few-shot pairs from a manifest, selected per ratio when a group holds more
/// than `per_ratio` entries.
fn fewshot_pairs<T: Scalar>(
    manifest: &DatasetManifest,
    per_ratio: usize,
    mode: SelectionMode,
) -> CliResult<Vec<FewShotPair<T>>> {
    let mut groups: BTreeMap<u64, usize> = BTreeMap::new();
    for e in &manifest.entries {
        *groups.entry(e.ratio.to_bits()).or_default() += 1;
    }
    let chosen: Vec<usize> = if groups.values().all(|&n| n <= per_ratio) {
        (0..manifest.len()).collect()
    } else {
        let candidates = manifest
            .entries
            .iter()
            .map(|e| {
                let k = match e.k {
                    Some(k) => k,
                    None => noisy_metadata_k(e)?,
                };
                Ok(PairCandidate { ratio: e.ratio, k })
            })
            .collect::<CliResult<Vec<_>>>()?;
        select_fewshot_pairs(&candidates, per_ratio, mode)?
    };
    chosen
        .into_iter()
        .map(|i| {
            let e = &manifest.entries[i];
            eprintln!(
                "fine-tuning pair: scene {} ratio {} K {}",
                e.scene_id,
                e.ratio,
                e.k.map_or("unknown".into(), |k| format!("{k:.4}"))
            );
            let pair = load_pair::<T>(e).map_err(|err| data_err(&e.clean_path, err))?;
            Ok(FewShotPair {
                noisy: pair.noisy,
                clean: pair.clean,
                ratio: pair.ratio,
                instance: None,
            })
        })
        .collect()
}

fn noisy_metadata_k(e: &ManifestEntry) -> CliResult<f64> {
    let path = e
        .noisy_path
        .as_ref()
        .ok_or_else(|| data_err(&e.clean_path, "pair selection needs noisy frames"))?;
    let meta = read_image::<f32>(path).map_err(|err| data_err(path, err))?.metadata;
    meta_f64(&meta, "K").map_err(|m| data_err(path, format!("pair selection needs K: {m}")))
}

fn meta_f64(meta: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    meta.get(key)
        .ok_or_else(|| format!("metadata lacks {key}"))?
        .parse()
        .map_err(|_| format!("metadata {key} is not a number"))
}

pub struct FinetuneArgs<'a> {
    pub ckpt: &'a Path,
    pub pairs: &'a Path,
    pub init: CsaInit,
    pub select: SelectionMode,
    pub seed: u64,
    pub out: &'a Path,
    pub progress: Option<&'a Path>,
}

pub fn run_finetune(cfg: &RunConfig, args: FinetuneArgs<'_>) -> CliResult {
    let container = read_container(args.ckpt)?;
    match checkpoint_dtype(&container)? {
        DType::F32 => finetune_as::<f32>(cfg, &container, &args),
        DType::F64 => finetune_as::<f64>(cfg, &container, &args),
    }
}

fn finetune_as<T: Scalar>(cfg: &RunConfig, container: &Container, args: &FinetuneArgs<'_>) -> CliResult {
    let mut net = network_from_container::<T>(container)?;
    if net.phase() != Phase::Pretrain {
        return Err(CliError::Data(format!(
            "{}: fine-tuning needs a pre-trained checkpoint, got phase {}",
            args.ckpt.display(),
            net.phase().as_str()
        )));
    }
    let (phase1, phase2) = cfg.finetune(args.seed)?;
    for c in [&phase1, &phase2] {
        c.validate(net.config().stages).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let manifest = read_manifest(args.pairs)?;
    let pairs = fewshot_pairs::<T>(&manifest, cfg.pairs_per_ratio()?, args.select)?;
    let mut log = ProgressLog::new(args.progress);
    let trace = finetune(&mut net, &pairs, &phase1, &phase2, args.init, &mut |e| log.record(e))?;
    write_checkpoint(args.out, &net)?;
    log.finish()?;
    eprintln!(
        "finetune: {} pairs, {} + {} iterations",
        pairs.len(),
        trace.csa.len(),
        trace.omnr.len()
    );
    Ok(())
}

// ------------------------------------------------------------ inference

/// Deploys a pre-training checkpoint through `branch`; other phases pass through.
fn inference_net<T: Scalar>(net: LedNetwork<T>, branch: Option<usize>) -> CliResult<LedNetwork<T>> {
    match (net.phase(), branch) {
        (Phase::Pretrain, Some(k)) => Ok(net.deploy_branch(k)?),
        (Phase::Pretrain, None) => Err(CliError::Usage(
            "a pre-training checkpoint needs --branch to pick a virtual camera".into(),
        )),
        (_, Some(_)) => Err(CliError::Usage("--branch applies to pre-training checkpoints only".into())),
        (_, None) => Ok(net),
    }
}

pub fn run_deploy(ckpt: &Path, branch: Option<usize>, out: &Path) -> CliResult {
    let container = read_container(ckpt)?;
    match checkpoint_dtype(&container)? {
        DType::F32 => deploy_as::<f32>(&container, branch, out),
        DType::F64 => deploy_as::<f64>(&container, branch, out),
    }
}

fn deploy_as<T: Scalar>(container: &Container, branch: Option<usize>, out: &Path) -> CliResult {
    let net = network_from_container::<T>(container)?;
    let deployed = match branch {
        Some(_) => inference_net(net, branch)?,
        None => net.deploy().map_err(|e| match e {
            LedError::Phase(m) => CliError::Usage(format!("{m}; pass --branch")),
            other => other.into(),
        })?,
    };
    write_checkpoint(out, &deployed)?;
    Ok(())
}

/// Replicates the last row and column so both spatial dims reach a multiple.
fn pad_to_multiple<T: Scalar>(packed: &Tensor<T>, multiple: usize) -> CliResult<Tensor<T>> {
    let &[c, h, w] = packed.dims() else {
        return Err(CliError::Data("packed image must be [4, h, w]".into()));
    };
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    let src = packed.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                out.push(src[(ch * h + sy) * w + x.min(w - 1)]);
            }
        }
    }
    Ok(Tensor::new(vec![c, ph, pw], out)?)
}

fn crop_to<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> CliResult<Tensor<T>> {
    let &[c, _, pw] = t.dims() else {
        return Err(CliError::Data("expected [4, h, w]".into()));
    };
    let ph = t.dims()[1];
    let src = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * ph + y) * pw;
            out.extend_from_slice(&src[row..row + w]);
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}

pub fn run_denoise(cfg: &RunConfig, ckpt: &Path, input: &Path, ratio: f64, branch: Option<usize>, out: &Path) -> CliResult {
    let container = read_container(ckpt)?;
    match checkpoint_dtype(&container)? {
        DType::F32 => denoise_as::<f32>(cfg, &container, input, ratio, branch, out),
        DType::F64 => denoise_as::<f64>(cfg, &container, input, ratio, branch, out),
    }
}

fn denoise_as<T: Scalar>(
    cfg: &RunConfig,
    container: &Container,
    input: &Path,
    ratio: f64,
    branch: Option<usize>,
    out: &Path,
) -> CliResult {
    if !(ratio >= 1.0) {
        return Err(CliError::Usage(format!("--ratio must be >= 1, got {ratio}")));
    }
    let net = inference_net(network_from_container::<T>(container)?, branch)?;
    let levels = cfg.levels()?;
    let stored = read_image::<T>(input).map_err(|e| data_err(input, e))?;
    let frame = BayerFrame::new(stored.image, levels).map_err(|e| data_err(input, e))?;
    let packed = pack_bayer(&frame);
    let (h, w) = (packed.dims()[1], packed.dims()[2]);
    let padded = pad_to_multiple(&packed, net.config().spatial_multiple())?;
    let restored = crop_to(&denoise(&net, &padded, ratio)?, h, w)?;
    let plane = unpack_bayer(&restored, levels)?.into_plane();
    let mut meta = stored.metadata;
    meta.insert("denoised_ratio".into(), format!("{ratio:?}"));
    write_image(out, &plane, &meta)?;
    Ok(())
}

pub fn run_eval(ckpt: &Path, pairs: &Path, ratios: &[f64], branch: Option<usize>, out: &Path) -> CliResult {
    let container = read_container(ckpt)?;
    let manifest = read_manifest(pairs)?;
    let csv = match checkpoint_dtype(&container)? {
        DType::F32 => evaluate(&inference_net(network_from_container::<f32>(&container)?, branch)?, &manifest, ratios)?,
        DType::F64 => evaluate(&inference_net(network_from_container::<f64>(&container)?, branch)?, &manifest, ratios)?,
    }
    .to_csv();
    write_atomic(out, csv.as_bytes())?;
    eprint!("{csv}");
    Ok(())
}

// ------------------------------------------------------------ gain line

pub const GAIN_LINE_HEADER: &str =
    "camera_id,quantity,points,distinct_k,slope,intercept,residual,slope_se,intercept_se,status";

/// Fits `log sigma = a log K + b` per camera from the noisy frames' provenance.
pub fn run_gain_line(pairs: &Path, out: &Path) -> CliResult {
    let manifest = read_manifest(pairs)?;
    let mut per_camera: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for e in &manifest.entries {
        let Some(path) = &e.noisy_path else { continue };
        let meta = read_image::<f32>(path).map_err(|err| data_err(path, err))?.metadata;
        let get = |k: &str| meta_f64(&meta, k).map_err(|m| data_err(path, m));
        per_camera
            .entry(e.camera_id.clone())
            .or_default()
            .push((get("K")?, get("sigma_tl")?, get("sigma_r")?));
    }
    if per_camera.is_empty() {
        return Err(data_err(pairs, "no noisy frames with provenance"));
    }
    let mut csv = format!("{GAIN_LINE_HEADER}\n");
    for (camera, points) in &per_camera {
        let mut ks: Vec<f64> = points.iter().map(|p| p.0).collect();
        ks.sort_by(f64::total_cmp);
        ks.dedup();
        for (quantity, pick) in [("sigma_tl", 1), ("sigma_r", 2)] {
            let pts: Vec<(f64, f64)> = points
                .iter()
                .map(|p| (p.0, if pick == 1 { p.1 } else { p.2 }))
                .collect();
            let prefix = format!("{camera},{quantity},{},{}", pts.len(), ks.len());
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.10}"));
            let row = match fit_gain_line(&pts) {
                Ok(l) => format!(
                    "{prefix},{:.10},{:.10},{:.3e},{},{},identifiable",
                    l.slope,
                    l.intercept,
                    l.residual,
                    opt(l.slope_se),
                    opt(l.intercept_se)
                ),
                Err(e) => {
                    let status = match e {
                        LedError::Underdetermined(_) => "underdetermined",
                        LedError::Degenerate(_) => "degenerate",
                        _ => "invalid",
                    };
                    format!("{prefix},,,,,,{status}")
                }
            };
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    write_atomic(out, csv.as_bytes())?;
    eprint!("{csv}");
    Ok(())
}
