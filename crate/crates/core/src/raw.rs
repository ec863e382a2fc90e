//! RAW frames, dataset manifests and the on-disk tensor container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "LEDC" | u8 version=1 | u32 entry count
//! per entry: u16 name len | name | u8 dtype (0 f32, 1 f64) | u8 ndim | ndim x u32 dims | payload
//! u32 metadata count | per pair: u16 key len | key | u16 value len | value
//! u64 FNV-1a over every preceding byte
//! ```
//!
//! Entries and metadata are written in lexicographic name order, so equal
//! contents always produce equal bytes. Images reuse the container with a
//! single tensor named `image`.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LedError, Result};
use crate::network::LedNetwork;
use crate::noise::SensorLevels;
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"LEDC";
const VERSION: u8 = 1;

/// Name of the single tensor inside an image container.
pub const IMAGE_TENSOR: &str = "image";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Cfa {
    #[default]
    Rggb,
}

/// One mosaic plane `[H, W]` with its sensor levels.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerFrame<T> {
    plane: Tensor<T>,
    pub pattern: Cfa,
    pub levels: SensorLevels,
}

impl<T: Scalar> BayerFrame<T> {
    pub fn new(plane: Tensor<T>, levels: SensorLevels) -> Result<Self> {
        let &[h, w] = plane.dims() else {
            return Err(LedError::shape(format!(
                "bayer plane must be [H, W], got {:?}",
                plane.dims()
            )));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(LedError::shape(format!("bayer plane {h}x{w} has an odd extent")));
        }
        levels.validate()?;
        Ok(BayerFrame {
            plane,
            pattern: Cfa::Rggb,
            levels,
        })
    }

    pub fn plane(&self) -> &Tensor<T> {
        &self.plane
    }

    pub fn into_plane(self) -> Tensor<T> {
        self.plane
    }
}

/// Tile offsets of R, G1, G2, B inside each 2x2 RGGB cell.
const RGGB_OFFSETS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Splits an RGGB mosaic into a `[4, H/2, W/2]` tensor.
pub fn pack_bayer<T: Scalar>(frame: &BayerFrame<T>) -> Tensor<T> {
    let &[h, w] = frame.plane.dims() else { unreachable!() };
    let (hh, hw) = (h / 2, w / 2);
    let src = frame.plane.data();
    let mut out = Vec::with_capacity(h * w);
    for (dy, dx) in RGGB_OFFSETS {
        for y in 0..hh {
            for x in 0..hw {
                out.push(src[(2 * y + dy) * w + 2 * x + dx]);
            }
        }
    }
    Tensor::new(vec![4, hh, hw], out).expect("packed size matches")
}

/// Exact inverse of [`pack_bayer`].
pub fn unpack_bayer<T: Scalar>(packed: &Tensor<T>, levels: SensorLevels) -> Result<BayerFrame<T>> {
    let &[4, hh, hw] = packed.dims() else {
        return Err(LedError::shape(format!(
            "packed bayer tensor must be [4, h, w], got {:?}",
            packed.dims()
        )));
    };
    let (h, w) = (2 * hh, 2 * hw);
    let src = packed.data();
    let mut out = vec![T::zero(); h * w];
    for (c, (dy, dx)) in RGGB_OFFSETS.into_iter().enumerate() {
        for y in 0..hh {
            for x in 0..hw {
                out[(2 * y + dy) * w + 2 * x + dx] = src[(c * hh + y) * hw + x];
            }
        }
    }
    BayerFrame::new(Tensor::new(vec![h, w], out)?, levels)
}

/// Non-overlapping `patch x patch` tiles over the last two axes, row-major;
/// remainders are discarded.
pub fn crop_patches<T: Scalar>(frame: &Tensor<T>, patch: usize) -> Result<Vec<Tensor<T>>> {
    let dims = frame.dims();
    if dims.len() < 2 {
        return Err(LedError::shape("crop_patches needs at least two axes"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if patch == 0 || patch > h || patch > w {
        return Err(LedError::shape(format!("patch {patch} does not fit a {h}x{w} frame")));
    }
    let lead: usize = dims[..dims.len() - 2].iter().product();
    let mut out_dims = dims.to_vec();
    let n = out_dims.len();
    out_dims[n - 2] = patch;
    out_dims[n - 1] = patch;
    let src = frame.data();
    let mut patches = Vec::with_capacity((h / patch) * (w / patch));
    for ty in 0..h / patch {
        for tx in 0..w / patch {
            let mut data = Vec::with_capacity(lead * patch * patch);
            for l in 0..lead {
                for y in 0..patch {
                    let row = (l * h + ty * patch + y) * w + tx * patch;
                    data.extend_from_slice(&src[row..row + patch]);
                }
            }
            patches.push(Tensor::new(out_dims.clone(), data)?);
        }
    }
    Ok(patches)
}

/// ADU to `[0, 1]` relative to the sensor levels; no clamping.
pub fn normalize<T: Scalar>(adu: &Tensor<T>, levels: SensorLevels) -> Result<Tensor<T>> {
    levels.validate()?;
    let black = T::from_f64(levels.black_level);
    let range = T::from_f64(levels.range());
    Ok(adu.map(|v| (v - black) / range))
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(norm: &Tensor<T>, levels: SensorLevels) -> Result<Tensor<T>> {
    levels.validate()?;
    let black = T::from_f64(levels.black_level);
    let range = T::from_f64(levels.range());
    Ok(norm.map(|v| v * range + black))
}

/// A tensor of either precision as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.dims(),
            StoredTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to `T`, widening or narrowing as needed.
    pub fn to_precision<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    /// Returns the tensor only if it is stored as `T`.
    pub fn exact<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(LedError::Format(format!(
                "stored dtype {:?} differs from requested {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(self.to_precision())
    }
}

impl<T: Scalar> From<Tensor<T>> for StoredTensor {
    fn from(t: Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

/// Named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: BTreeMap<String, String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| LedError::invalid(format!("string of {} bytes exceeds u16 length", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_payload<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) -> Result<()> {
    out.push(T::DTYPE as u8);
    let ndim = u8::try_from(t.ndim()).map_err(|_| LedError::invalid("too many axes"))?;
    out.push(ndim);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| LedError::invalid("axis exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LedError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| LedError::Corrupt("string is not UTF-8".into()))
    }

    fn payload<T: Scalar>(&mut self, dims: Vec<usize>) -> Result<Tensor<T>> {
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(T::BYTES))
            .ok_or_else(|| LedError::Corrupt("tensor size overflows".into()))?;
        let raw = self.take(len)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(dims, data).map_err(|e| LedError::Corrupt(e.to_string()))
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor.into());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let count = u32::try_from(self.tensors.len()).map_err(|_| LedError::invalid("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            match t {
                StoredTensor::F32(t) => put_payload(&mut out, t)?,
                StoredTensor::F64(t) => put_payload(&mut out, t)?,
            }
        }
        let count = u32::try_from(self.metadata.len()).map_err(|_| LedError::invalid("too much metadata"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 1 + 4 + 4 + 8 {
            return Err(LedError::Corrupt("container is too short".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(LedError::Corrupt("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(LedError::Corrupt(format!("unsupported version {version}")));
        }
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        if stored != fnv1a(body) {
            return Err(LedError::Corrupt("checksum mismatch".into()));
        }
        let mut c = Container::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let t = match dtype {
                0 => StoredTensor::F32(r.payload(dims)?),
                1 => StoredTensor::F64(r.payload(dims)?),
                other => return Err(LedError::Corrupt(format!("unknown dtype code {other}"))),
            };
            if c.tensors.insert(name.clone(), t).is_some() {
                return Err(LedError::Corrupt(format!("duplicate tensor {name}")));
            }
        }
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            c.metadata.insert(k, v);
        }
        if r.pos != body.len() {
            return Err(LedError::Corrupt("trailing bytes before checksum".into()));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
/// Missing parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| LedError::Io(e.error))?;
    Ok(())
}

/// An image tensor and its provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredImage<T> {
    pub image: Tensor<T>,
    pub metadata: BTreeMap<String, String>,
}

pub fn write_image<T: Scalar>(path: &Path, image: &Tensor<T>, metadata: &BTreeMap<String, String>) -> Result<()> {
    let mut c = Container::new();
    c.insert(IMAGE_TENSOR, image.clone());
    c.metadata = metadata.clone();
    c.write(path)
}

/// Reads an image container, converting to `T`.
pub fn read_image<T: Scalar>(path: &Path) -> Result<StoredImage<T>> {
    let c = Container::read(path)?;
    let t = c
        .tensors
        .get(IMAGE_TENSOR)
        .ok_or_else(|| LedError::Format(format!("{} has no image tensor", path.display())))?;
    Ok(StoredImage {
        image: t.to_precision(),
        metadata: c.metadata,
    })
}

pub fn write_checkpoint<T: Scalar>(path: &Path, net: &LedNetwork<T>) -> Result<()> {
    let (tensors, metadata) = net.to_checkpoint();
    let c = Container {
        tensors: tensors.into_iter().map(|(k, v)| (k, v.into())).collect(),
        metadata,
    };
    c.write(path)
}

/// Storage precision of a checkpoint, read from its first tensor.
pub fn checkpoint_dtype(c: &Container) -> Result<DType> {
    let mut dtypes = c.tensors.values().map(StoredTensor::dtype);
    let first = dtypes
        .next()
        .ok_or_else(|| LedError::Format("checkpoint holds no tensors".into()))?;
    if dtypes.any(|d| d != first) {
        return Err(LedError::Format("checkpoint mixes precisions".into()));
    }
    Ok(first)
}

pub fn network_from_container<T: Scalar>(c: &Container) -> Result<LedNetwork<T>> {
    let tensors = c
        .tensors
        .iter()
        .map(|(k, v)| v.exact::<T>().map(|t| (k.clone(), t)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    LedNetwork::from_checkpoint(tensors, &c.metadata)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<LedNetwork<T>> {
    network_from_container(&Container::read(path)?)
}

/// One line of a JSON-lines dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_path: Option<PathBuf>,
    pub ratio: f64,
    pub camera_id: String,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    pub scene_id: String,
}

/// Entries with paths resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| LedError::Format(format!("{}:{}: {err}", path.display(), i + 1)))?;
            if !(e.ratio >= 1.0) {
                return Err(LedError::Format(format!(
                    "{}:{}: ratio must be >= 1, got {}",
                    path.display(),
                    i + 1,
                    e.ratio
                )));
            }
            e.clean_path = base.join(&e.clean_path);
            e.noisy_path = e.noisy_path.map(|p| base.join(p));
            entries.push(e);
        }
        Ok(DatasetManifest { entries })
    }

    /// Writes entries verbatim (paths are not relativized).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(|err| LedError::Format(err.to_string()))?;
            out.push(b'\n');
        }
        write_atomic(path, &out)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A loaded noisy/clean pair with the noisy image's provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPair<T> {
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
    pub ratio: f64,
    pub metadata: BTreeMap<String, String>,
}

pub fn load_pair<T: Scalar>(entry: &ManifestEntry) -> Result<LoadedPair<T>> {
    let noisy_path = entry.noisy_path.as_ref().ok_or_else(|| {
        LedError::Format(format!("entry {} has no noisy_path", entry.clean_path.display()))
    })?;
    let clean = read_image::<T>(&entry.clean_path)?.image;
    let noisy = read_image::<T>(noisy_path)?;
    if noisy.image.dims() != clean.dims() {
        return Err(LedError::Format(format!(
            "pair dims differ: {} is {:?}, {} is {:?}",
            noisy_path.display(),
            noisy.image.dims(),
            entry.clean_path.display(),
            clean.dims()
        )));
    }
    Ok(LoadedPair {
        noisy: noisy.image,
        clean,
        ratio: entry.ratio,
        metadata: noisy.metadata,
    })
}
