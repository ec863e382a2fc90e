//! PSNR and SSIM on normalized images, and per-ratio evaluation reports.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{LedError, Result};
use crate::network::LedNetwork;
use crate::par;
use crate::raw::{load_pair, pack_bayer, BayerFrame, DatasetManifest};
use crate::noise::SensorLevels;
use crate::tensor::{Scalar, Tensor};
use crate::training::{crop_to_multiple, denoise};

/// PSNR in dB with peak 1. Identical inputs give `Infinite`, never a sentinel float.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(-10.0 * mse.log10())
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

fn same_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(LedError::shape(format!(
            "metric inputs differ in dims: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_dims(a, b)?;
    if a.is_empty() {
        return Err(LedError::shape("metric inputs are empty"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps();
    // identical inputs give numerator == denominator bit for bit
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    total / n as f64
}

/// Mean single-scale SSIM over every plane (all leading axes are channels).
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_dims(a, b)?;
    let dims = a.dims();
    if dims.len() < 2 {
        return Err(LedError::shape("ssim needs at least two axes"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LedError::shape(format!(
            "ssim needs spatial dims >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let planes = a.len() / (h * w);
    let (ad, bd) = (a.to_f64_vec(), b.to_f64_vec());
    let per_plane = par::map_indices(planes, |c| {
        let r = c * h * w..(c + 1) * h * w;
        ssim_plane(&ad[r.clone()], &bd[r], h, w)
    });
    Ok(per_plane.iter().sum::<f64>() / planes as f64)
}

/// Aggregates for one ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub ratio: f64,
    pub count: usize,
    pub psnr_db: Psnr,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    /// Sorted by ratio.
    pub rows: Vec<EvalRow>,
}

pub const EVAL_CSV_HEADER: &str = "ratio,count,psnr_db,ssim";

impl EvalReport {
    /// Groups per-pair `(ratio, psnr, ssim)` scores by ratio.
    pub fn from_scores(scores: &[(f64, Psnr, f64)]) -> Result<Self> {
        if scores.is_empty() {
            return Err(LedError::invalid("no pairs to evaluate"));
        }
        let mut groups: BTreeMap<u64, Vec<(Psnr, f64)>> = BTreeMap::new();
        for &(ratio, p, s) in scores {
            groups.entry(ratio.to_bits()).or_default().push((p, s));
        }
        let mut rows: Vec<EvalRow> = groups
            .into_iter()
            .map(|(bits, items)| {
                let count = items.len();
                let psnr_db = if items.iter().any(|(p, _)| *p == Psnr::Infinite) {
                    Psnr::Infinite
                } else {
                    let sum: f64 = items.iter().filter_map(|(p, _)| p.finite()).sum();
                    Psnr::Finite(sum / count as f64)
                };
                let ssim = items.iter().map(|(_, s)| s).sum::<f64>() / count as f64;
                EvalRow {
                    ratio: f64::from_bits(bits),
                    count,
                    psnr_db,
                    ssim,
                }
            })
            .collect();
        rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
        Ok(EvalReport { rows })
    }

    pub fn total_count(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.6}\n", r.ratio, r.count, r.psnr_db, r.ssim));
        }
        s
    }
}

/// PSNR and SSIM between a denoised estimate and its clean reference, on
/// packed 4-channel images.
pub fn score_packed<T: Scalar>(estimate: &Tensor<T>, clean: &Tensor<T>) -> Result<(Psnr, f64)> {
    Ok((psnr(estimate, clean)?, ssim(estimate, clean)?))
}

/// Denoises every manifest pair whose ratio is in `ratios` (all pairs if
/// `ratios` is empty) and aggregates per ratio. Images are normalized Bayer
/// planes; they are packed and cropped top-left to the network's spatial
/// multiple before scoring.
pub fn evaluate<T: Scalar>(
    net: &LedNetwork<T>,
    manifest: &DatasetManifest,
    ratios: &[f64],
) -> Result<EvalReport> {
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| ratios.is_empty() || ratios.contains(&e.ratio))
        .collect();
    if entries.is_empty() {
        return Err(LedError::invalid("manifest has no pairs at the requested ratios"));
    }
    let multiple = net.config().spatial_multiple();
    let scores = par::map_indices(entries.len(), |i| -> Result<(f64, Psnr, f64)> {
        let pair = load_pair::<T>(entries[i])?;
        let pack = |t: Tensor<T>| -> Result<Tensor<T>> {
            let packed = pack_bayer(&BayerFrame::new(t, SensorLevels::default())?);
            crop_to_multiple(&packed, multiple)
        };
        let noisy = pack(pair.noisy)?;
        let clean = pack(pair.clean)?;
        let est = denoise(net, &noisy, pair.ratio)?;
        let (p, s) = score_packed(&est, &clean)?;
        Ok((pair.ratio, p, s))
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_half_difference() {
        let a = Tensor::<f64>::zeros(&[4, 8, 8]);
        let b = Tensor::<f64>::full(&[4, 8, 8], 0.5);
        let p = psnr(&a, &b).unwrap().finite().unwrap();
        assert!((p - 6.020_599_913_279_624).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
        assert_eq!(Psnr::Infinite.to_string(), "inf");
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let g = gaussian_taps();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f32>::zeros(&[4, 10, 16]);
        assert!(matches!(ssim(&a, &a), Err(LedError::Shape(_))));
    }

    #[test]
    fn report_groups_and_csv() {
        let r = EvalReport::from_scores(&[
            (300.0, Psnr::Finite(30.0), 0.8),
            (100.0, Psnr::Finite(40.0), 0.9),
            (100.0, Psnr::Finite(42.0), 0.7),
        ])
        .unwrap();
        assert_eq!(r.total_count(), 3);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], EVAL_CSV_HEADER);
        assert_eq!(lines[1], "100,2,41.000000,0.800000");
        assert_eq!(lines[2], "300,1,30.000000,0.800000");
        assert!(EvalReport::from_scores(&[]).is_err());
    }
}
