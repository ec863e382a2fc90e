//! Camera noise coordinates, virtual camera generation and the log-linear
//! gain law relating system gain to read and row noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LedError, Result};
use crate::noise::{NoiseComponents, NoiseInstance};

/// Ten-dimensional noise coordinate of a (virtual or real) camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub k_min: f64,
    pub k_max: f64,
    pub lambda: f64,
    pub mu_c: f64,
    pub a_tl: f64,
    pub b_tl: f64,
    pub sigma_hat_tl: f64,
    pub a_r: f64,
    pub b_r: f64,
    pub sigma_hat_r: f64,
}

/// Coordinate names in canonical order; also the config key stems (`space.<name>_lo`).
pub const COORDINATES: [&str; 10] = [
    "k_min",
    "k_max",
    "lambda",
    "mu_c",
    "a_tl",
    "b_tl",
    "sigma_hat_tl",
    "a_r",
    "b_r",
    "sigma_hat_r",
];

impl CameraParams {
    pub fn from_array(v: [f64; 10]) -> Self {
        CameraParams {
            k_min: v[0],
            k_max: v[1],
            lambda: v[2],
            mu_c: v[3],
            a_tl: v[4],
            b_tl: v[5],
            sigma_hat_tl: v[6],
            a_r: v[7],
            b_r: v[8],
            sigma_hat_r: v[9],
        }
    }

    pub fn to_array(&self) -> [f64; 10] {
        [
            self.k_min,
            self.k_max,
            self.lambda,
            self.mu_c,
            self.a_tl,
            self.b_tl,
            self.sigma_hat_tl,
            self.a_r,
            self.b_r,
            self.sigma_hat_r,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(LedError::invalid("camera parameters must be finite"));
        }
        if !(self.k_min > 0.0 && self.k_min <= self.k_max) {
            return Err(LedError::invalid(format!(
                "camera needs 0 < k_min <= k_max (got {}, {})",
                self.k_min, self.k_max
            )));
        }
        if !(self.lambda > -0.5) {
            return Err(LedError::invalid("camera lambda must be > -0.5"));
        }
        if !(self.sigma_hat_tl >= 0.0 && self.sigma_hat_r >= 0.0) {
            return Err(LedError::invalid("conditional stds must be >= 0"));
        }
        Ok(())
    }

    /// Mean of `log sigma_tl` given `log K`.
    pub fn log_sigma_tl_mean(&self, log_k: f64) -> f64 {
        self.a_tl * log_k + self.b_tl
    }

    /// Mean of `log sigma_r` given `log K`.
    pub fn log_sigma_r_mean(&self, log_k: f64) -> f64 {
        self.a_r * log_k + self.b_r
    }
}

/// Inclusive range of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Range { lo: v, hi: v }
    }
}

/// Box of admissible camera coordinates, one [`Range`] per coordinate in
/// [`COORDINATES`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    pub ranges: [Range; 10],
}

impl Default for ParameterSpace {
    /// Plausible magnitudes for consumer sensors at 14 bits; override from config.
    fn default() -> Self {
        ParameterSpace {
            ranges: [
                Range::new(0.05, 0.5),
                Range::new(5.0, 30.0),
                Range::new(0.08, 0.2),
                Range::new(-2.0, 2.0),
                Range::new(0.6, 1.0),
                Range::new(-0.5, 0.5),
                Range::new(0.05, 0.2),
                Range::new(0.4, 0.8),
                Range::new(-2.0, -1.0),
                Range::new(0.02, 0.1),
            ],
        }
    }
}

impl ParameterSpace {
    /// Space containing exactly one camera.
    pub fn point(camera: &CameraParams) -> Self {
        ParameterSpace {
            ranges: camera.to_array().map(Range::point),
        }
    }

    pub fn range(&self, name: &str) -> Option<Range> {
        COORDINATES
            .iter()
            .position(|&c| c == name)
            .map(|i| self.ranges[i])
    }

    pub fn range_mut(&mut self, name: &str) -> Option<&mut Range> {
        COORDINATES
            .iter()
            .position(|&c| c == name)
            .map(move |i| &mut self.ranges[i])
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in COORDINATES.iter().zip(&self.ranges) {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(LedError::invalid(format!(
                    "range for {name} must satisfy lo <= hi (got [{}, {}])",
                    r.lo, r.hi
                )));
            }
        }
        let [k_min, k_max, lambda, ..] = self.ranges;
        if !(k_min.lo > 0.0) {
            return Err(LedError::invalid("k_min range must be positive"));
        }
        if k_min.hi > k_max.lo {
            return Err(LedError::invalid(
                "k_min range must lie entirely below the k_max range",
            ));
        }
        if !(lambda.lo > -0.5) {
            return Err(LedError::invalid("lambda range must stay above -0.5"));
        }
        if self.ranges[6].lo < 0.0 || self.ranges[9].lo < 0.0 {
            return Err(LedError::invalid("conditional std ranges must be >= 0"));
        }
        Ok(())
    }
}

/// Camera `k` (1-based) of `m` takes `lo + k (hi - lo) / (m + 1)` on every
/// coordinate: equally spaced, strictly interior points.
pub fn generate_virtual_cameras(m: usize, space: &ParameterSpace) -> Result<Vec<CameraParams>> {
    if m == 0 {
        return Err(LedError::invalid("need at least one virtual camera"));
    }
    space.validate()?;
    let cams = (1..=m)
        .map(|k| {
            let frac = k as f64 / (m + 1) as f64;
            CameraParams::from_array(space.ranges.map(|r| r.lo + frac * (r.hi - r.lo)))
        })
        .collect();
    Ok(cams)
}

/// Draws `(K, sigma_tl, sigma_r)` from the joint log-linear law of `camera`.
pub fn sample_noise_instance<R: Rng + ?Sized>(
    camera: &CameraParams,
    ratio: f64,
    rng: &mut R,
) -> Result<NoiseInstance> {
    camera.validate()?;
    if !(ratio >= 1.0) {
        return Err(LedError::invalid(format!("ratio must be >= 1, got {ratio}")));
    }
    let k = if camera.k_min == camera.k_max {
        camera.k_min
    } else {
        let (lo, hi) = (camera.k_min.ln(), camera.k_max.ln());
        rng.random_range(lo..hi).exp()
    };
    let log_k = k.ln();
    let sigma_tl = conditional_lognormal(camera.log_sigma_tl_mean(log_k), camera.sigma_hat_tl, rng)?;
    let sigma_r = conditional_lognormal(camera.log_sigma_r_mean(log_k), camera.sigma_hat_r, rng)?;
    Ok(NoiseInstance {
        k,
        sigma_tl,
        sigma_r,
        lambda: camera.lambda,
        mu_c: camera.mu_c,
        ratio,
        enabled: NoiseComponents::ALL,
    })
}

fn conditional_lognormal<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> Result<f64> {
    if std == 0.0 {
        return Ok(mean.exp());
    }
    let normal = Normal::new(mean, std).map_err(|e| LedError::invalid(e.to_string()))?;
    Ok(normal.sample(rng).exp())
}

/// Least-squares line through `(log K, log sigma)` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainLine {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log units.
    pub residual: f64,
    pub points: usize,
    /// Standard errors, available with more than two points.
    pub slope_se: Option<f64>,
    pub intercept_se: Option<f64>,
}

/// Fits `log sigma = a log K + b` to `(K, sigma)` points.
pub fn fit_gain_line(points: &[(f64, f64)]) -> Result<GainLine> {
    if points.iter().any(|&(k, s)| !(k > 0.0 && s > 0.0)) {
        return Err(LedError::invalid("gain-line points need K > 0 and sigma > 0"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(k, s)| (k.ln(), s.ln())).collect();
    fit_log_line(&logs)
}

/// Same as [`fit_gain_line`] on points already in log space.
pub fn fit_log_line(points: &[(f64, f64)]) -> Result<GainLine> {
    let n = points.len();
    if n < 2 {
        return Err(LedError::Underdetermined(format!(
            "a gain line needs at least two points, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LedError::Degenerate(
            "all points share the same system gain; the slope is unidentifiable".into(),
        ));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let (slope_se, intercept_se) = if n > 2 {
        let s2 = rss / (nf - 2.0);
        (
            Some((s2 / sxx).sqrt()),
            Some((s2 * (1.0 / nf + mx * mx / sxx)).sqrt()),
        )
    } else {
        (None, None)
    };
    Ok(GainLine {
        slope,
        intercept,
        residual: (rss / nf).sqrt(),
        points: n,
        slope_se,
        intercept_se,
    })
}

/// How few-shot pairs are picked within each ratio group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Maximize the spread of log K.
    Spread,
    /// Minimize the spread of log K (control).
    Similar,
}

impl std::str::FromStr for SelectionMode {
    type Err = LedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spread" => Ok(SelectionMode::Spread),
            "similar" => Ok(SelectionMode::Similar),
            other => Err(LedError::invalid(format!("unknown selection mode {other:?}"))),
        }
    }
}

/// What pair selection needs to know about a candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCandidate {
    pub ratio: f64,
    pub k: f64,
}

/// Picks `pairs_per_ratio` candidates from every ratio group. Returns
/// indices into `candidates`, sorted ascending.
pub fn select_fewshot_pairs(
    candidates: &[PairCandidate],
    pairs_per_ratio: usize,
    mode: SelectionMode,
) -> Result<Vec<usize>> {
    if pairs_per_ratio == 0 {
        return Err(LedError::invalid("pairs_per_ratio must be >= 1"));
    }
    if candidates.iter().any(|c| !(c.k > 0.0)) {
        return Err(LedError::invalid("candidate K must be > 0"));
    }
    let mut ratios: Vec<f64> = candidates.iter().map(|c| c.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let mut selected = Vec::new();
    for ratio in ratios {
        // group sorted by log K, ties by index
        let mut group: Vec<(f64, usize)> = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.ratio == ratio)
            .map(|(i, c)| (c.k.ln(), i))
            .collect();
        if group.len() < pairs_per_ratio {
            return Err(LedError::invalid(format!(
                "ratio {ratio} has {} candidates, need {pairs_per_ratio}",
                group.len()
            )));
        }
        group.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let picked = match mode {
            SelectionMode::Similar => {
                let n = pairs_per_ratio;
                let start = (0..=group.len() - n)
                    .min_by(|&a, &b| {
                        let sa = group[a + n - 1].0 - group[a].0;
                        let sb = group[b + n - 1].0 - group[b].0;
                        sa.total_cmp(&sb)
                    })
                    .unwrap();
                group[start..start + n].iter().map(|g| g.1).collect::<Vec<_>>()
            }
            SelectionMode::Spread => spread_pick(&group, pairs_per_ratio),
        };
        selected.extend(picked);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Greedy farthest-point selection starting from both extremes.
fn spread_pick(sorted: &[(f64, usize)], n: usize) -> Vec<usize> {
    let mut chosen = vec![0];
    if n >= 2 {
        chosen.push(sorted.len() - 1);
    }
    while chosen.len() < n {
        let next = (0..sorted.len())
            .filter(|i| !chosen.contains(i))
            .max_by(|&a, &b| {
                let da = chosen.iter().map(|&c| (sorted[a].0 - sorted[c].0).abs()).fold(f64::INFINITY, f64::min);
                let db = chosen.iter().map(|&c| (sorted[b].0 - sorted[c].0).abs()).fold(f64::INFINITY, f64::min);
                // prefer the earlier index on ties
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        chosen.push(next);
    }
    chosen.into_iter().map(|i| sorted[i].1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    #[test]
    fn bisection_points() {
        let mut space = ParameterSpace::default();
        space.ranges[3] = Range::new(0.0, 1.0);
        let one = generate_virtual_cameras(1, &space).unwrap();
        assert_eq!(one[0].mu_c, 0.5);
        let four = generate_virtual_cameras(4, &space).unwrap();
        let mus: Vec<f64> = four.iter().map(|c| c.mu_c).collect();
        for (got, want) in mus.iter().zip([0.2, 0.4, 0.6, 0.8]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(generate_virtual_cameras(0, &space).is_err());
    }

    #[test]
    fn default_space_cameras_are_valid_and_ordered() {
        let space = ParameterSpace::default();
        let cams = generate_virtual_cameras(7, &space).unwrap();
        for c in &cams {
            c.validate().unwrap();
        }
        for pair in cams.windows(2) {
            let (a, b) = (pair[0].to_array(), pair[1].to_array());
            for i in 0..10 {
                assert!(a[i] < b[i]);
                assert!(a[i] > space.ranges[i].lo && b[i] < space.ranges[i].hi);
            }
        }
    }

    #[test]
    fn invalid_space_is_rejected() {
        let mut space = ParameterSpace::default();
        space.ranges[0] = Range::new(0.5, 6.0);
        assert!(space.validate().is_err());
        let mut space = ParameterSpace::default();
        space.ranges[4] = Range::new(1.0, 0.0);
        assert!(generate_virtual_cameras(2, &space).is_err());
    }

    #[test]
    fn point_space_reproduces_camera() {
        let cam = generate_virtual_cameras(3, &ParameterSpace::default()).unwrap()[1];
        let back = generate_virtual_cameras(1, &ParameterSpace::point(&cam)).unwrap();
        assert_eq!(back[0], cam);
    }

    #[test]
    fn degenerate_instance_is_deterministic() {
        let mut cam = generate_virtual_cameras(1, &ParameterSpace::default()).unwrap()[0];
        cam.k_min = 3.0;
        cam.k_max = 3.0;
        cam.sigma_hat_tl = 0.0;
        cam.sigma_hat_r = 0.0;
        let inst = sample_noise_instance(&cam, 100.0, &mut stream(0, domain::SYNTH, 0)).unwrap();
        assert_eq!(inst.k, 3.0);
        assert_eq!(inst.sigma_tl, (cam.a_tl * 3f64.ln() + cam.b_tl).exp());
        assert_eq!(inst.sigma_r, (cam.a_r * 3f64.ln() + cam.b_r).exp());
        assert_eq!(inst.ratio, 100.0);
    }

    #[test]
    fn k_stays_in_support() {
        let cam = generate_virtual_cameras(1, &ParameterSpace::default()).unwrap()[0];
        let mut rng = stream(1, domain::SYNTH, 0);
        for _ in 0..2000 {
            let inst = sample_noise_instance(&cam, 1.0, &mut rng).unwrap();
            assert!(inst.k >= cam.k_min && inst.k <= cam.k_max);
        }
        assert!(sample_noise_instance(&cam, 0.5, &mut rng).is_err());
    }

    #[test]
    fn gain_line_two_points() {
        let e = std::f64::consts::E;
        let line = fit_gain_line(&[(1.0, e), (e, e.powi(3))]).unwrap();
        assert!((line.slope - 2.0).abs() < 1e-12);
        assert!((line.intercept - 1.0).abs() < 1e-12);
        assert!(line.residual < 1e-12);
        assert!(matches!(fit_gain_line(&[(1.0, 1.0)]), Err(LedError::Underdetermined(_))));
        assert!(matches!(
            fit_gain_line(&[(2.0, 1.0), (2.0, 3.0)]),
            Err(LedError::Degenerate(_))
        ));
    }

    #[test]
    fn selection_examples() {
        let c = |lk: f64| PairCandidate { ratio: 100.0, k: lk.exp() };
        let set = [c(0.0), c(0.1), c(1.0)];
        assert_eq!(select_fewshot_pairs(&set, 2, SelectionMode::Spread).unwrap(), vec![0, 2]);
        assert_eq!(select_fewshot_pairs(&set, 2, SelectionMode::Similar).unwrap(), vec![0, 1]);
        let two = [c(0.3), c(0.7)];
        for mode in [SelectionMode::Spread, SelectionMode::Similar] {
            assert_eq!(select_fewshot_pairs(&two, 2, mode).unwrap(), vec![0, 1]);
        }
        assert!(select_fewshot_pairs(&two, 3, SelectionMode::Spread).is_err());
    }

    #[test]
    fn selection_is_per_ratio() {
        let cands = [
            PairCandidate { ratio: 100.0, k: 1.0 },
            PairCandidate { ratio: 250.0, k: 1.0 },
            PairCandidate { ratio: 100.0, k: 5.0 },
            PairCandidate { ratio: 250.0, k: 9.0 },
            PairCandidate { ratio: 100.0, k: 1.1 },
            PairCandidate { ratio: 250.0, k: 2.0 },
        ];
        let spread = select_fewshot_pairs(&cands, 2, SelectionMode::Spread).unwrap();
        assert_eq!(spread, vec![0, 1, 2, 3]);
        let similar = select_fewshot_pairs(&cands, 2, SelectionMode::Similar).unwrap();
        assert_eq!(similar, vec![0, 1, 4, 5]);
        let three = select_fewshot_pairs(&cands, 3, SelectionMode::Spread).unwrap();
        assert_eq!(three.len(), 6);
    }
}
