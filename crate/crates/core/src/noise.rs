//! Physics-based low-light noise synthesis in the ADU domain.
//!
//! A noisy frame is the clean signal plus shot, read, row and quantization
//! noise:
//!
//! * shot:  `P(I / K) * K` (signal and shot noise together),
//! * read:  Tukey-lambda with shape `lambda`, mean `mu_c` and std `sigma_tl`,
//! * row:   one `N(0, sigma_r)` offset per sensor row,
//! * quant: `U(-1/2, 1/2)` in ADU.
//!
//! Every sampler is a pure function of its arguments and the rng state.

use rand::distr::{Distribution, Open01};
use rand::Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{LedError, Result};
use crate::tensor::{Scalar, Tensor};

/// Black and white point of the ADU domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorLevels {
    pub black_level: f64,
    pub white_level: f64,
}

impl Default for SensorLevels {
    /// A common 14-bit layout.
    fn default() -> Self {
        SensorLevels {
            black_level: 512.0,
            white_level: 16383.0,
        }
    }
}

impl SensorLevels {
    pub fn new(black_level: f64, white_level: f64) -> Result<Self> {
        let l = SensorLevels {
            black_level,
            white_level,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.black_level >= 0.0 && self.white_level > self.black_level) {
            return Err(LedError::invalid(format!(
                "sensor levels need white > black >= 0 (black {}, white {})",
                self.black_level, self.white_level
            )));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.white_level - self.black_level
    }
}

/// On/off switches for the in-model noise components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseComponents {
    pub shot: bool,
    pub read: bool,
    pub row: bool,
    pub quant: bool,
}

impl NoiseComponents {
    pub const ALL: NoiseComponents = NoiseComponents {
        shot: true,
        read: true,
        row: true,
        quant: true,
    };
    pub const NONE: NoiseComponents = NoiseComponents {
        shot: false,
        read: false,
        row: false,
        quant: false,
    };
}

impl Default for NoiseComponents {
    fn default() -> Self {
        Self::ALL
    }
}

/// One realized draw of the per-frame noise parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseInstance {
    /// Overall system gain, ADU per electron.
    pub k: f64,
    pub sigma_tl: f64,
    pub sigma_r: f64,
    pub lambda: f64,
    pub mu_c: f64,
    /// Digital gain between the clean exposure and the simulated short one.
    pub ratio: f64,
    pub enabled: NoiseComponents,
}

impl NoiseInstance {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(LedError::invalid(format!("system gain K must be > 0, got {}", self.k)));
        }
        if !(self.sigma_tl >= 0.0 && self.sigma_r >= 0.0) {
            return Err(LedError::invalid("noise standard deviations must be >= 0"));
        }
        if !(self.ratio >= 1.0) {
            return Err(LedError::invalid(format!("ratio must be >= 1, got {}", self.ratio)));
        }
        check_lambda(self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > -0.5 && lambda.is_finite()) {
        return Err(LedError::invalid(format!(
            "Tukey-lambda shape must be > -0.5 for a finite variance, got {lambda}"
        )));
    }
    Ok(())
}

/// Below this magnitude the shape is treated as the logistic limit.
const LOGISTIC_EPS: f64 = 1e-9;

/// Quantile function of the standard Tukey-lambda law.
pub fn tukey_lambda_quantile(p: f64, lambda: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(LedError::invalid(format!("probability must be in (0,1), got {p}")));
    }
    Ok(tl_quantile_unchecked(p, lambda))
}

fn tl_quantile_unchecked(p: f64, lambda: f64) -> f64 {
    if lambda.abs() < LOGISTIC_EPS {
        (p / (1.0 - p)).ln()
    } else {
        (p.powf(lambda) - (1.0 - p).powf(lambda)) / lambda
    }
}

/// Standard deviation of the standard Tukey-lambda law.
pub fn tukey_lambda_std(lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if lambda.abs() < LOGISTIC_EPS {
        return Ok(std::f64::consts::PI / 3f64.sqrt());
    }
    // Var = 2 (1/(2l+1) - B(l+1,l+1)) / l^2 = -2 expm1(h) / (l^2 (1+2l))
    // with h = 2 lnG(1+l) - lnG(1+2l), which vanishes like l^2.
    let h = if lambda.abs() < 0.05 {
        log_gamma_gap_series(lambda)
    } else {
        2.0 * libm::lgamma(1.0 + lambda) - libm::lgamma(1.0 + 2.0 * lambda)
    };
    let var = -2.0 * h.exp_m1() / (lambda * lambda * (1.0 + 2.0 * lambda));
    Ok(var.sqrt())
}

/// `2 lnG(1+l) - lnG(1+2l)` from the zeta series of `lnG(1+x)`.
fn log_gamma_gap_series(lambda: f64) -> f64 {
    #[allow(clippy::excessive_precision)]
    const ZETA: [f64; 19] = [
        1.644934066848226436,
        1.202056903159594285,
        1.082323233711138192,
        1.036927755143369926,
        1.01734306198444914,
        1.008349277381922827,
        1.004077356197944339,
        1.002008392826082214,
        1.000994575127818085,
        1.000494188604119465,
        1.000246086553308048,
        1.000122713347578489,
        1.000061248135058705,
        1.00003058823630702,
        1.000015282259408652,
        1.0000076371976379,
        1.000003817293265,
        1.000001908212716554,
        1.000000953962033873,
    ];
    ZETA.iter()
        .enumerate()
        .map(|(i, z)| {
            let k = (i + 2) as i32;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * z / k as f64 * (2.0 - 2f64.powi(k)) * lambda.powi(k)
        })
        .sum()
}

fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Open01.sample(rng)
}

fn fill_read<R: Rng + ?Sized>(
    out: &mut [f64],
    lambda: f64,
    mu_c: f64,
    sigma_tl: f64,
    rng: &mut R,
) -> Result<()> {
    let std = tukey_lambda_std(lambda)?;
    if sigma_tl == 0.0 {
        out.iter_mut().for_each(|v| *v += mu_c);
        return Ok(());
    }
    let scale = sigma_tl / std;
    for v in out.iter_mut() {
        *v += mu_c + scale * tl_quantile_unchecked(open01(rng), lambda);
    }
    Ok(())
}

fn fill_row<R: Rng + ?Sized>(out: &mut [f64], width: usize, sigma_r: f64, rng: &mut R) -> Result<()> {
    if sigma_r == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma_r).map_err(|e| LedError::invalid(e.to_string()))?;
    for row in out.chunks_mut(width) {
        let offset = normal.sample(rng);
        row.iter_mut().for_each(|v| *v += offset);
    }
    Ok(())
}

fn fill_quant<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    for v in out.iter_mut() {
        *v += open01(rng) - 0.5;
    }
}

fn shot_in_place<R: Rng + ?Sized>(values: &mut [f64], k: f64, rng: &mut R) -> Result<()> {
    for v in values.iter_mut() {
        let mean = *v / k;
        *v = if mean == 0.0 {
            0.0
        } else {
            let pois = Poisson::new(mean).map_err(|e| LedError::invalid(e.to_string()))?;
            pois.sample(rng) * k
        };
    }
    Ok(())
}

fn to_tensor<T: Scalar>(dims: &[usize], v: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::new(dims.to_vec(), v.into_iter().map(T::from_f64).collect())
}

/// I.i.d. Tukey-lambda read noise standardized so that `sigma_tl` is the true std.
pub fn sample_read_noise<T: Scalar, R: Rng + ?Sized>(
    dims: &[usize],
    lambda: f64,
    mu_c: f64,
    sigma_tl: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(sigma_tl >= 0.0) {
        return Err(LedError::invalid("sigma_tl must be >= 0"));
    }
    let n = dims.iter().product();
    let mut v = vec![0.0; n];
    fill_read(&mut v, lambda, mu_c, sigma_tl, rng)?;
    to_tensor(dims, v)
}

/// Signal plus shot noise: `Poisson(clean / K) * K` elementwise.
pub fn sample_shot<T: Scalar, R: Rng + ?Sized>(clean_adu: &Tensor<T>, k: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(k > 0.0) {
        return Err(LedError::invalid(format!("K must be > 0, got {k}")));
    }
    let mut v = clean_adu.to_f64_vec();
    if v.iter().any(|&x| !(x >= 0.0)) {
        return Err(LedError::invalid("shot noise input must be non-negative"));
    }
    shot_in_place(&mut v, k, rng)?;
    to_tensor(clean_adu.dims(), v)
}

/// One Gaussian offset per row, broadcast along the row.
pub fn sample_row_noise<T: Scalar, R: Rng + ?Sized>(
    height: usize,
    width: usize,
    sigma_r: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(sigma_r >= 0.0) {
        return Err(LedError::invalid("sigma_r must be >= 0"));
    }
    let mut v = vec![0.0; height * width];
    fill_row(&mut v, width, sigma_r, rng)?;
    to_tensor(&[height, width], v)
}

/// Uniform quantization error on (-1/2, 1/2) ADU.
pub fn sample_quant_noise<T: Scalar, R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let mut v = vec![0.0; dims.iter().product()];
    fill_quant(&mut v, rng);
    to_tensor(dims, v)
}

/// Synthesizes a noisy short exposure in ADU (relative to black) from a
/// normalized clean Bayer plane. The result is not divided by the range.
pub fn synthesize_noisy_adu<T: Scalar, R: Rng + ?Sized>(
    clean_norm: &Tensor<T>,
    instance: &NoiseInstance,
    levels: &SensorLevels,
    rng: &mut R,
) -> Result<Vec<f64>> {
    levels.validate()?;
    instance.validate()?;
    let [_, w] = clean_norm.dims() else {
        return Err(LedError::shape(format!(
            "synthesis works on a single [H,W] Bayer plane, got {:?}",
            clean_norm.dims()
        )));
    };
    let w = *w;
    let range = levels.range();
    let mut v = clean_norm.to_f64_vec();
    if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(LedError::invalid("clean image must lie in [0,1]"));
    }
    v.iter_mut().for_each(|x| *x = *x * range / instance.ratio);
    let on = instance.enabled;
    if on.shot {
        shot_in_place(&mut v, instance.k, rng)?;
    }
    if on.read {
        fill_read(&mut v, instance.lambda, instance.mu_c, instance.sigma_tl, rng)?;
    }
    if on.row {
        fill_row(&mut v, w, instance.sigma_r, rng)?;
    }
    if on.quant {
        fill_quant(&mut v, rng);
    }
    Ok(v)
}

/// `D = I + N` on a normalized `[H,W]` Bayer plane. The output is in the
/// same normalized units (divided by the ADU range) and is not clamped.
pub fn synthesize_noisy<T: Scalar, R: Rng + ?Sized>(
    clean_norm: &Tensor<T>,
    instance: &NoiseInstance,
    levels: &SensorLevels,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let range = levels.range();
    let v = synthesize_noisy_adu(clean_norm, instance, levels, rng)?;
    to_tensor(clean_norm.dims(), v.into_iter().map(|x| x / range).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    fn instance(enabled: NoiseComponents, ratio: f64) -> NoiseInstance {
        NoiseInstance {
            k: 2.0,
            sigma_tl: 3.0,
            sigma_r: 1.0,
            lambda: 0.1,
            mu_c: 0.5,
            ratio,
            enabled,
        }
    }

    #[test]
    fn quantile_examples() {
        for lam in [-0.3, 0.0, 0.14, 1.0, 2.5] {
            assert_eq!(tukey_lambda_quantile(0.5, lam).unwrap(), 0.0);
        }
        assert!((tukey_lambda_quantile(0.75, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((tukey_lambda_quantile(0.9, 0.0).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!((9f64.ln() - 2.19722).abs() < 1e-5);
        assert!(tukey_lambda_quantile(0.0, 0.1).is_err());
        assert!(tukey_lambda_quantile(1.0, 0.1).is_err());
    }

    #[test]
    fn std_closed_forms() {
        let logistic = tukey_lambda_std(0.0).unwrap();
        assert!((logistic - std::f64::consts::PI / 3f64.sqrt()).abs() < 1e-12);
        assert!((logistic - 1.81380).abs() < 1e-5);
        assert!((tukey_lambda_std(1.0).unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // continuity across the logistic limit
        assert!((tukey_lambda_std(1e-6).unwrap() - logistic).abs() < 1e-5);
        // 40-digit reference values on both sides of the series switch
        for (l, want) in [
            (1e-6, 1.813_796_224_982_348_8),
            (0.01, 1.782_889_374_287_511_2),
            (0.049_999_999, 1.668_175_812_998_058_2),
            (0.050_000_001, 1.668_175_807_592_700_3),
        ] {
            assert!((tukey_lambda_std(l).unwrap() - want).abs() < 1e-12, "lambda {l}");
        }
        assert!(tukey_lambda_std(-0.5).is_err());
    }

    #[test]
    fn degenerate_samplers() {
        let mut rng = stream(1, domain::SYNTH, 0);
        let r = sample_read_noise::<f64, _>(&[4, 4], 0.1, 1.25, 0.0, &mut rng).unwrap();
        assert!(r.data().iter().all(|&v| v == 1.25));
        let z = sample_row_noise::<f64, _>(4, 5, 0.0, &mut rng).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let s = sample_shot(&Tensor::<f64>::zeros(&[3, 3]), 4.0, &mut rng).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shot_values_lie_on_gain_lattice() {
        let mut rng = stream(2, domain::SYNTH, 0);
        let k = 2.5;
        let s = sample_shot(&Tensor::<f64>::full(&[50, 50], 40.0), k, &mut rng).unwrap();
        for &v in s.data() {
            let q = v / k;
            assert!((q - q.round()).abs() < 1e-9);
        }
        assert!(sample_shot(&Tensor::<f64>::full(&[2], -1.0), k, &mut rng).is_err());
    }

    #[test]
    fn rows_are_constant_along_width() {
        let mut rng = stream(3, domain::SYNTH, 0);
        let r = sample_row_noise::<f64, _>(20, 7, 3.0, &mut rng).unwrap();
        for row in r.data().chunks(7) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn quant_support_is_open() {
        let mut rng = stream(4, domain::SYNTH, 0);
        let q = sample_quant_noise::<f64, _>(&[100_000], &mut rng).unwrap();
        assert!(q.data().iter().all(|&v| v > -0.5 && v < 0.5));
    }

    #[test]
    fn synthesis_without_noise_is_scaling() {
        let clean = Tensor::<f64>::from_fn(&[4, 6], |i| i as f64 / 23.0);
        let mut rng = stream(5, domain::SYNTH, 0);
        let lv = SensorLevels::default();
        let same = synthesize_noisy(&clean, &instance(NoiseComponents::NONE, 1.0), &lv, &mut rng).unwrap();
        assert!(same.max_abs_diff(&clean) < 1e-15);
        let dim = synthesize_noisy(&clean, &instance(NoiseComponents::NONE, 100.0), &lv, &mut rng).unwrap();
        let expect = clean.map(|v| v / 100.0);
        assert!(dim.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn synthesis_validates_inputs() {
        let lv = SensorLevels::default();
        let mut rng = stream(6, domain::SYNTH, 0);
        let bad = Tensor::<f64>::full(&[2, 2], 1.5);
        assert!(synthesize_noisy(&bad, &instance(NoiseComponents::ALL, 1.0), &lv, &mut rng).is_err());
        let ok = Tensor::<f64>::full(&[2, 2], 0.5);
        let levels = SensorLevels {
            black_level: 10.0,
            white_level: 5.0,
        };
        assert!(synthesize_noisy(&ok, &instance(NoiseComponents::ALL, 1.0), &levels, &mut rng).is_err());
        let mut inst = instance(NoiseComponents::ALL, 1.0);
        inst.lambda = -0.6;
        assert!(synthesize_noisy(&ok, &inst, &lv, &mut rng).is_err());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let clean = Tensor::<f32>::from_fn(&[8, 8], |i| (i as f32 / 64.0).min(1.0));
        let lv = SensorLevels::default();
        let inst = instance(NoiseComponents::ALL, 10.0);
        let a = synthesize_noisy(&clean, &inst, &lv, &mut stream(9, domain::SYNTH, 1)).unwrap();
        let b = synthesize_noisy(&clean, &inst, &lv, &mut stream(9, domain::SYNTH, 1)).unwrap();
        assert_eq!(a, b);
    }
}
