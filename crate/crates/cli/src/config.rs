//! Flat `key = value` run configuration with namespaced keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use led_core::camera::{ParameterSpace, SelectionMode, COORDINATES};
use led_core::network::{NetworkConfig, Precision};
use led_core::noise::{NoiseComponents, SensorLevels};
use led_core::repnr::CsaInit;
use led_core::training::{OutOfModelSpec, TrainConfig};

use crate::CliError;

/// Every accepted key with its default value.
fn defaults() -> BTreeMap<String, String> {
    let mut d = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        d.insert(k.to_string(), v);
    };
    let space = ParameterSpace::default();
    for (name, r) in COORDINATES.iter().zip(space.ranges) {
        put(&format!("space.{name}_lo"), r.lo.to_string());
        put(&format!("space.{name}_hi"), r.hi.to_string());
    }
    let net = NetworkConfig::default();
    put("net.base_width", net.base_width.to_string());
    put("net.stages", net.stages.to_string());
    put("net.leaky_slope", net.leaky_slope.to_string());
    put("net.precision", "single".into());

    let pre = TrainConfig::pretrain_default();
    put("train.iterations", pre.iterations.to_string());
    put("train.batch_size", pre.batch_size.to_string());
    put("train.patch_size", pre.patch_size.to_string());
    put("train.lr_initial", pre.lr_initial.to_string());
    put("train.lr_schedule", format_schedule(&pre.lr_schedule));
    put("train.ratios", format_list(&pre.ratios));

    let csa = TrainConfig::finetune_csa_default();
    let omnr = TrainConfig::finetune_omnr_default();
    put("finetune.csa_iterations", csa.iterations.to_string());
    put("finetune.csa_lr", csa.lr_initial.to_string());
    put("finetune.omnr_iterations", omnr.iterations.to_string());
    put("finetune.omnr_lr", omnr.lr_initial.to_string());
    put("finetune.batch_size", csa.batch_size.to_string());
    put("finetune.patch_size", csa.patch_size.to_string());
    put("finetune.pairs_per_ratio", "2".into());
    put("finetune.init", "average".into());
    put("finetune.select", "spread".into());

    let levels = SensorLevels::default();
    put("noise.black_level", levels.black_level.to_string());
    put("noise.white_level", levels.white_level.to_string());
    for c in ["shot", "read", "row", "quant"] {
        put(&format!("noise.{c}"), "true".into());
    }

    let oom = OutOfModelSpec::default();
    put("oom.fixed_pattern_amplitude", oom.fixed_pattern_amplitude.to_string());
    put("oom.banding_period", oom.banding_period.to_string());
    put("oom.banding_amplitude", oom.banding_amplitude.to_string());
    put("oom.seed", oom.seed.to_string());
    d
}

fn format_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn format_schedule(v: &[(f64, f64)]) -> String {
    v.iter().map(|(f, r)| format!("{f}:{r}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: defaults() }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
            cfg.merge_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    /// The fully resolved configuration, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key has a default")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| CliError::Usage(format!("config {key} = {v:?} does not parse")))
    }

    fn list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        parse_list(self.raw(key)).map_err(|e| CliError::Usage(format!("config {key}: {e}")))
    }

    fn schedule(&self, key: &str) -> Result<Vec<(f64, f64)>, CliError> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|item| {
                let (f, r) = item
                    .split_once(':')
                    .ok_or_else(|| CliError::Usage(format!("config {key}: {item:?} is not fraction:rate")))?;
                let f = f.trim().parse().map_err(|_| CliError::Usage(format!("config {key}: bad fraction {f:?}")))?;
                let r = r.trim().parse().map_err(|_| CliError::Usage(format!("config {key}: bad rate {r:?}")))?;
                Ok((f, r))
            })
            .collect()
    }

    pub fn space(&self) -> Result<ParameterSpace, CliError> {
        let mut space = ParameterSpace::default();
        for (i, name) in COORDINATES.iter().enumerate() {
            space.ranges[i].lo = self.get(&format!("space.{name}_lo"))?;
            space.ranges[i].hi = self.get(&format!("space.{name}_hi"))?;
        }
        space.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(space)
    }

    pub fn network(&self) -> Result<NetworkConfig, CliError> {
        let precision: Precision = self.raw("net.precision").parse().map_err(|e| CliError::Usage(format!("{e}")))?;
        let cfg = NetworkConfig {
            base_width: self.get("net.base_width")?,
            stages: self.get("net.stages")?,
            leaky_slope: self.get("net.leaky_slope")?,
            precision,
            ..NetworkConfig::default()
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn pretrain(&self, seed: u64) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            iterations: self.get("train.iterations")?,
            batch_size: self.get("train.batch_size")?,
            patch_size: self.get("train.patch_size")?,
            lr_initial: self.get("train.lr_initial")?,
            lr_schedule: self.schedule("train.lr_schedule")?,
            ratios: self.list("train.ratios")?,
            seed,
        })
    }

    /// Phase-1 and phase-2 fine-tuning configs.
    pub fn finetune(&self, seed: u64) -> Result<(TrainConfig, TrainConfig), CliError> {
        let base = TrainConfig {
            batch_size: self.get("finetune.batch_size")?,
            patch_size: self.get("finetune.patch_size")?,
            ratios: self.list("train.ratios")?,
            seed,
            ..TrainConfig::finetune_csa_default()
        };
        let csa = TrainConfig {
            iterations: self.get("finetune.csa_iterations")?,
            lr_initial: self.get("finetune.csa_lr")?,
            ..base.clone()
        };
        let omnr = TrainConfig {
            iterations: self.get("finetune.omnr_iterations")?,
            lr_initial: self.get("finetune.omnr_lr")?,
            ..base
        };
        Ok((csa, omnr))
    }

    pub fn pairs_per_ratio(&self) -> Result<usize, CliError> {
        self.get("finetune.pairs_per_ratio")
    }

    pub fn csa_init(&self) -> Result<CsaInit, CliError> {
        self.raw("finetune.init").parse().map_err(|e| CliError::Usage(format!("{e}")))
    }

    pub fn selection(&self) -> Result<SelectionMode, CliError> {
        self.raw("finetune.select").parse().map_err(|e| CliError::Usage(format!("{e}")))
    }

    pub fn levels(&self) -> Result<SensorLevels, CliError> {
        SensorLevels::new(self.get("noise.black_level")?, self.get("noise.white_level")?)
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn components(&self) -> Result<NoiseComponents, CliError> {
        Ok(NoiseComponents {
            shot: self.get("noise.shot")?,
            read: self.get("noise.read")?,
            row: self.get("noise.row")?,
            quant: self.get("noise.quant")?,
        })
    }

    pub fn oom(&self) -> Result<OutOfModelSpec, CliError> {
        let spec = OutOfModelSpec {
            fixed_pattern_amplitude: self.get("oom.fixed_pattern_amplitude")?,
            banding_period: self.get("oom.banding_period")?,
            banding_amplitude: self.get("oom.banding_amplitude")?,
            seed: self.get("oom.seed")?,
        };
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(spec)
    }
}

/// Parses `100,250,300`.
pub fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("{s:?} is not a number")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_overrides_merge_in_order() {
        let mut cfg = RunConfig::default();
        cfg.merge_text("# comment\nnet.base_width = 8  # trailing\n\ntrain.ratios=100,300\n", "t")
            .unwrap();
        assert_eq!(cfg.network().unwrap().base_width, 8);
        assert_eq!(cfg.pretrain(0).unwrap().ratios, vec![100.0, 300.0]);
        cfg.set("net.base_width", "4").unwrap();
        assert_eq!(cfg.network().unwrap().base_width, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.merge_text("net.depth = 3", "t").is_err());
        assert!(cfg.set("bogus", "1").is_err());
    }

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.space().unwrap(), ParameterSpace::default());
        assert_eq!(cfg.pretrain(0).unwrap(), TrainConfig::pretrain_default());
        let (a, b) = cfg.finetune(0).unwrap();
        assert_eq!(a.iterations + b.iterations, 1500);
        assert_eq!(cfg.oom().unwrap(), OutOfModelSpec::default());
        assert!(cfg.render().contains("space.k_min_lo = 0.05"));
    }
}
