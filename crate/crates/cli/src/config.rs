//! Flat key-value run configuration.
//!
//! Grammar: `[section]` headers, `key = value` lines, `#` comments, blank
//! lines ignored. Unknown sections or keys, duplicate keys, missing required
//! keys and out-of-range values are all hard errors that name the offender.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use entroprune::dataset::SynthSpec;
use entroprune::dilute::{Granularity, MaskSchedule, OptimizerKind, ScheduleKind, TrainConfig};
use entroprune::nose::TeTarget;
use entroprune::tensor::Dtype;
use entroprune::vit::ViTConfig;

use crate::error::{CliError, Result};

const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed", "out", "dtype"]),
    (
        "model",
        &[
            "image",
            "image_h",
            "image_w",
            "patch",
            "patch_h",
            "patch_w",
            "embed_dim",
            "depth",
            "heads",
            "mlp_ratio",
            "num_classes",
        ],
    ),
    (
        "data",
        &[
            "train",
            "val",
            "classes",
            "per_class",
            "per_class_val",
            "image",
            "noise_std",
        ],
    ),
    (
        "train",
        &[
            "optimizer",
            "lr",
            "min_lr",
            "beta1",
            "beta2",
            "weight_decay",
            "momentum",
            "epochs",
            "batch_size",
        ],
    ),
    (
        "dilute",
        &["schedule", "steps", "granularity", "compensation", "epochs", "lr"],
    ),
    (
        "select",
        &["method", "n", "ratio", "probe_size", "probe_batch", "te_target"],
    ),
];

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(i) => &raw_line[..i],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_string();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(CliError::Config(format!(
                        "line {}: unknown section [{}]",
                        lineno + 1,
                        name
                    )));
                }
                sections.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "line {}: expected `key = value`, got `{}`",
                    lineno + 1,
                    line
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let Some(section) = current.clone() else {
                return Err(CliError::Config(format!(
                    "line {}: key `{}` outside any [section]",
                    lineno + 1,
                    key
                )));
            };
            let allowed = SCHEMA
                .iter()
                .find(|(s, _)| *s == section)
                .map(|(_, keys)| *keys)
                .unwrap();
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "line {}: unknown key `{}` in [{}]",
                    lineno + 1,
                    key,
                    section
                )));
            }
            let entry = sections.get_mut(&section).unwrap();
            if entry.insert(key.clone(), value).is_some() {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key `{}` in [{}]",
                    lineno + 1,
                    key,
                    section
                )));
            }
        }
        Ok(RawConfig { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }

    fn required(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| {
            CliError::Config(format!("missing required key `{key}` in [{section}]"))
        })
    }

    fn parse_with<T: std::str::FromStr>(&self, section: &str, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| {
            CliError::Config(format!(
                "key `{key}` in [{section}]: cannot parse `{v}` as {}",
                std::any::type_name::<T>()
            ))
        })
    }

    fn opt<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            Some(v) => Ok(Some(self.parse_with(section, key, v)?)),
            None => Ok(None),
        }
    }

    fn req<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let v = self.required(section, key)?;
        self.parse_with(section, key, v)
    }
}

/// Fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dtype: Dtype,
    raw: RawConfig,
}

impl RunConfig {
    /// Load and apply command-line overrides (which win over [run] keys).
    pub fn load(
        path: &Path,
        seed_override: Option<u64>,
        out_override: Option<PathBuf>,
        dtype_override: Option<Dtype>,
    ) -> Result<Self> {
        let raw = RawConfig::load(path)?;
        let seed = match seed_override {
            Some(s) => s,
            None => raw.opt::<u64>("run", "seed")?.unwrap_or(0),
        };
        let out = match out_override {
            Some(o) => o,
            None => raw
                .get("run", "out")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs")),
        };
        let dtype = match dtype_override {
            Some(d) => d,
            None => match raw.get("run", "dtype") {
                Some("f32") | None => Dtype::F32,
                Some("f64") => Dtype::F64,
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "key `dtype` in [run]: expected f32 or f64, got `{other}`"
                    )))
                }
            },
        };
        Ok(RunConfig {
            seed,
            out,
            dtype,
            raw,
        })
    }

    pub fn model(&self) -> Result<ViTConfig> {
        let r = &self.raw;
        let square = |side_key: &str, h_key: &str, w_key: &str| -> Result<(usize, usize)> {
            if let Some(side) = r.opt::<usize>("model", side_key)? {
                Ok((side, side))
            } else {
                Ok((r.req("model", h_key)?, r.req("model", w_key)?))
            }
        };
        let config = ViTConfig {
            image_hw: square("image", "image_h", "image_w")?,
            patch_hw: square("patch", "patch_h", "patch_w")?,
            embed_dim: r.req("model", "embed_dim")?,
            depth: r.req("model", "depth")?,
            heads: r.req("model", "heads")?,
            mlp_ratio: r.req("model", "mlp_ratio")?,
            num_classes: r.req("model", "num_classes")?,
            seed: self.seed,
        };
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn train_path(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.raw.required("data", "train")?))
    }

    pub fn val_path(&self) -> Option<PathBuf> {
        self.raw.get("data", "val").map(PathBuf::from)
    }

    pub fn synth_spec(&self) -> Result<(SynthSpec, u32)> {
        let r = &self.raw;
        let spec = SynthSpec {
            classes: r.req("data", "classes")?,
            per_class: r.req("data", "per_class")?,
            image: r.req("data", "image")?,
            noise_std: r.opt("data", "noise_std")?.unwrap_or(0.06),
            seed: self.seed,
        };
        spec.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let per_class_val = r
            .opt::<u32>("data", "per_class_val")?
            .unwrap_or_else(|| (spec.per_class / 5).max(1));
        if per_class_val == 0 {
            return Err(CliError::Config(
                "key `per_class_val` in [data]: must be positive".into(),
            ));
        }
        Ok((spec, per_class_val))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let r = &self.raw;
        let optimizer = match r.get("train", "optimizer").unwrap_or("adamw") {
            "adamw" => OptimizerKind::AdamW,
            "sgd" => OptimizerKind::Sgd,
            other => {
                return Err(CliError::Config(format!(
                    "key `optimizer` in [train]: expected adamw or sgd, got `{other}`"
                )))
            }
        };
        let cfg = TrainConfig {
            optimizer,
            lr: r.opt("train", "lr")?.unwrap_or(1e-3),
            min_lr: r.opt("train", "min_lr")?.unwrap_or(1e-5),
            beta1: r.opt("train", "beta1")?.unwrap_or(0.9),
            beta2: r.opt("train", "beta2")?.unwrap_or(0.999),
            weight_decay: r.opt("train", "weight_decay")?.unwrap_or(0.01),
            momentum: r.opt("train", "momentum")?.unwrap_or(0.9),
            epochs: r.req("train", "epochs")?,
            batch_size: r.req("train", "batch_size")?,
            seed: self.seed,
            compensation: self.dilute_compensation()?,
            selected_layers: Vec::new(),
        };
        if cfg.epochs == 0 || cfg.batch_size == 0 {
            return Err(CliError::Config(
                "[train]: epochs and batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(CliError::Config("[train]: betas must be in [0,1)".into()));
        }
        Ok(cfg)
    }

    pub fn dilute_compensation(&self) -> Result<bool> {
        match self.raw.get("dilute", "compensation") {
            None | Some("on") => Ok(true),
            Some("off") => Ok(false),
            Some(other) => Err(CliError::Config(format!(
                "key `compensation` in [dilute]: expected on or off, got `{other}`"
            ))),
        }
    }

    pub fn dilute_schedule(&self) -> Result<MaskSchedule> {
        let r = &self.raw;
        let kind = match r.get("dilute", "schedule").unwrap_or("linear") {
            "linear" => ScheduleKind::Linear,
            "cosine" => ScheduleKind::Cosine,
            other => {
                return Err(CliError::Config(format!(
                    "key `schedule` in [dilute]: expected linear or cosine, got `{other}`"
                )))
            }
        };
        let granularity = match r.get("dilute", "granularity").unwrap_or("per_iteration") {
            "per_iteration" => Granularity::PerIteration,
            "per_epoch" => Granularity::PerEpoch,
            other => {
                return Err(CliError::Config(format!(
                    "key `granularity` in [dilute]: expected per_iteration or per_epoch, got `{other}`"
                )))
            }
        };
        let steps: u64 = r.req("dilute", "steps")?;
        MaskSchedule::new(kind, steps, granularity).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Training settings for the dilution phase: [train] with optional
    /// [dilute] epoch/lr overrides.
    pub fn dilute_train_config(&self, selected: Vec<usize>) -> Result<TrainConfig> {
        let mut cfg = self.train_config()?;
        if let Some(epochs) = self.raw.opt::<usize>("dilute", "epochs")? {
            cfg.epochs = epochs;
        }
        if let Some(lr) = self.raw.opt::<f64>("dilute", "lr")? {
            cfg.lr = lr;
        }
        cfg.selected_layers = selected;
        Ok(cfg)
    }

    pub fn select_method(&self) -> Result<String> {
        let m = self.raw.get("select", "method").unwrap_or("nose");
        match m {
            "nose" | "random" | "first_n" => Ok(m.to_string()),
            other => Err(CliError::Config(format!(
                "key `method` in [select]: expected nose, random or first_n, got `{other}`"
            ))),
        }
    }

    /// Number of layers to remove: explicit `n`, or `ratio` of depth rounded
    /// to nearest.
    pub fn select_n(&self, depth: usize) -> Result<usize> {
        let n = self.raw.opt::<usize>("select", "n")?;
        let ratio = self.raw.opt::<f64>("select", "ratio")?;
        let n = match (n, ratio) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "[select]: give either `n` or `ratio`, not both".into(),
                ))
            }
            (Some(n), None) => n,
            (None, Some(r)) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(CliError::Config(format!(
                        "key `ratio` in [select]: must be in (0,1], got {r}"
                    )));
                }
                (r * depth as f64).round() as usize
            }
            (None, None) => {
                return Err(CliError::Config(
                    "[select]: missing required key `n` or `ratio`".into(),
                ))
            }
        };
        if n == 0 || n > depth {
            return Err(CliError::Config(format!(
                "[select]: n = {n} out of range for depth {depth}"
            )));
        }
        Ok(n)
    }

    pub fn probe_size(&self) -> Result<usize> {
        Ok(self.raw.opt("select", "probe_size")?.unwrap_or(1024))
    }

    pub fn probe_batch(&self) -> Result<usize> {
        Ok(self.raw.opt("select", "probe_batch")?.unwrap_or(64))
    }

    pub fn te_target(&self) -> Result<TeTarget> {
        match self.raw.get("select", "te_target") {
            None | Some("last_block") => Ok(TeTarget::LastBlockMlp),
            Some("logits") => Ok(TeTarget::Logits),
            Some(other) => Err(CliError::Config(format!(
                "key `te_target` in [select]: expected last_block or logits, got `{other}`"
            ))),
        }
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "\
# demo
[run]
seed = 5
out = runs/demo
dtype = f32

[model]
image = 16
patch = 8
embed_dim = 16
depth = 2
heads = 2
mlp_ratio = 2
num_classes = 4

[data]
train = data/train.eltd
classes = 4
per_class = 8
image = 16

[train]
epochs = 2
batch_size = 8

[dilute]
steps = 10

[select]
ratio = 0.5
";

    fn write_tmp(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn good_config_parses_and_validates() {
        let (_d, p) = write_tmp(GOOD);
        let cfg = RunConfig::load(&p, None, None, None).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.dtype, Dtype::F32);
        let model = cfg.model().unwrap();
        assert_eq!(model.depth, 2);
        assert_eq!(cfg.select_n(model.depth).unwrap(), 1);
        assert_eq!(cfg.probe_size().unwrap(), 1024);
    }

    #[test]
    fn overrides_win() {
        let (_d, p) = write_tmp(GOOD);
        let cfg = RunConfig::load(&p, Some(99), Some(PathBuf::from("elsewhere")), None).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.out, PathBuf::from("elsewhere"));
    }

    #[test]
    fn unknown_key_is_named() {
        let (_d, p) = write_tmp("[model]\nwidth = 3\n");
        let err = RunConfig::load(&p, None, None, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("width"), "{msg}");
    }

    #[test]
    fn unknown_section_rejected() {
        let (_d, p) = write_tmp("[extras]\nx = 1\n");
        assert!(RunConfig::load(&p, None, None, None).is_err());
    }

    #[test]
    fn duplicate_key_rejected() {
        let (_d, p) = write_tmp("[run]\nseed = 1\nseed = 2\n");
        let err = RunConfig::load(&p, None, None, None).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn missing_required_key_is_named() {
        let (_d, p) = write_tmp("[model]\nimage = 16\n");
        let cfg = RunConfig::load(&p, None, None, None).unwrap();
        let err = cfg.model().unwrap_err();
        assert!(err.to_string().contains("patch"), "{err}");
    }

    #[test]
    fn out_of_range_ratio_rejected() {
        let (_d, p) = write_tmp("[select]\nratio = 1.5\n");
        let cfg = RunConfig::load(&p, None, None, None).unwrap();
        let err = cfg.select_n(6).unwrap_err();
        assert!(err.to_string().contains("ratio"));
    }

    #[test]
    fn ratio_rounds_to_nearest() {
        let (_d, p) = write_tmp("[select]\nratio = 0.4\n");
        let cfg = RunConfig::load(&p, None, None, None).unwrap();
        assert_eq!(cfg.select_n(12).unwrap(), 5);
        assert_eq!(cfg.select_n(6).unwrap(), 2);
    }
}
