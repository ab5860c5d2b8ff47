//! Run configuration as line-oriented `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; a typo is an error naming the key. [`RunConfig::to_text`] writes
//! every key, so the echoed file reproduces a run on its own.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::SplitConfig;
use crate::error::{Error, Result};
use crate::model::ConvStage;
use crate::train::TrainConfig;

/// Floating-point width used for training and evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("expected f32|f64, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_seed: u64,
    pub data: SplitConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    /// Corpus directory written by `gen-data`. Without one the corpus is
    /// generated in memory from the dataset keys.
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_seed: 0,
            data: SplitConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::default(),
            corpus: None,
            out_dir: PathBuf::from("runs/default"),
            init_checkpoint: None,
            threads: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true|false, got `{value}`"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_stages(key: &str, value: &str) -> Result<Vec<ConvStage>> {
    value
        .split(',')
        .map(|stage| {
            let (c, s) = stage
                .trim()
                .split_once('/')
                .ok_or_else(|| Error::config(key, format!("expected channels/stride, got `{stage}`")))?;
            Ok(ConvStage {
                out_channels: parse(key, c)?,
                stride: parse(key, s)?,
            })
        })
        .collect()
}

fn show_optional<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or(none.to_string(), T::to_string)
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or("none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies every `key = value` line of `text`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "dataset_seed" => self.dataset_seed = parse(key, value)?,
            "train_identities" => d.train_identities = parse(key, value)?,
            "samples_per_identity" => d.samples_per_identity = parse(key, value)?,
            "val_identities" => d.val_identities = parse(key, value)?,
            "test_identities" => d.test_identities = parse(key, value)?,
            "refs_unmasked" => d.refs_unmasked = parse(key, value)?,
            "refs_masked" => d.refs_masked = parse(key, value)?,
            "probes_unmasked" => d.probes_unmasked = parse(key, value)?,
            "probes_masked" => d.probes_masked = parse(key, value)?,
            "coverage" => d.fixed_coverage = parse_optional(key, value, "random")?,

            "seed" => t.seed = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "milestones" => t.milestones = parse_list(key, value)?,
            "max_iterations" => t.max_iterations = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "selection" => t.selection = parse(key, value)?,
            "flip_prob" => t.flip_prob = parse(key, value)?,
            "max_grad_norm" => t.max_grad_norm = parse_optional(key, value, "none")?,
            "freeze_backbone" => t.freeze_backbone = parse_bool(key, value)?,
            "baseline" => {
                if parse_bool(key, value)? {
                    *t = t.clone().into_baseline();
                } else {
                    t.baseline = false;
                }
            }

            "s" => t.loss.s = parse(key, value)?,
            "m" => t.loss.m = parse(key, value)?,
            "lambda" => t.loss.lambda = parse(key, value)?,
            "alpha" => t.loss.alpha = parse(key, value)?,
            "beta" => t.loss.beta = parse(key, value)?,
            "comb_mode" => t.loss.comb_mode = parse(key, value)?,
            "mse_on_normalized" => t.loss.mse_on_normalized = parse_bool(key, value)?,

            "stages" => t.model.stages = parse_stages(key, value)?,
            "recognition_dim" => t.model.recognition_dim = parse(key, value)?,
            "mask_dim" => t.model.mask_dim = parse(key, value)?,

            "precision" => self.precision = parse(key, value)?,
            "corpus" => self.corpus = parse_optional(key, value, "none")?,
            "out_dir" => self.out_dir = parse(key, value)?,
            "init_checkpoint" => self.init_checkpoint = parse_optional(key, value, "none")?,
            "threads" => self.threads = parse_optional(key, value, "auto")?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let l = &t.loss;
        let stages: Vec<String> = t
            .model
            .stages
            .iter()
            .map(|s| format!("{}/{}", s.out_channels, s.stride))
            .collect();
        let milestones: Vec<String> = t.milestones.iter().map(usize::to_string).collect();
        vec![
            ("dataset_seed", self.dataset_seed.to_string()),
            ("train_identities", d.train_identities.to_string()),
            ("samples_per_identity", d.samples_per_identity.to_string()),
            ("val_identities", d.val_identities.to_string()),
            ("test_identities", d.test_identities.to_string()),
            ("refs_unmasked", d.refs_unmasked.to_string()),
            ("refs_masked", d.refs_masked.to_string()),
            ("probes_unmasked", d.probes_unmasked.to_string()),
            ("probes_masked", d.probes_masked.to_string()),
            ("coverage", show_optional(&d.fixed_coverage, "random")),
            ("seed", t.seed.to_string()),
            ("lr", t.lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            (
                "milestones",
                if milestones.is_empty() {
                    "none".to_string()
                } else {
                    milestones.join(",")
                },
            ),
            ("max_iterations", t.max_iterations.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("selection", t.selection.as_str().to_string()),
            ("flip_prob", t.flip_prob.to_string()),
            ("max_grad_norm", show_optional(&t.max_grad_norm, "none")),
            ("freeze_backbone", t.freeze_backbone.to_string()),
            ("baseline", t.baseline.to_string()),
            ("s", l.s.to_string()),
            ("m", l.m.to_string()),
            ("lambda", l.lambda.to_string()),
            ("alpha", l.alpha.to_string()),
            ("beta", l.beta.to_string()),
            ("comb_mode", l.comb_mode.as_str().to_string()),
            ("mse_on_normalized", l.mse_on_normalized.to_string()),
            ("stages", stages.join(",")),
            ("recognition_dim", t.model.recognition_dim.to_string()),
            ("mask_dim", t.model.mask_dim.to_string()),
            ("precision", self.precision.as_str().to_string()),
            ("corpus", show_path(&self.corpus)),
            ("out_dir", self.out_dir.display().to_string()),
            ("init_checkpoint", show_path(&self.init_checkpoint)),
            ("threads", show_optional(&self.threads, "auto")),
        ]
    }

    /// The effective configuration as config-file text.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# focusface effective configuration\n");
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be positive"));
        }
        if self.train.freeze_backbone && self.init_checkpoint.is_none() {
            return Err(Error::config(
                "freeze_backbone",
                "frozen-backbone training requires init_checkpoint",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Selection;
    use crate::loss::CombMode;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_round_trips() {
        let text = "\
# comment
dataset_seed = 7
train_identities = 10
coverage = 0.45
seed = 3
lr = 0.05
milestones = 10,20,30
selection = random
max_grad_norm = none
baseline = true
comb_mode = multiplicative
mse_on_normalized = yes
stages = 4/2,8/1
precision = f32
corpus = /tmp/corpus
init_checkpoint = a.ckpt
threads = 2
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.dataset_seed, 7);
        assert_eq!(cfg.data.fixed_coverage, Some(0.45));
        assert_eq!(cfg.train.milestones, vec![10, 20, 30]);
        assert_eq!(cfg.train.selection, Selection::Random);
        assert_eq!(cfg.train.max_grad_norm, None);
        assert!(cfg.train.baseline && cfg.train.loss.lambda == 0.0 && cfg.train.loss.alpha == 0.0);
        assert_eq!(cfg.train.loss.comb_mode, CombMode::Multiplicative);
        assert_eq!(cfg.train.model.stages.len(), 2);
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.threads, Some(2));
        let echoed = cfg.to_text();
        assert_eq!(RunConfig::parse(&echoed).unwrap(), cfg);
        let keys: Vec<&str> = cfg.entries().iter().map(|(k, _)| *k).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), keys.len());
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let err = RunConfig::parse("learning_rate = 0.1").unwrap_err().to_string();
        assert!(err.contains("learning_rate") && err.contains("unknown"), "{err}");
        let err = RunConfig::parse("lr 0.1").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = RunConfig::parse("batch_size = -3").unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
        let err = RunConfig::parse("stages = 8").unwrap_err().to_string();
        assert!(err.contains("stages"), "{err}");
    }

    #[test]
    fn validation_names_the_key() {
        let cfg = RunConfig::parse("coverage = 0.9").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("coverage"));
        let cfg = RunConfig::parse("freeze_backbone = true").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("init_checkpoint"));
        let cfg = RunConfig::parse("freeze_backbone = true\ninit_checkpoint = x").unwrap();
        assert!(cfg.validate().is_ok());
    }
}
