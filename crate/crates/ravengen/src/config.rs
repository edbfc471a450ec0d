//! Flat key=value experiment configuration with dotted namespaces
//! (`trainer.learning_rate = 1e-4`). Unknown keys are rejected so typos
//! fail before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{ProblemSource, RuleSpec, SynthDataset};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataConfig {
    /// Inline synthetic dataset (rules, count, seed).
    Synth(SynthDataset),
    /// Path to a synthetic dataset manifest file.
    Manifest(PathBuf),
    /// Path to a record archive in the public format.
    Archive(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub problems: usize,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            problems: 500,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub trainer: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalSettings,
    /// Whether the config text pinned a seed explicitly.
    pub seed_specified: bool,
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {} is not key = value", lineno + 1)))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

struct Typed {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl Typed {
    fn take(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            Some(v) => v
                .parse::<T>()
                .map_err(|e| Error::config(format!("bad value for {key}: {e}"))),
            None => Ok(default),
        }
    }

    fn leftovers(&self) -> Vec<String> {
        self.map
            .keys()
            .filter(|k| !self.used.contains(*k))
            .cloned()
            .collect()
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses config text, with `key=value` overrides applied on top.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut map = parse_kv(text)?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        let mut t = Typed {
            map,
            used: Default::default(),
        };

        let defaults = TrainConfig::default();
        let seed_specified = t.map.contains_key("trainer.seed");
        let trainer = TrainConfig {
            learning_rate: t.parse("trainer.learning_rate", defaults.learning_rate)?,
            batch_size: t.parse("trainer.batch_size", defaults.batch_size)?,
            phase1_epochs: t.parse("trainer.phase1_epochs", defaults.phase1_epochs)?,
            phase2_epochs: t.parse("trainer.phase2_epochs", defaults.phase2_epochs)?,
            margin_update_period: t.parse("trainer.margin_update_period", defaults.margin_update_period)?,
            initial_margin: t.parse("trainer.initial_margin", defaults.initial_margin)?,
            weights: crate::losses::LossWeights {
                lambda_kl1: t.parse("weights.lambda_kl1", defaults.weights.lambda_kl1)?,
                vae: t.parse("weights.vae", defaults.weights.vae)?,
                cm: t.parse("weights.cm", defaults.weights.cm)?,
                contrast_pos: t.parse("weights.contrast_pos", defaults.weights.contrast_pos)?,
                contrast_neg: t.parse("weights.contrast_neg", defaults.weights.contrast_neg)?,
            },
            ablation: t.parse("trainer.ablation", defaults.ablation)?,
            width_mult: t.parse("trainer.width_mult", defaults.width_mult)?,
            seed: t.parse("trainer.seed", defaults.seed)?,
            epoch_checkpoints: t.parse("trainer.epoch_checkpoints", defaults.epoch_checkpoints)?,
        };
        trainer.validate()?;

        let manifest = t.take("data.manifest");
        let archive = t.take("data.archive");
        let rules = t.take("data.rules");
        let data = match (manifest, archive, rules) {
            (Some(m), None, None) => DataConfig::Manifest(PathBuf::from(m)),
            (None, Some(a), None) => DataConfig::Archive(PathBuf::from(a)),
            (None, None, Some(r)) => {
                let specs = r
                    .split(',')
                    .map(|s| s.trim().parse::<RuleSpec>())
                    .collect::<Result<Vec<_>>>()?;
                let count = t.parse("data.count", 1000usize)?;
                let seed = t.parse("data.seed", trainer.seed)?;
                DataConfig::Synth(SynthDataset::new(specs, count, seed)?)
            }
            (None, None, None) => {
                return Err(Error::config(
                    "config needs one of data.manifest, data.archive or data.rules",
                ))
            }
            _ => {
                return Err(Error::config(
                    "data.manifest, data.archive and data.rules are mutually exclusive",
                ))
            }
        };

        let eval_defaults = EvalSettings::default();
        let eval = EvalSettings {
            problems: t.parse("eval.problems", eval_defaults.problems)?,
            batch_size: t.parse("eval.batch_size", eval_defaults.batch_size)?,
        };

        let leftovers = t.leftovers();
        if !leftovers.is_empty() {
            return Err(Error::config(format!(
                "unknown config keys: {}",
                leftovers.join(", ")
            )));
        }

        Ok(Self {
            trainer,
            data,
            eval,
            seed_specified,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::parse_with_overrides(&std::fs::read_to_string(path)?, overrides)
    }

    /// Opens the configured problem source.
    pub fn open_data(&self) -> Result<Box<dyn ProblemSource>> {
        match &self.data {
            DataConfig::Synth(ds) => Ok(Box::new(ds.clone())),
            DataConfig::Manifest(path) => Ok(Box::new(SynthDataset::load(path)?)),
            DataConfig::Archive(path) => Ok(Box::new(crate::data::load_archive_index(path)?)),
        }
    }

    /// Canonical key=value snapshot of every effective setting.
    pub fn snapshot(&self) -> String {
        let t = &self.trainer;
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        push("trainer.learning_rate", t.learning_rate.to_string());
        push("trainer.batch_size", t.batch_size.to_string());
        push("trainer.phase1_epochs", t.phase1_epochs.to_string());
        push("trainer.phase2_epochs", t.phase2_epochs.to_string());
        push(
            "trainer.margin_update_period",
            t.margin_update_period.to_string(),
        );
        push("trainer.initial_margin", t.initial_margin.to_string());
        push("trainer.ablation", t.ablation.to_string());
        push("trainer.width_mult", t.width_mult.to_string());
        push("trainer.seed", t.seed.to_string());
        push("trainer.epoch_checkpoints", t.epoch_checkpoints.to_string());
        push("weights.lambda_kl1", t.weights.lambda_kl1.to_string());
        push("weights.vae", t.weights.vae.to_string());
        push("weights.cm", t.weights.cm.to_string());
        push("weights.contrast_pos", t.weights.contrast_pos.to_string());
        push("weights.contrast_neg", t.weights.contrast_neg.to_string());
        match &self.data {
            DataConfig::Synth(ds) => {
                let rules: Vec<String> = ds.specs.iter().map(|s| s.to_string()).collect();
                push("data.rules", rules.join(", "));
                push("data.count", ds.count.to_string());
                push("data.seed", ds.seed.to_string());
            }
            DataConfig::Manifest(p) => push("data.manifest", p.display().to_string()),
            DataConfig::Archive(p) => push("data.archive", p.display().to_string()),
        }
        push("eval.problems", self.eval.problems.to_string());
        push("eval.batch_size", self.eval.batch_size.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::AblationKind;

    const SAMPLE: &str = "\
# sample experiment
trainer.learning_rate = 2e-4
trainer.batch_size = 8
trainer.ablation = standard_kld
trainer.seed = 11
data.rules = shape.number.constant, shape.number.progression
data.count = 64
";

    #[test]
    fn parses_values_and_defaults() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.trainer.learning_rate, 2e-4);
        assert_eq!(cfg.trainer.batch_size, 8);
        assert_eq!(cfg.trainer.ablation, AblationKind::StandardKld);
        assert_eq!(cfg.trainer.phase1_epochs, 5);
        assert_eq!(cfg.trainer.phase2_epochs, 10);
        assert!(cfg.seed_specified);
        match &cfg.data {
            DataConfig::Synth(ds) => {
                assert_eq!(ds.count, 64);
                assert_eq!(ds.seed, 11, "data seed defaults to the trainer seed");
            }
            other => panic!("unexpected data config {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = ExperimentConfig::parse(&format!("{SAMPLE}\nbogus.key = 1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus.key"));
        assert!(ExperimentConfig::parse("trainer.batch_size = eight\ndata.rules = shape.number.constant\n").is_err());
        assert!(ExperimentConfig::parse("trainer.batch_size = 4\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let cfg = ExperimentConfig::parse_with_overrides(
            SAMPLE,
            &["trainer.batch_size=4".to_string(), "trainer.seed=99".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.trainer.batch_size, 4);
        assert_eq!(cfg.trainer.seed, 99);
    }

    #[test]
    fn snapshot_is_reparseable_and_stable() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        let snap = cfg.snapshot();
        let again = ExperimentConfig::parse(&snap).unwrap();
        assert_eq!(cfg.trainer, again.trainer);
        assert_eq!(cfg.data, again.data);
        assert_eq!(snap, again.snapshot());
    }
}
