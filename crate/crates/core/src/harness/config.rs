//! Pipeline configuration: TOML or JSON files, dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::annotate::{CoTrainConfig, FitConfig, SelfTrainConfig};
use crate::attacks::AttackSpec;
use crate::error::{Error, Result};
use crate::nets::SgdSchedule;
use crate::robustify::{Method, NamedAttack, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    TwoMoons {
        noise: f64,
    },
    TwoGaussians {
        separation: f64,
        noise: f64,
        #[serde(default = "one")]
        stretch: f64,
        #[serde(default)]
        angle_deg: f64,
    },
    /// Fully labeled training rows to split, and a labeled test file.
    Csv { train: PathBuf, test: PathBuf },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMethod {
    Pretrained,
    SelfTrain,
    Vanilla,
    Deep,
    /// The pool's true labels, optionally corrupted to `label_accuracy`.
    Oracle,
}

impl AnnotationMethod {
    pub const ALL: [AnnotationMethod; 5] = [
        AnnotationMethod::Pretrained,
        AnnotationMethod::SelfTrain,
        AnnotationMethod::Vanilla,
        AnnotationMethod::Deep,
        AnnotationMethod::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnnotationMethod::Pretrained => "pretrained",
            AnnotationMethod::SelfTrain => "self_train",
            AnnotationMethod::Vanilla => "vanilla",
            AnnotationMethod::Deep => "deep",
            AnnotationMethod::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationConfig {
    pub method: AnnotationMethod,
    /// Oracle only: fraction of pool labels left correct.
    #[serde(default)]
    pub label_accuracy: Option<f64>,
    pub fit: FitConfig,
    pub self_train: SelfTrainConfig,
    pub cotrain: CoTrainConfig,
}

/// Hidden layer widths; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub annotator_hidden: Vec<usize>,
    pub robust_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub attacks: Vec<NamedAttack>,
    /// Evaluate the robust network every this many epochs; 0 evaluates only at the end.
    #[serde(default)]
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub replicates: usize,
    pub data: DataConfig,
    pub nets: NetConfig,
    pub annotation: AnnotationConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    /// Initial parameters for the robust network instead of a fresh init.
    #[serde(default)]
    pub warm_start: Option<PathBuf>,
}

fn one_usize() -> usize {
    1
}

impl Default for PipelineConfig {
    /// Deep co-training and TRADES on two moons with eight labels.
    fn default() -> Self {
        let annotation_epochs = 200;
        let schedule = SgdSchedule::step_decay(0.05, 0.9, annotation_epochs);
        let mut cotrain = CoTrainConfig::deep(annotation_epochs);
        cotrain.batch_labeled = 8;
        cotrain.schedule = schedule.clone();
        // features live in [0, 1]; the image-scale radius barely moves a 2-D point
        cotrain.attack = AttackSpec::fgsm(0.1);
        let robust_epochs = 40;
        Self {
            seed: 0,
            replicates: 1,
            data: DataConfig {
                source: DataSource::TwoMoons { noise: 0.1 },
                n_labeled: 8,
                n_unlabeled: 200,
                n_test: 500,
            },
            nets: NetConfig {
                annotator_hidden: vec![32, 32],
                robust_hidden: vec![32, 32],
            },
            annotation: AnnotationConfig {
                method: AnnotationMethod::Deep,
                label_accuracy: None,
                fit: FitConfig {
                    epochs: annotation_epochs,
                    batch: 8,
                    schedule: schedule.clone(),
                },
                self_train: SelfTrainConfig {
                    tau: 0.95,
                    rounds: 10,
                    epochs_per_round: annotation_epochs,
                    batch: 8,
                    schedule,
                },
                cotrain,
            },
            trainer: TrainerConfig {
                method: Method::Trades,
                trades_lambda: 1.0,
                attack: AttackSpec::pgd(0.031, 0.007, 10).with_random_start(true),
                epochs: robust_epochs,
                batch: 32,
                schedule: SgdSchedule::step_decay(0.05, 0.9, robust_epochs),
                seed: 0,
            },
            eval: EvalConfig {
                attacks: vec![NamedAttack::pgd(0.031, 0.003, 5), NamedAttack::pgd(0.031, 0.003, 20)],
                every: 0,
            },
            warm_start: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::config("replicates must be at least 1"));
        }
        let d = &self.data;
        if d.n_labeled == 0 {
            return Err(Error::config("n_labeled must be at least 1"));
        }
        if d.n_test == 0 && !matches!(d.source, DataSource::Csv { .. }) {
            return Err(Error::config("n_test must be at least 1"));
        }
        match d.source {
            DataSource::TwoMoons { noise } if !(noise >= 0.0) => {
                return Err(Error::config("data noise must be non-negative"));
            }
            DataSource::TwoGaussians {
                separation,
                noise,
                stretch,
                ..
            } if !(separation >= 0.0 && noise >= 0.0 && stretch >= 1.0) => {
                return Err(Error::config("invalid two_gaussians geometry"));
            }
            _ => {}
        }
        if self.nets.annotator_hidden.contains(&0) || self.nets.robust_hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        let a = &self.annotation;
        match a.method {
            AnnotationMethod::Pretrained => a.fit.validate()?,
            AnnotationMethod::SelfTrain => a.self_train.validate()?,
            AnnotationMethod::Vanilla | AnnotationMethod::Deep => a.cotrain.validate()?,
            AnnotationMethod::Oracle => {}
        }
        if let Some(acc) = a.label_accuracy {
            if a.method != AnnotationMethod::Oracle {
                return Err(Error::config("label_accuracy applies to the oracle annotator only"));
            }
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::config("label_accuracy must lie in [0, 1]"));
            }
        }
        self.trainer.validate()?;
        for attack in &self.eval.attacks {
            attack.spec.validate()?;
        }
        Ok(())
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes to JSON")
    }

    /// Replaces the value at a dotted path such as `annotation.cotrain.lambda1`.
    /// The new value is parsed as JSON, falling back to a bare string.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set_value(path, value)
    }

    pub fn set_value(&mut self, path: &str, value: Value) -> Result<()> {
        let mut root = self.to_value();
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(key),
                Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::config(format!("unknown config path `{path}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(root).map_err(|e| Error::config(format!("`{path}`: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let toml_text = cfg.to_toml().unwrap();
        assert_eq!(toml::from_str::<PipelineConfig>(&toml_text).unwrap(), cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_overrides(&["annotation.cotrain.lambda1=2.5", "annotation.method=oracle", "data.n_unlabeled=50"])
            .unwrap();
        assert_eq!(cfg.annotation.cotrain.lambda1, 2.5);
        assert_eq!(cfg.annotation.method, AnnotationMethod::Oracle);
        assert_eq!(cfg.data.n_unlabeled, 50);
        cfg.set("annotation.label_accuracy", "0.8").unwrap();
        assert_eq!(cfg.annotation.label_accuracy, Some(0.8));
        cfg.set("eval.attacks.0.steps", "7").unwrap();
        assert_eq!(cfg.eval.attacks[0].spec.steps, 7);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.set("annotation.nope", "1").is_err());
        assert!(cfg.set("data.n_unlabeled", "\"many\"").is_err());
        assert!(cfg.apply_overrides(&["seed"]).is_err());
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn validation_catches_misuse() {
        let mut cfg = PipelineConfig::default();
        cfg.annotation.label_accuracy = Some(0.9);
        assert!(cfg.validate().is_err());
        cfg.annotation.method = AnnotationMethod::Oracle;
        cfg.validate().unwrap();
        cfg.annotation.label_accuracy = Some(1.5);
        assert!(cfg.validate().is_err());
    }
}
