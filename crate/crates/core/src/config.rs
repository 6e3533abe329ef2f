//! Experiment configuration: one JSON file determines a whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchoring::AnchorConfig;
use crate::aux_objectives::ObjectiveMode;
use crate::error::{Error, Result};
use crate::mixsim::{EvalGridConfig, ToyCorpusConfig, TrainingMixer};
use crate::model::SystemConfig;
use crate::train::TrainConfig;
use crate::transducer::ModelConfig;

/// Environment variable that overrides `output_dir` on the command line.
pub const OUTPUT_ENV: &str = "ANCHORED_ASR_OUT";

/// A system trained and evaluated under a name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSystem {
    pub name: String,
    pub system: SystemConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub corpus: ToyCorpusConfig,
    pub eval_grid: EvalGridConfig,
    pub mixer: TrainingMixer,
    pub train: TrainConfig,
    pub systems: Vec<NamedSystem>,
    /// System that WERR is measured against.
    pub reference_system: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let anchored = SystemConfig {
            model: model.clone(),
            anchoring: AnchorConfig::default(),
            ..SystemConfig::default()
        };
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            corpus: ToyCorpusConfig::default(),
            eval_grid: EvalGridConfig::default(),
            mixer: TrainingMixer::default(),
            train: TrainConfig::default(),
            systems: vec![
                NamedSystem {
                    name: "baseline".into(),
                    system: SystemConfig::plain(model),
                },
                NamedSystem {
                    name: "anchored".into(),
                    system: anchored.clone(),
                },
                NamedSystem {
                    name: "anchored_vic".into(),
                    system: SystemConfig {
                        objective: ObjectiveMode::Vic,
                        ..anchored
                    },
                },
            ],
            reference_system: "baseline".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.eval_grid.utts_per_cell == 0 {
            return Err(Error::invalid("eval_grid.utts_per_cell must be >= 1"));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.systems {
            if s.name.is_empty() || s.name.contains(['/', '\\']) || s.name.starts_with('.') {
                return Err(Error::invalid(format!("system name `{}` is not a plain file name", s.name)));
            }
            if !names.insert(&s.name) {
                return Err(Error::invalid(format!("system `{}` listed twice", s.name)));
            }
            s.system.validate().map_err(|e| Error::invalid(format!("system `{}`: {e}", s.name)))?;
            let m = &s.system.model;
            if m.d_raw != self.corpus.d_raw || m.vocab_size != self.corpus.vocab_size {
                return Err(Error::invalid(format!(
                    "system `{}`: d_raw/vocab_size ({}/{}) differ from the corpus ({}/{})",
                    s.name, m.d_raw, m.vocab_size, self.corpus.d_raw, self.corpus.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn system(&self, name: &str) -> Result<&SystemConfig> {
        self.systems
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.system)
            .ok_or_else(|| {
                let known: Vec<&str> = self.systems.iter().map(|s| s.name.as_str()).collect();
                Error::invalid(format!("no system `{name}` in config (known: {})", known.join(", ")))
            })
    }

    /// Read a config file; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        crate::mixsim::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::mixsim::write_json(path, self)
    }
}
