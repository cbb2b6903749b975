use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ttr_core::sysdyn::{Dubins, Dynamics, State};
use ttr_core::synthesis::SynthesisConfig;
use ttr_core::training::TrainingConfig;
use ttr_core::{Error, Result};

/// System selection. Only the Dubins car is built in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Dubins {
        speed: f64,
        max_turn: f64,
        heading_weight: f64,
    },
}

impl ModelConfig {
    pub fn build(&self) -> Result<Box<dyn Dynamics>> {
        match *self {
            ModelConfig::Dubins {
                speed,
                max_turn,
                heading_weight,
            } => {
                if !(speed > 0.0 && max_turn > 0.0 && heading_weight >= 0.0) {
                    return Err(Error::Config("model: speed and max_turn must be positive".into()));
                }
                Ok(Box::new(Dubins::new(speed, max_turn, heading_weight)))
            }
        }
    }

    pub fn is_unit_dubins(&self) -> bool {
        matches!(*self, ModelConfig::Dubins { speed, max_turn, .. } if speed == 1.0 && max_turn == 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorConfig {
    /// Time between corridor points along each trajectory.
    pub spacing: f64,
    /// Neighbors averaged when reading a value off the corridor. With one,
    /// the value is that of a stored point and so keeps its guarantee.
    pub query_k: usize,
    /// Also trace the warm-up samples. They are as feasible as the trained
    /// ones and fill in the neighborhood of the target.
    #[serde(default = "yes")]
    pub include_warmup: bool,
}

fn yes() -> bool {
    true
}

/// The whole experiment in one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub x_bar: Vec<f64>,
    pub x_t: Vec<f64>,
    pub training: TrainingConfig,
    pub corridor: CorridorConfig,
    pub synthesis: SynthesisConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn dubins_default() -> Self {
        RunConfig {
            model: ModelConfig::Dubins {
                speed: 1.0,
                max_turn: 1.0,
                heading_weight: 1.0,
            },
            x_bar: vec![-10.0, 0.0, 0.0],
            x_t: vec![0.0, 0.0, 0.0],
            training: TrainingConfig::dubins(),
            corridor: CorridorConfig {
                spacing: 0.1,
                query_k: 1,
                include_warmup: true,
            },
            synthesis: SynthesisConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }

    /// Reads `path` (or the built-in defaults when `None`), applies the
    /// `key=value` overrides and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::dubins_default())?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.build()?;
        for (name, v) in [("x_bar", &self.x_bar), ("x_t", &self.x_t)] {
            if v.len() != model.dim() || v.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(format!("{name} must hold {} finite numbers", model.dim())));
            }
        }
        self.training.validate()?;
        self.synthesis.validate()?;
        if !(self.corridor.spacing > 0.0) || self.corridor.query_k == 0 {
            return Err(Error::Config("corridor.spacing and corridor.query_k must be positive".into()));
        }
        Ok(())
    }

    pub fn x_bar(&self) -> State {
        State::from(self.x_bar.clone())
    }

    pub fn x_t(&self) -> State {
        State::from(self.x_t.clone())
    }
}

/// `a.b.c=value`, where the value is parsed as JSON when possible and taken
/// as a string otherwise. The path must already exist.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let mut node = doc;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
