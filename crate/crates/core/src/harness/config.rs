//! Run configuration: TOML file, command-line overrides, validation and echo.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{NudgeExperimentConfig, NudgeMode};
use crate::dynamics::DynamicsConfig;
use crate::learning::LearningConfig;
use crate::model::{HardSigmoid, LayeredTopology};

/// File name of the resolved-config echo written into every output directory.
pub const ECHO_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Xor,
    RandomTeacher,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Uniform in `[-0.4, 0.4]` from the run seed.
    Random,
    /// The free-phase output itself (zero error).
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Kind(TargetKind),
    Values(Vec<f64>),
}

/// Everything a command needs, with defaults for every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Layer sizes from the output layer to the input layer.
    pub layers: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub tolerance: f64,
    pub max_steps: usize,
    pub nudge_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub nudge_mode: NudgeMode,
    pub num_layers_to_check: usize,
    pub kink_margin: f64,
    pub base_rate: f64,
    pub per_layer_rescale: bool,
    pub symmetrize_updates: bool,
    pub update_biases: bool,
    pub dataset: DatasetKind,
    pub dataset_size: usize,
    pub init: InitKind,
    pub params_file: Option<PathBuf>,
    /// Clamped input for relax, sample and nudge. Drawn from the seed when absent.
    pub input: Option<Vec<f64>>,
    pub target: Target,
    pub sample_steps: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dynamics = DynamicsConfig::default();
        let learning = LearningConfig::default();
        let nudge = NudgeExperimentConfig::default();
        RunConfig {
            layers: vec![2, 4, 4, 3],
            beta1: -0.5,
            beta2: 0.5,
            epsilon: dynamics.epsilon,
            sigma: dynamics.sigma,
            tolerance: dynamics.tolerance,
            max_steps: dynamics.max_steps,
            nudge_steps: learning.nudge_steps,
            epochs: learning.epochs,
            seed: dynamics.seed,
            nudge_mode: nudge.mode,
            num_layers_to_check: nudge.num_layers_to_check,
            kink_margin: nudge.kink_margin,
            base_rate: learning.base_rate,
            per_layer_rescale: learning.per_layer_rescale,
            symmetrize_updates: learning.symmetrize_updates,
            update_biases: learning.update_biases,
            dataset: DatasetKind::RandomTeacher,
            dataset_size: 64,
            init: InitKind::Random,
            params_file: None,
            input: None,
            target: Target::Kind(TargetKind::Random),
            sample_steps: 1000,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub layers: Option<Vec<usize>>,
    pub out_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub nudge_mode: Option<NudgeMode>,
    pub dataset: Option<DatasetKind>,
    pub init: Option<InitKind>,
    pub target: Option<Target>,
    pub params_file: Option<PathBuf>,
}

/// Parses `a,b,c` into layer sizes.
pub fn parse_layers(text: &str) -> Result<Vec<usize>, ConfigError> {
    let layers = text
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|e| ConfigError::new("layers", format!("`{}`: {e}", part.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    LayeredTopology::new(layers.clone()).map_err(|e| ConfigError::new("layers", e.to_string()))?;
    Ok(layers)
}

/// Parses TOML text (empty means all defaults) and validates the result.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let config = deserialize(text)?;
    config.validate()?;
    Ok(config)
}

/// File (if any) first, then overrides, then validation.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| ConfigError::new("config", format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut config = deserialize(&text)?;
    config.apply(overrides);
    config.validate()?;
    Ok(config)
}

/// Deserializes without validating. On failure the error names the first
/// key that cannot be read on its own.
fn deserialize(text: &str) -> Result<RunConfig, ConfigError> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| ConfigError::new("<file>", e.message().trim().to_string()))?;
    match toml::Value::Table(table.clone()).try_into::<RunConfig>() {
        Ok(config) => Ok(config),
        Err(whole) => {
            for (key, value) in &table {
                let mut single = toml::Table::new();
                single.insert(key.clone(), value.clone());
                if let Err(e) = toml::Value::Table(single).try_into::<RunConfig>() {
                    return Err(ConfigError::new(key.clone(), e.message().trim().to_string()));
                }
            }
            Err(ConfigError::new("<file>", whole.message().trim().to_string()))
        }
    }
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.epsilon {
            self.epsilon = v;
        }
        if let Some(v) = o.sigma {
            self.sigma = v;
        }
        if let Some(v) = &o.layers {
            self.layers = v.clone();
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        if let Some(v) = o.nudge_mode {
            self.nudge_mode = v;
        }
        if let Some(v) = o.dataset {
            self.dataset = v;
        }
        if let Some(v) = o.init {
            self.init = v;
        }
        if let Some(v) = &o.target {
            self.target = v.clone();
        }
        if let Some(v) = &o.params_file {
            self.params_file = Some(v.clone());
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let topology = self.topology()?;
        self.nonlinearity()?;
        self.dynamics()
            .validate()
            .map_err(|e| ConfigError::new(dynamics_field(&e.to_string()), e.to_string()))?;
        self.nudge()
            .validate()
            .map_err(|e| ConfigError::new(nudge_field(&e.to_string()), e.to_string()))?;
        self.learning()
            .validate()
            .map_err(|e| ConfigError::new(learning_field(&e.to_string()), e.to_string()))?;
        if i64::try_from(self.seed).is_err() {
            return Err(ConfigError::new("seed", "must fit in a signed 64-bit integer"));
        }
        if self.num_layers_to_check == 0 {
            return Err(ConfigError::new("num_layers_to_check", "must be >= 1"));
        }
        if self.dataset_size == 0 {
            return Err(ConfigError::new("dataset_size", "must be >= 1"));
        }
        if self.sample_steps == 0 {
            return Err(ConfigError::new("sample_steps", "must be >= 1"));
        }
        let n_in = topology.layer_size(topology.input_layer());
        let n_out = topology.layer_size(topology.output_layer());
        if self.dataset == DatasetKind::Xor && (n_in != 2 || n_out != 1) {
            return Err(ConfigError::new(
                "dataset",
                format!("xor needs 2 inputs and 1 output, layers give {n_in} and {n_out}"),
            ));
        }
        if let Some(x) = &self.input {
            if x.len() != n_in {
                return Err(ConfigError::new("input", format!("expected {n_in} values, found {}", x.len())));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ConfigError::new("input", "values must be finite"));
            }
        }
        if let Target::Values(y) = &self.target {
            if y.len() != n_out {
                return Err(ConfigError::new("target", format!("expected {n_out} values, found {}", y.len())));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(ConfigError::new("target", "values must be finite"));
            }
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<LayeredTopology, ConfigError> {
        LayeredTopology::new(self.layers.clone()).map_err(|e| ConfigError::new("layers", e.to_string()))
    }

    pub fn nonlinearity(&self) -> Result<HardSigmoid, ConfigError> {
        HardSigmoid::new(self.beta1, self.beta2).map_err(|e| ConfigError::new("beta2", e.to_string()))
    }

    pub fn dynamics(&self) -> DynamicsConfig {
        DynamicsConfig {
            epsilon: self.epsilon,
            sigma: self.sigma,
            tolerance: self.tolerance,
            max_steps: self.max_steps,
            seed: self.seed,
        }
    }

    pub fn nudge(&self) -> NudgeExperimentConfig {
        NudgeExperimentConfig {
            epsilon: self.epsilon,
            mode: self.nudge_mode,
            num_layers_to_check: self.num_layers_to_check,
            kink_margin: self.kink_margin,
        }
    }

    pub fn learning(&self) -> LearningConfig {
        LearningConfig {
            base_rate: self.base_rate,
            per_layer_rescale: self.per_layer_rescale,
            nudge_steps: self.nudge_steps,
            symmetrize_updates: self.symmetrize_updates,
            update_biases: self.update_biases,
            epochs: self.epochs,
            dynamics: self.dynamics(),
        }
    }

    /// TOML text of the fully resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the echo file into `out_dir`, creating it if needed.
    pub fn write_echo(&self) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

fn dynamics_field(message: &str) -> &'static str {
    ["epsilon", "sigma", "tolerance", "max_steps"]
        .into_iter()
        .find(|f| message.contains(f))
        .unwrap_or("dynamics")
}

fn nudge_field(message: &str) -> &'static str {
    if message.contains("kink_margin") {
        "kink_margin"
    } else {
        "epsilon"
    }
}

fn learning_field(message: &str) -> &'static str {
    ["base_rate", "nudge_steps"]
        .into_iter()
        .find(|f| message.contains(f))
        .unwrap_or("learning")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.layers, vec![2, 4, 4, 3]);
        assert_eq!((c.beta1, c.beta2), (-0.5, 0.5));
        assert_eq!(c.epsilon, 0.05);
        assert_eq!(c.sigma, 0.0);
        assert_eq!(c.tolerance, 1e-10);
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn bad_thresholds_name_the_field() {
        let e = parse_config("beta1 = -0.5\nbeta2 = 0.7\n").unwrap_err();
        assert_eq!(e.field, "beta2");
    }

    #[test]
    fn unknown_and_mistyped_fields_are_rejected() {
        let e = parse_config("epsilom = 0.1\n").unwrap_err();
        assert_eq!(e.field, "epsilom");
        let e = parse_config("epsilon = \"x\"\n").unwrap_err();
        assert_eq!(e.field, "epsilon");
        let e = parse_config("epsilon = 2.0\n").unwrap_err();
        assert_eq!(e.field, "epsilon");
    }

    #[test]
    fn flag_wins_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "epsilon = 0.05\n").unwrap();
        let o = Overrides {
            epsilon: Some(0.01),
            ..Default::default()
        };
        assert_eq!(resolve_config(Some(&path), &o).unwrap().epsilon, 0.01);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig {
            layers: vec![1, 4, 2],
            dataset: DatasetKind::Xor,
            target: Target::Values(vec![0.1]),
            input: Some(vec![0.1, -1.0 / 3.0]),
            epsilon: 0.1 + 0.2,
            ..Default::default()
        };
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
        c.target = Target::Kind(TargetKind::Free);
        c.params_file = Some("p.toml".into());
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn xor_needs_matching_layers() {
        let e = parse_config("dataset = \"xor\"\n").unwrap_err();
        assert_eq!(e.field, "dataset");
        assert!(parse_config("dataset = \"xor\"\nlayers = [1, 4, 2]\n").is_ok());
    }

    #[test]
    fn layer_flag_parsing() {
        assert_eq!(parse_layers("2, 4,3").unwrap(), vec![2, 4, 3]);
        assert!(parse_layers("2,4").is_err());
        assert!(parse_layers("2,0,3").is_err());
        assert!(parse_layers("2,x,3").is_err());
        assert!(parse_layers("").is_err());
    }
}
