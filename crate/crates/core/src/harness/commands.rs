//! The relax, sample, nudge and train commands. Each writes the resolved
//! config echo plus its own artifacts into `out_dir`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{ConfigError, InitKind, RunConfig, Target, TargetKind};
use super::dataset::{generate_dataset, random_vector};
use super::params_io::{read_params, write_params};
use super::{stream_rng, HarnessError, Stream};
use crate::bridge::{self, GradientReport};
use crate::dynamics::{self, DynamicsError};
use crate::fmt::float;
use crate::learning::{write_metrics_csv, TrainMetrics, Trainer};
use crate::model::{self, NetworkParams, StateVector, WeightScale};

/// Files written by a command and a one-line summary for the terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Parameters from `params_file`, or a fresh initialization from the seed.
pub fn load_params(config: &RunConfig) -> Result<NetworkParams, HarnessError> {
    let topology = config.topology()?;
    let nonlinearity = config.nonlinearity()?;
    if let Some(path) = &config.params_file {
        let params = read_params(path)?;
        if params.topology() != &topology {
            return Err(ConfigError::new(
                "params_file",
                format!(
                    "file has layers {:?}, config has {:?}",
                    params.topology().layer_sizes(),
                    topology.layer_sizes()
                ),
            )
            .into());
        }
        if params.nonlinearity() != nonlinearity {
            return Err(ConfigError::new("params_file", "file thresholds differ from beta1/beta2").into());
        }
        return Ok(params);
    }
    Ok(match config.init {
        InitKind::Zero => NetworkParams::zeros(topology, nonlinearity),
        InitKind::Random => {
            let mut rng = stream_rng(config.seed, Stream::Init);
            NetworkParams::random(topology, nonlinearity, WeightScale::FanIn, &mut rng)?
        }
    })
}

/// The configured input, or a uniform draw from the seed.
pub fn resolve_input(config: &RunConfig, params: &NetworkParams) -> Vec<f64> {
    let topology = params.topology();
    config.input.clone().unwrap_or_else(|| {
        let mut rng = stream_rng(config.seed, Stream::Input);
        random_vector(topology.layer_size(topology.input_layer()), &mut rng)
    })
}

fn clamped_start(params: &NetworkParams, x: &[f64]) -> Result<StateVector, HarnessError> {
    let topology = params.topology();
    let mut state = StateVector::zeros(topology);
    state.clamp_layer(topology, topology.input_layer(), x)?;
    Ok(state)
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn echo(config: &RunConfig) -> Result<PathBuf, HarnessError> {
    config.write_echo().map_err(|e| HarnessError::io(&config.out_dir, e))
}

fn write_state_csv(path: &Path, params: &NetworkParams, values: &[f64]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["layer", "unit", "value"])?;
    for (index, v) in values.iter().enumerate() {
        let (layer, unit) = params.topology().locate(index);
        w.write_record([layer.to_string(), unit.to_string(), float(*v)])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RelaxSummary {
    converged: bool,
    steps: usize,
    last_step_size: f64,
    fixed_point_residual: f64,
    energy: f64,
}

/// Settles with the input clamped and writes `fixed_point.csv` and `relax.json`.
/// A non-converged run still writes the last state before reporting.
pub fn cmd_relax(config: &RunConfig) -> Result<CommandOutput, HarnessError> {
    let mut files = vec![echo(config)?];
    let params = load_params(config)?;
    let x = resolve_input(config, &params);
    let start = clamped_start(&params, &x)?;
    let (state, converged, steps, last_step_size) = match dynamics::relax(&params, &start, &config.dynamics()) {
        Ok(r) => (dynamics::refine_fixed_point(&params, &r.state)?, true, r.steps, r.residual),
        Err(DynamicsError::NonConvergence {
            steps,
            residual,
            last_state,
        }) => (*last_state, false, steps, residual),
        Err(e) => return Err(e.into()),
    };
    let summary = RelaxSummary {
        converged,
        steps,
        last_step_size,
        fixed_point_residual: dynamics::fixed_point_residual(&params, &state)?,
        energy: model::energy(&params, state.values())?,
    };
    let csv_path = config.out_dir.join("fixed_point.csv");
    write_state_csv(&csv_path, &params, state.values())?;
    let json_path = config.out_dir.join("relax.json");
    write_json(&json_path, &summary)?;
    files.extend([csv_path, json_path]);
    if !converged {
        return Err(HarnessError::NonConvergence {
            steps,
            residual: last_step_size,
        });
    }
    Ok(CommandOutput {
        files,
        summary: format!(
            "converged in {steps} steps, fixed-point residual {:e}",
            summary.fixed_point_residual
        ),
    })
}

/// Runs a logged noisy chain from the clamped zero state and writes `trajectory.csv`.
pub fn cmd_sample(config: &RunConfig) -> Result<CommandOutput, HarnessError> {
    let mut files = vec![echo(config)?];
    let params = load_params(config)?;
    let x = resolve_input(config, &params);
    let start = clamped_start(&params, &x)?;
    let log = dynamics::langevin_chain(&params, &start, &config.dynamics(), config.sample_steps)?;
    let path = config.out_dir.join("trajectory.csv");
    log.write_csv(create(&path)?)?;
    files.push(path);
    let final_energy = model::energy(&params, &log.final_state)?;
    Ok(CommandOutput {
        files,
        summary: format!("{} steps, final energy {final_energy:e}", config.sample_steps),
    })
}

#[derive(Debug, Serialize)]
struct NudgeFile<'a> {
    seed: u64,
    config: &'a RunConfig,
    input: &'a [f64],
    target: &'a [f64],
    report: &'a GradientReport,
}

/// Settles, nudges toward the target and writes `gradient_report.json` and
/// `gradient_report.csv`.
pub fn cmd_nudge(config: &RunConfig) -> Result<CommandOutput, HarnessError> {
    let mut files = vec![echo(config)?];
    let params = load_params(config)?;
    let topology = params.topology();
    let x = resolve_input(config, &params);
    let fixed = bridge::settle(&params, &x, &config.dynamics())?;
    let y: Vec<f64> = match &config.target {
        Target::Values(v) => v.clone(),
        Target::Kind(TargetKind::Free) => fixed.layer(topology, topology.output_layer()).to_vec(),
        Target::Kind(TargetKind::Random) => {
            let mut rng = stream_rng(config.seed, Stream::Target);
            random_vector(topology.layer_size(topology.output_layer()), &mut rng)
        }
    };
    let report = bridge::measure_at_fixed_point(&params, &fixed, &y, &config.nudge())?;
    let json_path = config.out_dir.join("gradient_report.json");
    write_json(
        &json_path,
        &NudgeFile {
            seed: config.seed,
            config,
            input: &x,
            target: &y,
            report: &report,
        },
    )?;
    let csv_path = config.out_dir.join("gradient_report.csv");
    report.write_csv(create(&csv_path)?)?;
    files.extend([json_path, csv_path]);
    Ok(CommandOutput {
        files,
        summary: format!(
            "cost {:e}, max relative error {:e}, min cosine {}, linear regime {}",
            report.cost,
            report.max_relative_error(),
            report.min_cosine(),
            report.linear_regime
        ),
    })
}

/// Trains on the configured dataset and writes `metrics.csv` and `final_params.toml`.
pub fn cmd_train(config: &RunConfig) -> Result<CommandOutput, HarnessError> {
    let mut files = vec![echo(config)?];
    let params = load_params(config)?;
    let (rows, trained) = train(config, params)?;
    let metrics_path = config.out_dir.join("metrics.csv");
    write_metrics_csv(&rows, create(&metrics_path)?)?;
    let params_path = config.out_dir.join("final_params.toml");
    write_params(&trained, &params_path)?;
    files.extend([metrics_path, params_path]);
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    Ok(CommandOutput {
        files,
        summary: format!("mse {:e} -> {:e} over {} epochs", first.mse, last.mse, last.epoch),
    })
}

/// Dataset generation plus the training loop, without file output.
pub fn train(config: &RunConfig, params: NetworkParams) -> Result<(Vec<TrainMetrics>, NetworkParams), HarnessError> {
    let data = generate_dataset(
        config.dataset,
        params.topology(),
        params.nonlinearity(),
        config.dataset_size,
        config.seed,
        &config.dynamics(),
    )?;
    let mut trainer = Trainer::new(params, config.learning())?;
    let rows = trainer.train(&data.examples)?;
    Ok((rows, trainer.into_params()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path) -> RunConfig {
        RunConfig {
            out_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn relax_zero_net_writes_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            init: InitKind::Zero,
            ..config(dir.path())
        };
        cmd_relax(&cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("fixed_point.csv")).unwrap();
        let mut rows = text.lines().skip(1);
        for _ in 0..10 {
            let row = rows.next().unwrap();
            assert!(row.ends_with(",0.0"), "{row}");
        }
    }

    #[test]
    fn nudge_on_free_output_has_zero_gradients() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            target: Target::Kind(TargetKind::Free),
            ..config(dir.path())
        };
        cmd_nudge(&cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("gradient_report.csv")).unwrap();
        for row in text.lines().skip(1) {
            let fields: Vec<&str> = row.split(',').collect();
            let g: f64 = fields[3].parse().unwrap();
            assert_eq!(g, 0.0, "{row}");
        }
    }

    #[test]
    fn mismatched_params_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.toml");
        let other = RunConfig {
            layers: vec![1, 2, 2],
            ..config(dir.path())
        };
        write_params(&load_params(&other).unwrap(), &path).unwrap();
        let cfg = RunConfig {
            params_file: Some(path),
            ..config(dir.path())
        };
        let e = cmd_relax(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), super::super::exit::BAD_CONFIG);
    }

    #[test]
    fn non_convergence_exits_with_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            max_steps: 3,
            ..config(dir.path())
        };
        let e = cmd_relax(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), super::super::exit::NON_CONVERGENCE);
        assert!(dir.path().join("fixed_point.csv").exists());
    }
}
