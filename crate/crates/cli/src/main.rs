use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ebm_lab::bridge::NudgeMode;
use ebm_lab::harness::commands::{cmd_nudge, cmd_relax, cmd_sample, cmd_train, CommandOutput};
use ebm_lab::harness::config::{DatasetKind, InitKind, Target, TargetKind};
use ebm_lab::harness::verify::{format_table, run_verify, VerifyOptions};
use ebm_lab::harness::{exit, parse_layers, resolve_config, with_jobs, ConfigError, HarnessError, Overrides};

#[derive(Parser, Debug)]
#[command(name = "ebm-lab", version, about = "Energy-based leaky-integrator network experiments")]
struct Cli {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Layer sizes from output to input, e.g. 2,4,4,3
    #[arg(long, global = true)]
    layers: Option<String>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run only verify checks whose name contains this text
    #[arg(long, global = true)]
    filter: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long, global = true, value_enum)]
    init: Option<InitArg>,
    /// Nudge target: `free`, `random`, or comma-separated values
    #[arg(long, global = true)]
    target: Option<String>,
    /// Load parameters from this file instead of initializing
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Test hook: antisymmetric perturbation seen by the Jacobian-symmetry check
    #[arg(long, global = true, hide = true, default_value_t = 0.0)]
    inject_asymmetry: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Run the invariant suite and print a pass/fail table
    Verify,
    /// Settle to a fixed point with the input clamped
    Relax,
    /// Log a noisy trajectory
    Sample,
    /// Measure nudge-phase layer changes against backprop gradients
    Nudge,
    /// Train with the local update rule
    Train,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    OneShotProbe,
    FreeRun,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum DatasetArg {
    Xor,
    RandomTeacher,
    Identity,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum InitArg {
    Random,
    Zero,
}

fn parse_target(text: &str) -> Result<Target, ConfigError> {
    match text {
        "free" => Ok(Target::Kind(TargetKind::Free)),
        "random" => Ok(Target::Kind(TargetKind::Random)),
        values => values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| ConfigError::new("target", format!("`{}`: {e}", v.trim())))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Target::Values),
    }
}

fn overrides(cli: &Cli) -> Result<Overrides, ConfigError> {
    Ok(Overrides {
        seed: cli.seed,
        epsilon: cli.epsilon,
        sigma: cli.sigma,
        layers: cli.layers.as_deref().map(parse_layers).transpose()?,
        out_dir: cli.out.clone(),
        epochs: cli.epochs,
        nudge_mode: cli.mode.map(|m| match m {
            ModeArg::OneShotProbe => NudgeMode::OneShotProbe,
            ModeArg::FreeRun => NudgeMode::FreeRun,
        }),
        dataset: cli.dataset.map(|d| match d {
            DatasetArg::Xor => DatasetKind::Xor,
            DatasetArg::RandomTeacher => DatasetKind::RandomTeacher,
            DatasetArg::Identity => DatasetKind::Identity,
        }),
        init: cli.init.map(|i| match i {
            InitArg::Random => InitKind::Random,
            InitArg::Zero => InitKind::Zero,
        }),
        target: cli.target.as_deref().map(parse_target).transpose()?,
        params_file: cli.params.clone(),
    })
}

fn run(cli: &Cli) -> Result<i32, HarnessError> {
    let config = resolve_config(cli.config.as_deref(), &overrides(cli)?)?;
    if let Command::Verify = cli.command {
        let options = VerifyOptions {
            filter: cli.filter.clone(),
            seed: config.seed,
            inject_asymmetry: cli.inject_asymmetry,
        };
        let results = with_jobs(cli.jobs, || run_verify(&options))?;
        if results.is_empty() {
            return Err(ConfigError::new("filter", "no check matches").into());
        }
        print!("{}", format_table(&results));
        return Ok(if results.iter().all(|r| r.passed) {
            exit::SUCCESS
        } else {
            exit::INTERNAL
        });
    }
    let command = match cli.command {
        Command::Relax => cmd_relax,
        Command::Sample => cmd_sample,
        Command::Nudge => cmd_nudge,
        Command::Train => cmd_train,
        Command::Verify => unreachable!("handled above"),
    };
    let CommandOutput { files, summary } = with_jobs(cli.jobs, || command(&config))??;
    println!("{summary}");
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(exit::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::BAD_CONFIG } else { exit::SUCCESS };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
