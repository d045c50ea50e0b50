use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edtrain_core::duplex::model::Variant;
use edtrain_core::harness::{
    build_model, run_compare, run_lifetime, run_sweep, run_train, to_csv, write_report, Experiment,
    ExperimentConfig, HardwareProfile, LatencyMode, SweepAxis,
};
use edtrain_core::scheduler::{
    backward_schedule, forward_schedule, training_step_schedule, NetworkShape,
};
use edtrain_core::Error;

#[derive(Parser)]
#[command(
    name = "edtrain",
    version,
    about = "Reversible on-device training on a modeled eDRAM accelerator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Data lifetimes, refresh counts and utilization of one training step.
    Lifetime(Common),
    /// Print the instruction schedule as text.
    Schedule {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "step")]
        phase: Phase,
    },
    /// Train on the synthetic task and report time and energy to target accuracy.
    Train(Common),
    /// Every variant on every hardware profile, normalized to the best cell.
    Compare(Common),
    /// Re-cost a training step along one hardware axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Overrides the axis in the config.
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Parse and validate a config, then print it with defaults filled in.
    ValidateConfig(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for JSON and CSV reports; reports go to stdout when unset.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long = "temp-c", allow_negative_numbers = true)]
    temp_c: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Analytical,
    Detailed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase {
    Forward,
    Backward,
    Step,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Temperature,
    ArraySize,
    ZeroFraction,
    RefreshCount,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Temperature => SweepAxis::Temperature,
            Axis::ArraySize => SweepAxis::ArraySize,
            Axis::ZeroFraction => SweepAxis::ZeroFraction,
            Axis::RefreshCount => SweepAxis::RefreshCount,
        }
    }
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::OutOfRange(_) => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            let mode = match m {
                Mode::Analytical => LatencyMode::Analytical,
                Mode::Detailed => LatencyMode::Detailed,
            };
            cfg.hardware.latency = mode;
            if let Experiment::Compare { profiles, .. } = &mut cfg.experiment {
                profiles.iter_mut().for_each(|p| p.latency = mode);
            }
        }
        if let Some(t) = self.temp_c {
            cfg.hardware.temperature_c = t;
            if let Experiment::Compare { profiles, .. } = &mut cfg.experiment {
                profiles.iter_mut().for_each(|p| p.temperature_c = t);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> Option<PathBuf> {
        self.out.clone().or_else(|| cfg.output_dir.clone())
    }
}

/// A closed pipe (`| head`) is not an error.
fn stdout(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn emit<T: serde::Serialize>(
    dir: Option<&Path>,
    stem: &str,
    report: &T,
    csv: Option<String>,
) -> Outcome {
    match dir {
        Some(d) => {
            write_report(d, stem, report, csv.as_deref())?;
            eprintln!("wrote {}", d.join(format!("{stem}.json")).display());
        }
        None => stdout(&(serde_json::to_string_pretty(report).map_err(Error::from)? + "\n")),
    }
    Ok(())
}

fn lifetime(c: &Common) -> Outcome {
    let cfg = c.load()?;
    let r = run_lifetime(&cfg)?;
    emit(
        c.out_dir(&cfg).as_deref(),
        "lifetime",
        &r,
        Some(to_csv(&r.layers)?),
    )
}

fn schedule(c: &Common, phase: Phase) -> Outcome {
    let cfg = c.load()?;
    let spec = build_model(&cfg.model, cfg.seed)?;
    let shape = NetworkShape::from_spec(&spec, cfg.train.batch_size);
    let s = match phase {
        Phase::Forward => forward_schedule(&shape)?,
        Phase::Backward => backward_schedule(&shape)?,
        Phase::Step => training_step_schedule(&shape)?,
    };
    let text = s.to_text();
    match c.out_dir(&cfg) {
        Some(d) => {
            std::fs::create_dir_all(&d).map_err(Error::from)?;
            std::fs::write(d.join("schedule.txt"), text).map_err(Error::from)?;
        }
        None => stdout(&text),
    }
    Ok(())
}

fn train(c: &Common) -> Outcome {
    let cfg = c.load()?;
    let r = run_train(&cfg)?;
    emit(
        c.out_dir(&cfg).as_deref(),
        "train",
        &r,
        Some(to_csv(&r.trajectory)?),
    )
}

fn compare(c: &Common) -> Outcome {
    let mut cfg = c.load()?;
    if !matches!(cfg.experiment, Experiment::Compare { .. }) {
        cfg.experiment = Experiment::Compare {
            variants: vec![Variant::DuDnn, Variant::Fi, Variant::Ca, Variant::Bo],
            profiles: vec![
                HardwareProfile {
                    latency: cfg.hardware.latency,
                    temperature_c: cfg.hardware.temperature_c,
                    ..HardwareProfile::hybrid_desk()
                },
                HardwareProfile {
                    latency: cfg.hardware.latency,
                    temperature_c: cfg.hardware.temperature_c,
                    ..HardwareProfile::sram_desk()
                },
            ],
            seeds: vec![cfg.seed],
        };
        cfg.validate()?;
    }
    let r = run_compare(&cfg)?;
    emit(
        c.out_dir(&cfg).as_deref(),
        "comparison",
        &r,
        Some(to_csv(&r.cells)?),
    )?;
    match r.failure {
        Some(f) => Err(Failure::Run(format!("comparison incomplete: {f}"))),
        None => Ok(()),
    }
}

fn sweep(c: &Common, axis: Option<Axis>, values: &[f64]) -> Outcome {
    let mut cfg = c.load()?;
    let (axis, values) = match (&cfg.experiment, axis) {
        (_, Some(a)) => (a.into(), values.to_vec()),
        (Experiment::Sweep { axis, values: v }, None) => (
            *axis,
            if values.is_empty() {
                v.clone()
            } else {
                values.to_vec()
            },
        ),
        _ => {
            return Err(Failure::Config(
                "no sweep axis: pass --axis or use a sweep config".into(),
            ))
        }
    };
    cfg.experiment = Experiment::Sweep { axis, values };
    let r = run_sweep(&cfg)?;
    emit(
        c.out_dir(&cfg).as_deref(),
        "sweep",
        &r,
        Some(to_csv(&r.rows)?),
    )
}

fn validate(c: &Common) -> Outcome {
    let cfg = c.load()?;
    stdout(&(cfg.to_json()? + "\n"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Lifetime(c) => lifetime(c),
        Command::Schedule { common, phase } => schedule(common, *phase),
        Command::Train(c) => train(c),
        Command::Compare(c) => compare(c),
        Command::Sweep {
            common,
            axis,
            values,
        } => sweep(common, *axis, values),
        Command::ValidateConfig(c) => validate(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
