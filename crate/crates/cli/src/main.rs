use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use redundrive::harness::{
    self, collect_dataset, dataset_path, emit_report, read_dataset, run_episode, train_all,
    write_dataset, Checkpoint, CollectError, ExperimentConfig, Policy, RunLog,
};
use redundrive::sensors::{FaultSchedule, SensorChannel};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_CRASHED: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

/// Redundant Bayesian-ensemble driving on a simulated oval track.
#[derive(Parser)]
#[command(name = "redundrive", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration file (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config values, e.g. `--set simulation.collect_laps=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the MPC expert around the track and write one dataset CSV per
    /// sensor channel.
    Collect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Master seed (stamped into dataset headers).
        #[arg(long)]
        seed: u64,
        /// Output directory (datasets land in `<out>/datasets/`).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the configured number of collection laps.
        #[arg(long)]
        laps: Option<u32>,
    },
    /// Train the three learners from collected datasets and write checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Master seed; per-learner seeds derive from it.
        #[arg(long)]
        seed: u64,
        /// Directory holding `datasets/`; checkpoints land in `<out>/checkpoints/`.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Closed-loop run: the ensemble arbiter or a single learner drives under
    /// a fault schedule.
    Drive {
        #[command(flatten)]
        config: ConfigArgs,
        /// Master seed for fault draws and Monte Carlo sampling.
        #[arg(long)]
        seed: u64,
        /// Directory holding `checkpoints/`; the run lands in `<out>/runs/<name>/`.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Who drives: `ensemble`, `state`, `left_rays`, or `right_rays`.
        #[arg(long, default_value = "ensemble")]
        policy: String,
        /// Fault plan: `config` (the configured windows), `clean` (no faults),
        /// or `own` (the driving learner's channel faulted from lap 4 on).
        #[arg(long, default_value = "config")]
        faults: String,
        /// Override the configured lap budget.
        #[arg(long)]
        laps: Option<u32>,
        /// Run directory name; defaults to `<policy>-<faults>-seed<seed>`.
        #[arg(long)]
        run_name: Option<String>,
    },
    /// Analyze a run directory into usage tables, trajectory segments, and a
    /// summary JSON.
    Report {
        /// A run directory written by `drive`.
        #[arg(long)]
        run: PathBuf,
        /// Where to write the report files (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the built-in default configuration as TOML.
    PrintConfig,
}

fn main() -> ExitCode {
    // Exit codes: 0 success, 2 crash-terminated run, 3 config error,
    // 4 training divergence, 1 anything else. Usage errors count as config
    // errors so code 2 stays reserved for crashes.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn parse_overrides(set: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .with_context(|| format!("--set `{kv}` is not KEY=VALUE"))
        })
        .collect()
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, harness::ConfigError> {
    let overrides = match parse_overrides(&args.set) {
        Ok(o) => o,
        Err(e) => {
            return Err(harness::ConfigError::BadOverride {
                key: args.set.join(","),
                reason: e.to_string(),
            })
        }
    };
    match &args.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => {
            let text = ExperimentConfig::default().to_toml_string();
            ExperimentConfig::from_toml_with_overrides(&text, &overrides)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::PrintConfig => {
            print!("{}", ExperimentConfig::default().to_toml_string());
            Ok(EXIT_OK)
        }

        Command::Collect { config, seed, out, laps } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return Ok(EXIT_CONFIG);
                }
            };
            let laps = laps.unwrap_or(cfg.simulation.collect_laps);
            let hash = cfg.content_hash();
            match collect_dataset(&cfg, laps, seed) {
                Ok(output) => {
                    let dir = out.join("datasets");
                    for data in &output.datasets {
                        write_dataset(&dataset_path(&dir, data.channel), data, seed, &hash)?;
                    }
                    println!(
                        "collected {} laps ({} rows/channel) into {}",
                        laps,
                        output.datasets[0].len(),
                        dir.display()
                    );
                    Ok(EXIT_OK)
                }
                Err(CollectError::ExpertCrashed { step, trajectory }) => {
                    let dump = out.join("collect-crash.csv");
                    write_trajectory_dump(&dump, &trajectory)?;
                    eprintln!(
                        "expert crashed at step {step}; trajectory dumped to {}",
                        dump.display()
                    );
                    Ok(EXIT_CRASHED)
                }
                Err(e) => Err(e.into()),
            }
        }

        Command::Train { config, seed, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return Ok(EXIT_CONFIG);
                }
            };
            let datasets: Vec<_> = SensorChannel::ALL
                .iter()
                .map(|&ch| read_dataset(&dataset_path(&out.join("datasets"), ch)))
                .collect::<Result<_, _>>()
                .context("reading datasets (run `collect` first)")?;

            let dir = out.join("checkpoints");
            let mut diverged = false;
            for (channel, result) in train_all(&cfg, &datasets, seed) {
                match result {
                    Ok(ckpt) => {
                        let path = harness::checkpoint_path(&dir, channel);
                        ckpt.save(&path)?;
                        println!(
                            "trained {channel}: final loss {:.4} -> {}",
                            ckpt.loss_history.last().copied().unwrap_or(f64::NAN),
                            path.display()
                        );
                    }
                    Err(e) => {
                        eprintln!("training {channel} failed: {e}");
                        diverged = true;
                    }
                }
            }
            Ok(if diverged { EXIT_DIVERGED } else { EXIT_OK })
        }

        Command::Drive { config, seed, out, policy, faults, laps, run_name } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return Ok(EXIT_CONFIG);
                }
            };
            let policy = match policy.as_str() {
                "ensemble" => Policy::Ensemble,
                other => match SensorChannel::ALL.iter().find(|c| c.name() == other) {
                    Some(&ch) => Policy::Single(ch),
                    None => {
                        eprintln!("config error: unknown policy `{other}`");
                        return Ok(EXIT_CONFIG);
                    }
                },
            };
            let schedule = match faults.as_str() {
                "config" => cfg.fault_schedule(),
                "clean" => FaultSchedule::empty(),
                "own" => match policy {
                    Policy::Single(ch) => cfg.own_fault_schedule(ch, 4.0),
                    Policy::Ensemble => {
                        eprintln!("config error: `--faults own` needs a single-learner policy");
                        return Ok(EXIT_CONFIG);
                    }
                },
                other => {
                    eprintln!("config error: unknown fault plan `{other}`");
                    return Ok(EXIT_CONFIG);
                }
            };

            let dir = out.join("checkpoints");
            let learners: Vec<_> = SensorChannel::ALL
                .iter()
                .map(|&ch| Checkpoint::load(&harness::checkpoint_path(&dir, ch)))
                .collect::<Result<Vec<_>, _>>()
                .context("loading checkpoints (run `train` first)")?
                .iter()
                .map(Checkpoint::to_learner)
                .collect();

            let lap_budget = laps.unwrap_or(cfg.simulation.lap_budget);
            let log = run_episode(&cfg, &learners, policy, &schedule, seed, lap_budget)?;

            let name =
                run_name.unwrap_or_else(|| format!("{}-{faults}-seed{seed}", policy.name()));
            let run_dir = out.join("runs").join(name);
            log.save(&run_dir)?;
            println!(
                "run complete: {} laps, crashed={}, {} steps -> {}",
                log.manifest.laps,
                log.manifest.crashed,
                log.manifest.steps,
                run_dir.display()
            );
            Ok(if log.manifest.crashed { EXIT_CRASHED } else { EXIT_OK })
        }

        Command::Report { run, out } => {
            let log = RunLog::load(&run).context("loading run directory")?;
            let dir = out.unwrap_or_else(|| run.clone());
            emit_report(&log, &dir)?;
            let summary = harness::summarize(&log);
            println!(
                "report for {} (seed {}): {} laps, crashed={} -> {}",
                summary.policy,
                summary.seed,
                summary.laps,
                summary.crashed,
                dir.display()
            );
            Ok(EXIT_OK)
        }
    }
}

fn write_trajectory_dump(path: &Path, rows: &[harness::TrajectoryRow]) -> anyhow::Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", harness::logs::TRAJECTORY_HEADER)?;
    for row in rows {
        writeln!(w, "{}", row.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_subcommands() {
        Cli::try_parse_from(["redundrive", "collect", "--seed", "1"]).unwrap();
        Cli::try_parse_from(["redundrive", "drive", "--seed", "2", "--policy", "state"]).unwrap();
        Cli::try_parse_from(["redundrive", "print-config"]).unwrap();
        assert!(Cli::try_parse_from(["redundrive", "collect"]).is_err(), "--seed is mandatory");
        assert!(Cli::try_parse_from(["redundrive", "train"]).is_err(), "--seed is mandatory");
    }

    #[test]
    fn overrides_must_be_key_value() {
        assert!(parse_overrides(&["a.b=1".into()]).is_ok());
        assert!(parse_overrides(&["nonsense".into()]).is_err());
    }
}
