//! `triobs`: synthesize time-varying observer gain schedules for triangular
//! plants, co-simulate plant and observer, and verify every sampled
//! invariant. Exit codes: 0 success, 1 validation, 2 synthesis,
//! 3 integration, 4 verification.

mod artifacts;
mod pipeline;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pipeline::StageError;
use scenario::ResolvedScenario;

#[derive(Parser)]
#[command(name = "triobs", version, about = "Observer synthesis and verification for triangular plants")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a scenario and write its synthesized gain schedule
    Synth {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Synthesize, co-simulate plant and observer, write trace and report
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Run the check suite against a schedule (loaded or re-synthesized) and
    /// optionally a recorded run report
    Verify {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a built-in scenario end to end (synth, run, verify)
    Demo {
        /// one of: example11-odp, chain2-sodp, linear2-odp, linear2-sodp
        name: String,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Monte Carlo batch over seeded initial states
    Batch {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        step: Option<f64>,
    },
}

fn apply_overrides(
    mut rs: ResolvedScenario,
    seed: Option<u64>,
    step: Option<f64>,
) -> ResolvedScenario {
    if let Some(s) = seed {
        rs.scenario.seed = s;
    }
    if let Some(h) = step {
        rs.scenario.run.step = h;
    }
    rs
}

fn load(path: &PathBuf, seed: Option<u64>, step: Option<f64>) -> Result<ResolvedScenario, StageError> {
    scenario::load_scenario(path)
        .map(|rs| apply_overrides(rs, seed, step))
        .map_err(|e| StageError { stage: pipeline::Stage::Validation, error: e })
}

fn load_builtin(name: &str, seed: Option<u64>, step: Option<f64>) -> Result<ResolvedScenario, StageError> {
    let text = scenario::builtin(name).ok_or_else(|| StageError {
        stage: pipeline::Stage::Validation,
        error: anyhow::anyhow!(
            "unknown demo `{name}`; available: {}",
            scenario::BUILTIN_NAMES.join(", ")
        ),
    })?;
    scenario::resolve_scenario_str(text)
        .map(|rs| apply_overrides(rs, seed, step))
        .map_err(|e| StageError { stage: pipeline::Stage::Validation, error: e })
}

fn dispatch(cli: Cli) -> Result<(), StageError> {
    match cli.cmd {
        Cmd::Synth { scenario, out_dir, seed, step } => {
            let rs = load(&scenario, seed, step)?;
            let path = pipeline::cmd_synth(&rs, &out_dir)?;
            println!("schedule written to {}", path.display());
            Ok(())
        }
        Cmd::Run { scenario, out_dir, seed, step } => {
            let rs = load(&scenario, seed, step)?;
            let out = pipeline::cmd_run(&rs, &out_dir)?;
            println!(
                "report written to {} (pass = {})",
                out.report_path.display(),
                out.pass
            );
            if !out.pass {
                return Err(StageError {
                    stage: pipeline::Stage::Verification,
                    error: anyhow::anyhow!("run verdicts failed"),
                });
            }
            Ok(())
        }
        Cmd::Verify { scenario, schedule, report, out_dir, seed } => {
            let rs = load(&scenario, seed, None)?;
            let (path, pass) =
                pipeline::cmd_verify(&rs, schedule.as_deref(), report.as_deref(), &out_dir)?;
            println!("check results written to {} (pass = {pass})", path.display());
            if !pass {
                return Err(StageError {
                    stage: pipeline::Stage::Verification,
                    error: anyhow::anyhow!("one or more checks failed"),
                });
            }
            Ok(())
        }
        Cmd::Demo { name, out_dir, seed, step } => {
            let rs = load_builtin(&name, seed, step)?;
            pipeline::cmd_demo(&rs, &out_dir)?;
            println!("demo `{name}` completed; artifacts in {}", out_dir.display());
            Ok(())
        }
        Cmd::Batch { scenario, trials, out_dir, seed, step } => {
            let rs = load(&scenario, seed, step)?;
            let path = pipeline::cmd_batch(&rs, trials, &out_dir)?;
            println!("batch summary written to {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
