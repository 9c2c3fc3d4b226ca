//! Command implementations. Failures carry the pipeline stage so the
//! process exit code reflects the first failing stage:
//! 1 validation, 2 synthesis, 3 integration, 4 verification.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Result};

use triobs_core::envelopes::{validate_beta, validate_g};
use triobs_core::observer::{switch_plan, PlanSetup};
use triobs_core::rng;
use triobs_core::sim::{
    run_odp_with_schedule, run_sodp, synthesize_for_ball, OdpReport, RunError,
};
use triobs_core::synthesis::GainSchedule;
use triobs_core::verify::{self, CheckResult, LyapunovCase};

use crate::artifacts::{self, CheckDto, CheckResultsFile, FailureFile, ScheduleFile};
use crate::scenario::{Mode, ResolvedScenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Validation,
    Synthesis,
    Integration,
    Verification,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Validation => 1,
            Stage::Synthesis => 2,
            Stage::Integration => 3,
            Stage::Verification => 4,
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} stage failed: {:#}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

fn stage_err(stage: Stage, error: anyhow::Error) -> StageError {
    StageError { stage, error }
}

type StageResult<T> = Result<T, StageError>;

/// Scenario-level validation: decay profile, coupling positivity and bound
/// identity on grids, then the Monte Carlo completeness check.
pub fn validate_scenario(rs: &ResolvedScenario) -> StageResult<()> {
    let sc = &rs.scenario;
    let rep = validate_g(&rs.g_field, sc.run.t0, sc.run.horizon, sc.run.target_precision)
        .map_err(|e| stage_err(Stage::Validation, anyhow!("{e}")))?;
    if !rep.pass {
        return Err(stage_err(
            Stage::Validation,
            anyhow!(
                "decay profile rejected: range violation {:?}, slope violation {:?}, \
                 terminal value {} vs target {}",
                rep.range_violation,
                rep.slope_violation,
                rep.g_end,
                rep.target * rep.target
            ),
        ));
    }
    let s_max = match rs.mode {
        Mode::Odp { big_r } => big_r + 1.0,
        Mode::Sodp => norm(&rs.x0) + 3.0,
    };
    let y_half = rs
        .sys
        .beta(sc.run.horizon, s_max)
        .map_err(|e| stage_err(Stage::Validation, anyhow!("{e}")))?;
    rs.sys
        .validate_on_range((sc.run.t0, sc.run.horizon), (-y_half, y_half), s_max, 33)
        .map_err(|e| stage_err(Stage::Validation, anyhow!("{e}")))?;
    let mc_radius = match rs.mode {
        Mode::Odp { big_r } => big_r,
        Mode::Sodp => norm(&rs.x0).max(1.0),
    };
    let beta_rep = validate_beta(
        &rs.sys,
        mc_radius,
        sc.run.t0,
        sc.run.horizon,
        sc.grids.beta_trials,
        sc.run.step.max(1e-3),
        sc.seed,
    )
    .map_err(|e| stage_err(Stage::Validation, anyhow!("{e}")))?;
    if !beta_rep.pass {
        return Err(stage_err(
            Stage::Validation,
            anyhow!(
                "completeness bound rejected: trajectory witness {:?}, identity witness {:?}",
                beta_rep.witness,
                beta_rep.identity_witness
            ),
        ));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Synthesized schedules for the scenario: one for the fixed-ball mode, one
/// per window for the switching mode (plus switch times and bounds).
pub struct SynthOutput {
    pub schedules: Vec<GainSchedule>,
    pub switch_times: Option<Vec<f64>>,
    pub switch_bounds: Option<Vec<(f64, f64)>>,
    pub truncated: Option<String>,
}

pub fn synthesize_scenario(rs: &ResolvedScenario) -> StageResult<SynthOutput> {
    let setup = rs.run_setup();
    match rs.mode {
        Mode::Odp { big_r } => {
            let schedule = synthesize_for_ball(&rs.sys, &setup, big_r).map_err(|e| match e {
                RunError::Synthesis(se) => stage_err(Stage::Synthesis, anyhow!("{se}")),
                other => stage_err(Stage::Validation, anyhow!("{other}")),
            })?;
            Ok(SynthOutput {
                schedules: vec![schedule],
                switch_times: None,
                switch_bounds: None,
                truncated: None,
            })
        }
        Mode::Sodp => {
            let plan_setup = PlanSetup {
                g_field: &rs.g_field,
                g_is_default: rs.g_is_default,
                big_l: setup.big_l,
                c1: setup.c1,
                c2: setup.c2,
                t0: setup.t0,
                horizon: setup.horizon,
                env_knots: setup.env_knots,
                box_grid: setup.box_grid,
                phi: setup.phi.clone(),
                seed: setup.seed,
            };
            let plan = switch_plan(&rs.sys, &plan_setup)
                .map_err(|e| stage_err(Stage::Synthesis, anyhow!("{e}")))?;
            let bounds = plan.segments.iter().map(|s| (s.xi, s.zeta)).collect();
            Ok(SynthOutput {
                switch_times: Some(plan.times.clone()),
                switch_bounds: Some(bounds),
                truncated: plan.truncated.clone(),
                schedules: plan.segments.into_iter().map(|s| s.schedule).collect(),
            })
        }
    }
}

pub fn cmd_synth(rs: &ResolvedScenario, out_dir: &Path) -> StageResult<PathBuf> {
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    validate_scenario(rs)?;
    timings.insert("validate_s".into(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let synth = synthesize_scenario(rs)?;
    timings.insert("synthesize_s".into(), t.elapsed().as_secs_f64());
    let file = ScheduleFile {
        format_version: artifacts::FORMAT_VERSION,
        scenario: rs.scenario.clone(),
        big_l: rs.scenario.constants.big_l,
        c1: rs.scenario.constants.c1,
        c2: rs.c2,
        seed: rs.scenario.seed,
        schedules: synth.schedules.iter().map(artifacts::schedule_to_dto).collect(),
        switch_times: synth.switch_times,
        switch_bounds: synth.switch_bounds,
        truncated: synth.truncated,
    };
    std::fs::create_dir_all(out_dir)
        .map_err(|e| stage_err(Stage::Validation, anyhow!("{e}")))?;
    let path = artifacts::artifact_path(out_dir, &rs.scenario.name, "schedule.json");
    artifacts::write_json(&path, &file)
        .map_err(|e| stage_err(Stage::Validation, e))?;
    let _ = artifacts::write_timings(out_dir, &rs.scenario.name, &timings);
    Ok(path)
}

/// Outcome of `run`: artifact paths plus the overall pass flag.
pub struct RunOutput {
    pub report_path: PathBuf,
    pub trace_paths: Vec<PathBuf>,
    pub pass: bool,
}

pub fn cmd_run(rs: &ResolvedScenario, out_dir: &Path) -> StageResult<RunOutput> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| stage_err(Stage::Validation, anyhow!("{e}")))?;
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    validate_scenario(rs)?;
    timings.insert("validate_s".into(), t.elapsed().as_secs_f64());
    let setup = rs.run_setup();
    let name = rs.scenario.name.clone();
    match rs.mode {
        Mode::Odp { .. } => {
            let t = Instant::now();
            let schedule = synthesize_scenario(rs)?.schedules.remove_first();
            timings.insert("synthesize_s".into(), t.elapsed().as_secs_f64());
            let t = Instant::now();
            let rep = run_odp_with_schedule(&rs.sys, &setup, &schedule, &rs.x0)
                .map_err(|e| integration_failure(rs, out_dir, &name, e))?;
            timings.insert("integrate_s".into(), t.elapsed().as_secs_f64());
            let trace = artifacts::artifact_path(out_dir, &name, "trace.csv");
            artifacts::write_trace_csv(&trace, rs.sys.dim(), &rep.rows)
                .map_err(|e| stage_err(Stage::Integration, e))?;
            let report_path = artifacts::artifact_path(out_dir, &name, "report.json");
            artifacts::write_json(&report_path, &artifacts::odp_report_file(&rs.scenario, &rep))
                .map_err(|e| stage_err(Stage::Integration, e))?;
            let _ = artifacts::write_timings(out_dir, &name, &timings);
            Ok(RunOutput { report_path, trace_paths: vec![trace], pass: rep.pass })
        }
        Mode::Sodp => {
            let t = Instant::now();
            let rep = run_sodp(&rs.sys, &setup, &rs.x0)
                .map_err(|e| integration_failure(rs, out_dir, &name, e))?;
            timings.insert("run_s".into(), t.elapsed().as_secs_f64());
            let mut traces = Vec::new();
            for seg in &rep.segments {
                let trace =
                    artifacts::artifact_path(out_dir, &name, &format!("seg{}.trace.csv", seg.k));
                artifacts::write_trace_csv(&trace, rs.sys.dim(), &seg.rows)
                    .map_err(|e| stage_err(Stage::Integration, e))?;
                traces.push(trace);
            }
            let report_path = artifacts::artifact_path(out_dir, &name, "report.json");
            artifacts::write_json(&report_path, &artifacts::sodp_report_file(&rs.scenario, &rep))
                .map_err(|e| stage_err(Stage::Integration, e))?;
            let _ = artifacts::write_timings(out_dir, &name, &timings);
            Ok(RunOutput { report_path, trace_paths: traces, pass: rep.pass })
        }
    }
}

trait RemoveFirst<T> {
    fn remove_first(self) -> T;
}

impl<T> RemoveFirst<T> for Vec<T> {
    fn remove_first(mut self) -> T {
        self.remove(0)
    }
}

/// Classify a run failure, writing the deterministic failure artifact.
fn integration_failure(
    rs: &ResolvedScenario,
    out_dir: &Path,
    name: &str,
    e: RunError,
) -> StageError {
    let (stage, kind) = match &e {
        RunError::Synthesis(_) => (Stage::Synthesis, "synthesis"),
        RunError::Sim(_) => (Stage::Integration, "integration"),
        RunError::Precondition(_) => (Stage::Validation, "validation"),
        _ => (Stage::Validation, "validation"),
    };
    let failure = FailureFile {
        format_version: artifacts::FORMAT_VERSION,
        kind: "failure".into(),
        scenario: rs.scenario.clone(),
        stage: kind.into(),
        error: format!("{e}"),
    };
    let _ =
        artifacts::write_json(&artifacts::artifact_path(out_dir, name, "failure.json"), &failure);
    stage_err(stage, anyhow!("{e}"))
}

/// Run the full check suite against the scenario's schedules (loaded from a
/// file or freshly synthesized) and optionally a recorded run report.
pub fn cmd_verify(
    rs: &ResolvedScenario,
    schedule_path: Option<&Path>,
    report_path: Option<&Path>,
    out_dir: &Path,
) -> StageResult<(PathBuf, bool)> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| stage_err(Stage::Validation, anyhow!("{e}")))?;
    let schedules: Vec<GainSchedule> = match schedule_path {
        Some(path) => {
            let file: ScheduleFile =
                artifacts::read_json(path).map_err(|e| stage_err(Stage::Validation, e))?;
            file.schedules
                .iter()
                .map(|dto| {
                    artifacts::dto_to_schedule(
                        dto,
                        &rs.sys,
                        &rs.g_field,
                        file.big_l,
                        file.c1,
                        file.c2,
                        file.seed,
                        rs.scenario.grids.phi_knots,
                    )
                })
                .collect::<Result<_>>()
                .map_err(|e| stage_err(Stage::Validation, e))?
        }
        None => {
            validate_scenario(rs)?;
            synthesize_scenario(rs)?.schedules
        }
    };
    let mut results = run_schedule_checks(rs, &schedules);
    if let Some(path) = report_path {
        let value: serde_json::Value =
            artifacts::read_json(path).map_err(|e| stage_err(Stage::Validation, e))?;
        match value.get("kind").and_then(|k| k.as_str()) {
            Some("odp") => {
                let file: artifacts::OdpReportFile =
                    serde_json::from_value(value).map_err(|e| {
                        stage_err(Stage::Validation, anyhow!("report parse: {e}"))
                    })?;
                results.push(verify::check_envelopes(&artifacts::odp_report_from_file(&file)));
            }
            Some("sodp") => {
                let file: artifacts::SodpReportFile =
                    serde_json::from_value(value).map_err(|e| {
                        stage_err(Stage::Validation, anyhow!("report parse: {e}"))
                    })?;
                results.push(verify::check_switch(&artifacts::sodp_report_from_file(&file)));
            }
            other => {
                return Err(stage_err(
                    Stage::Validation,
                    anyhow!("report kind {other:?} not recognized"),
                ));
            }
        }
    }
    let pass = results.iter().all(|r| r.pass);
    let file = CheckResultsFile {
        format_version: artifacts::FORMAT_VERSION,
        scenario_name: rs.scenario.name.clone(),
        seed: rs.scenario.seed,
        results: results.iter().map(CheckDto::from).collect(),
        pass,
    };
    let path = artifacts::artifact_path(out_dir, &rs.scenario.name, "checks.json");
    artifacts::write_json(&path, &file).map_err(|e| stage_err(Stage::Verification, e))?;
    Ok((path, pass))
}

/// The schedule-level checks: divided-difference algebra, determinant
/// identity, positive definiteness, decrease-rate conditions, and the
/// sampled Lyapunov inequalities per level and final.
pub fn run_schedule_checks(
    rs: &ResolvedScenario,
    schedules: &[GainSchedule],
) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut powers: Vec<u32> = rs.sys.powers().to_vec();
    powers.sort_unstable();
    powers.dedup();
    results.push(verify::check_b_algebra(&powers, 20_000, rs.scenario.seed));
    for (idx, schedule) in schedules.iter().enumerate() {
        let tag = |name: &str| {
            if schedules.len() == 1 {
                name.to_string()
            } else {
                format!("{name}[window {}]", idx + 1)
            }
        };
        let mut det = verify::check_det_identity(schedule);
        det.name = tag(&det.name);
        results.push(det);
        let mut spd = verify::check_spd(schedule);
        spd.name = tag(&spd.name);
        results.push(spd);
        let mut din = verify::check_d_integral(schedule);
        din.name = tag(&din.name);
        results.push(din);
        for k in 2..=schedule.n() {
            let mut r = verify::check_lyapunov(
                schedule,
                LyapunovCase::KernelLevel(k),
                10_000,
                rs.scenario.seed,
            );
            r.name = tag(&r.name);
            results.push(r);
        }
        let mut fin =
            verify::check_lyapunov(schedule, LyapunovCase::Final, 10_000, rs.scenario.seed);
        fin.name = tag(&fin.name);
        results.push(fin);
    }
    results
}

/// Demo pipeline: validate, synthesize (writing the schedule), run (writing
/// trace and report), then verify (writing the check results). Stops at the
/// first failing stage and reports its exit code.
pub fn cmd_demo(rs: &ResolvedScenario, out_dir: &Path) -> StageResult<()> {
    cmd_synth(rs, out_dir)?;
    let run = cmd_run(rs, out_dir)?;
    let schedule_path = artifacts::artifact_path(out_dir, &rs.scenario.name, "schedule.json");
    let (_, checks_pass) =
        cmd_verify(rs, Some(&schedule_path), Some(&run.report_path), out_dir)?;
    if !run.pass {
        return Err(stage_err(
            Stage::Verification,
            anyhow!("run verdicts failed; see {}", run.report_path.display()),
        ));
    }
    if !checks_pass {
        return Err(stage_err(Stage::Verification, anyhow!("check suite reported failures")));
    }
    Ok(())
}

/// Batch runs over seeded initial states in the design ball (fixed-ball
/// mode) or the initial-norm ball (switching mode). The schedule is shared
/// across trials; per-trial artifacts are suffixed by the trial index.
pub fn cmd_batch(rs: &ResolvedScenario, trials: usize, out_dir: &Path) -> StageResult<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| stage_err(Stage::Validation, anyhow!("{e}")))?;
    validate_scenario(rs)?;
    let setup = rs.run_setup();
    let mut rng = rng::substream(rs.scenario.seed, "batch-x0");
    let mut summaries = Vec::new();
    let mut pass_all = true;
    match rs.mode {
        Mode::Odp { big_r } => {
            let schedule = synthesize_scenario(rs)?.schedules.remove_first();
            for trial in 0..trials {
                let x0 = rng::in_ball(&mut rng, rs.sys.dim(), big_r);
                let name = format!("{}.trial{trial}", rs.scenario.name);
                match run_odp_with_schedule(&rs.sys, &setup, &schedule, &x0) {
                    Ok(rep) => {
                        pass_all &= rep.pass;
                        write_trial_odp(rs, out_dir, &name, &rep)?;
                        summaries.push(serde_json::json!({
                            "trial": trial, "x0": x0, "pass": rep.pass,
                            "terminal_error": rep.terminal_error,
                        }));
                    }
                    Err(e) => {
                        pass_all = false;
                        summaries.push(serde_json::json!({
                            "trial": trial, "x0": x0, "pass": false,
                            "error": format!("{e}"),
                        }));
                    }
                }
            }
        }
        Mode::Sodp => {
            let radius = norm(&rs.x0).max(1.0);
            for trial in 0..trials {
                let x0 = rng::in_ball(&mut rng, rs.sys.dim(), radius);
                match run_sodp(&rs.sys, &setup, &x0) {
                    Ok(rep) => {
                        pass_all &= rep.pass;
                        summaries.push(serde_json::json!({
                            "trial": trial, "x0": x0, "pass": rep.pass,
                            "terminal_error": rep.terminal_error,
                        }));
                    }
                    Err(e) => {
                        pass_all = false;
                        summaries.push(serde_json::json!({
                            "trial": trial, "x0": x0, "pass": false,
                            "error": format!("{e}"),
                        }));
                    }
                }
            }
        }
    }
    let path = artifacts::artifact_path(out_dir, &rs.scenario.name, "batch.json");
    artifacts::write_json(
        &path,
        &serde_json::json!({
            "format_version": artifacts::FORMAT_VERSION,
            "scenario": rs.scenario.name,
            "seed": rs.scenario.seed,
            "trials": trials,
            "pass": pass_all,
            "results": summaries,
        }),
    )
    .map_err(|e| stage_err(Stage::Integration, e))?;
    Ok(path)
}

fn write_trial_odp(
    rs: &ResolvedScenario,
    out_dir: &Path,
    name: &str,
    rep: &OdpReport,
) -> StageResult<()> {
    let trace = artifacts::artifact_path(out_dir, name, "trace.csv");
    artifacts::write_trace_csv(&trace, rs.sys.dim(), &rep.rows)
        .map_err(|e| stage_err(Stage::Integration, e))?;
    let report_path = artifacts::artifact_path(out_dir, name, "report.json");
    artifacts::write_json(&report_path, &artifacts::odp_report_file(&rs.scenario, rep))
        .map_err(|e| stage_err(Stage::Integration, e))?;
    Ok(())
}
