//! On-disk artifacts: versioned JSON schedule/report/check files and the
//! trace CSV. Every artifact is deterministic for a fixed scenario and seed;
//! wall-clock timings go to a separate `.timings.json` so the main files
//! stay byte-stable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use triobs_core::envelopes::EnvelopeSet;
use triobs_core::expr::ScalarField;
use triobs_core::sim::{OdpReport, SegmentReport, SodpReport, TraceRow, Verdict};
use triobs_core::synthesis::{GainLevel, GainSchedule, SynthParams};
use triobs_core::system::TriangularSystem;
use triobs_core::timefn::{linspace, Dual, Pchip, TimeFunction};

use crate::scenario::Scenario;

pub const FORMAT_VERSION: u32 = 1;

/// A C¹ time function serialized as knot/value/slope triples; reconstruction
/// is the cubic Hermite interpolant through them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampledFn {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    pub slopes: Vec<f64>,
}

impl SampledFn {
    pub fn from_fn(f: &TimeFunction, grid: &[f64]) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        let mut slopes = Vec::with_capacity(grid.len());
        for &t in grid {
            let d = f.dual(t);
            values.push(d.v);
            slopes.push(d.d);
        }
        SampledFn { knots: grid.to_vec(), values, slopes }
    }

    pub fn to_fn(&self) -> TimeFunction {
        TimeFunction::from_pchip(Pchip::with_slopes(
            self.knots.clone(),
            self.values.clone(),
            self.slopes.clone(),
        ))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelDto {
    pub k: usize,
    pub m: u32,
    pub vartheta: f64,
    pub corner: SampledFn,
    pub border: SampledFn,
    pub d: SampledFn,
    pub big_m: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleDto {
    pub big_r: f64,
    pub xi: f64,
    pub t0: f64,
    pub horizon: f64,
    pub levels: Vec<LevelDto>,
    pub phi_inductive: Vec<SampledFn>,
    pub dbar_final: SampledFn,
    pub phi_final: SampledFn,
    pub sigma: SampledFn,
    pub w: SampledFn,
    pub beta_r: SampledFn,
}

/// Schedule file: constants, knot grids and matrix-defining samples, for
/// reuse by `run`/`verify`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub format_version: u32,
    pub scenario: Scenario,
    pub big_l: f64,
    pub c1: f64,
    pub c2: f64,
    pub seed: u64,
    /// fixed-ball schedule, or one schedule per switching window
    pub schedules: Vec<ScheduleDto>,
    /// switching data when applicable: switch times and (xi, zeta) pairs
    pub switch_times: Option<Vec<f64>>,
    pub switch_bounds: Option<Vec<(f64, f64)>>,
    pub truncated: Option<String>,
}

fn sample_grid(params: &SynthParams) -> Vec<f64> {
    linspace(params.t0, params.horizon, (params.knots * 4).max(129))
}

pub fn schedule_to_dto(s: &GainSchedule) -> ScheduleDto {
    let grid = sample_grid(&s.params);
    ScheduleDto {
        big_r: s.params.big_r,
        xi: s.params.xi,
        t0: s.params.t0,
        horizon: s.params.horizon,
        levels: s
            .levels
            .iter()
            .map(|l| LevelDto {
                k: l.k,
                m: l.m,
                vartheta: l.vartheta,
                corner: SampledFn::from_fn(&l.corner, &grid),
                border: SampledFn::from_fn(&l.border, &grid),
                d: SampledFn::from_fn(&l.d, &grid),
                big_m: l.big_m,
                tau: l.tau,
            })
            .collect(),
        phi_inductive: s.phis.iter().map(|p| SampledFn::from_fn(p, &grid)).collect(),
        dbar_final: SampledFn::from_fn(&s.dbar_final, &grid),
        phi_final: SampledFn::from_fn(&s.phi_final, &grid),
        sigma: SampledFn::from_fn(&s.env.sigma, &grid),
        w: SampledFn::from_fn(&s.env.w, &grid),
        beta_r: SampledFn::from_fn(&s.env.beta_r, &grid),
    }
}

/// Rebuild an in-memory schedule from its sampled representation. The
/// reconstruction interpolates the stored samples, so downstream checks see
/// the serialized schedule, not the closed forms it came from.
pub fn dto_to_schedule(
    dto: &ScheduleDto,
    sys: &Arc<TriangularSystem>,
    g_field: &ScalarField,
    big_l: f64,
    c1: f64,
    c2: f64,
    seed: u64,
    knots: usize,
) -> Result<GainSchedule> {
    let gdot = g_field
        .differentiate("t")
        .map_err(|e| anyhow::anyhow!("decay profile not differentiable: {e}"))?;
    let g_owned = g_field.clone();
    let g = TimeFunction::new(move |t| match (g_owned.eval(&[t]), gdot.eval(&[t])) {
        (Ok(v), Ok(d)) => Dual::new(v, d),
        _ => Dual::new(f64::NAN, f64::NAN),
    });
    let env = EnvelopeSet {
        g,
        sigma: dto.sigma.to_fn(),
        w: dto.w.to_fn(),
        beta_r: dto.beta_r.to_fn(),
        big_r: dto.big_r,
        xi: dto.xi,
        t0: dto.t0,
        horizon: dto.horizon,
    };
    let params = SynthParams {
        big_l,
        c1,
        c2,
        xi: dto.xi,
        big_r: dto.big_r,
        t0: dto.t0,
        horizon: dto.horizon,
        knots,
        seed,
    };
    Ok(GainSchedule {
        sys: Arc::clone(sys),
        env,
        params,
        levels: dto
            .levels
            .iter()
            .map(|l| GainLevel {
                k: l.k,
                m: l.m,
                vartheta: l.vartheta,
                corner: l.corner.to_fn(),
                border: l.border.to_fn(),
                d: l.d.to_fn(),
                big_m: l.big_m,
                tau: l.tau,
            })
            .collect(),
        phis: dto.phi_inductive.iter().map(SampledFn::to_fn).collect(),
        dbar_final: dto.dbar_final.to_fn(),
        phi_final: dto.phi_final.to_fn(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerdictDto {
    pub name: String,
    pub pass: bool,
    pub worst_margin: f64,
    pub witness_t: Option<f64>,
    pub witness: Option<String>,
}

impl From<&Verdict> for VerdictDto {
    fn from(v: &Verdict) -> Self {
        VerdictDto {
            name: v.name.clone(),
            pass: v.pass,
            worst_margin: v.worst_margin,
            witness_t: v.witness.as_ref().map(|w| w.0),
            witness: v.witness.as_ref().map(|w| w.1.clone()),
        }
    }
}

/// Compact per-sample record kept inside reports so file-based checks can
/// re-verify the envelope inequalities without the full trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowDto {
    pub t: f64,
    pub e_norm: f64,
    pub g: f64,
    pub envelope: f64,
}

fn rows_to_dto(rows: &[TraceRow]) -> Vec<RowDto> {
    rows.iter()
        .map(|r| RowDto {
            t: r.t,
            e_norm: r.e.iter().map(|v| v * v).sum::<f64>().sqrt(),
            g: r.g,
            envelope: r.envelope,
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OdpReportFile {
    pub format_version: u32,
    pub kind: String,
    pub scenario: Scenario,
    pub big_r: f64,
    pub xi: f64,
    pub x0: Vec<f64>,
    pub t0: f64,
    pub horizon: f64,
    pub c1: f64,
    pub step_used: f64,
    pub halvings: u32,
    pub verdicts: Vec<VerdictDto>,
    pub terminal_error: f64,
    pub g_end: f64,
    pub pass: bool,
    pub rows: Vec<RowDto>,
}

pub fn odp_report_file(scenario: &Scenario, rep: &OdpReport) -> OdpReportFile {
    OdpReportFile {
        format_version: FORMAT_VERSION,
        kind: "odp".into(),
        scenario: scenario.clone(),
        big_r: rep.big_r,
        xi: rep.xi,
        x0: rep.x0.clone(),
        t0: rep.t0,
        horizon: rep.horizon,
        c1: rep.c1,
        step_used: rep.step_used,
        halvings: rep.halvings,
        verdicts: vec![
            (&rep.bound_verdict).into(),
            (&rep.envelope_verdict).into(),
            (&rep.v_cap_verdict).into(),
            (&rep.beta_verdict).into(),
            (&rep.v_consistency).into(),
        ],
        terminal_error: rep.terminal_error,
        g_end: rep.g_end,
        pass: rep.pass,
        rows: rows_to_dto(&rep.rows),
    }
}

/// Rebuild the minimal in-memory report the envelope check consumes.
pub fn odp_report_from_file(file: &OdpReportFile) -> OdpReport {
    let rows = file
        .rows
        .iter()
        .map(|r| TraceRow {
            t: r.t,
            x: vec![],
            z: vec![],
            e: vec![r.e_norm],
            y: f64::NAN,
            v: f64::NAN,
            envelope: r.envelope,
            g: r.g,
        })
        .collect();
    OdpReport {
        big_r: file.big_r,
        xi: file.xi,
        x0: file.x0.clone(),
        t0: file.t0,
        horizon: file.horizon,
        c1: file.c1,
        step_used: file.step_used,
        halvings: file.halvings,
        rows,
        bound_verdict: dummy_verdict(),
        envelope_verdict: dummy_verdict(),
        v_cap_verdict: dummy_verdict(),
        beta_verdict: dummy_verdict(),
        v_consistency: dummy_verdict(),
        terminal_error: file.terminal_error,
        g_end: file.g_end,
        pass: file.pass,
    }
}

fn dummy_verdict() -> Verdict {
    Verdict { name: "loaded".into(), pass: true, worst_margin: 0.0, witness: None }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentDto {
    pub k: usize,
    pub t_start: f64,
    pub t_mid: f64,
    pub t_end: f64,
    pub clipped: bool,
    pub xi: f64,
    pub zeta: f64,
    pub step_used: f64,
    pub halvings: u32,
    pub saturation_active: bool,
    pub bound: VerdictDto,
    pub decay: VerdictDto,
    pub rows: Vec<RowDto>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SodpReportFile {
    pub format_version: u32,
    pub kind: String,
    pub scenario: Scenario,
    pub x0: Vec<f64>,
    pub k0: usize,
    pub switch_times: Vec<f64>,
    pub segments: Vec<SegmentDto>,
    pub jumps: Vec<(f64, f64)>,
    pub truncated: Option<String>,
    pub partial: bool,
    pub terminal_error: f64,
    pub pass: bool,
}

pub fn sodp_report_file(scenario: &Scenario, rep: &SodpReport) -> SodpReportFile {
    SodpReportFile {
        format_version: FORMAT_VERSION,
        kind: "sodp".into(),
        scenario: scenario.clone(),
        x0: rep.x0.clone(),
        k0: rep.k0,
        switch_times: rep.times.clone(),
        segments: rep
            .segments
            .iter()
            .map(|s| SegmentDto {
                k: s.k,
                t_start: s.t_start,
                t_mid: s.t_mid,
                t_end: s.t_end,
                clipped: s.clipped,
                xi: s.xi,
                zeta: s.zeta,
                step_used: s.step_used,
                halvings: s.halvings,
                saturation_active: s.saturation_active,
                bound: (&s.bound_verdict).into(),
                decay: (&s.decay_verdict).into(),
                rows: rows_to_dto(&s.rows),
            })
            .collect(),
        jumps: rep.jumps.clone(),
        truncated: rep.truncated.clone(),
        partial: rep.partial,
        terminal_error: rep.terminal_error,
        pass: rep.pass,
    }
}

/// Rebuild the minimal in-memory report the switch check consumes.
pub fn sodp_report_from_file(file: &SodpReportFile) -> SodpReport {
    SodpReport {
        x0: file.x0.clone(),
        k0: file.k0,
        times: file.switch_times.clone(),
        segments: file
            .segments
            .iter()
            .map(|s| SegmentReport {
                k: s.k,
                t_start: s.t_start,
                t_mid: s.t_mid,
                t_end: s.t_end,
                clipped: s.clipped,
                xi: s.xi,
                zeta: s.zeta,
                step_used: s.step_used,
                halvings: s.halvings,
                rows: s
                    .rows
                    .iter()
                    .map(|r| TraceRow {
                        t: r.t,
                        x: vec![],
                        z: vec![],
                        e: vec![r.e_norm],
                        y: f64::NAN,
                        v: f64::NAN,
                        envelope: r.envelope,
                        g: r.g,
                    })
                    .collect(),
                saturation_active: s.saturation_active,
                bound_verdict: dummy_verdict(),
                decay_verdict: dummy_verdict(),
                pair: empty_trajectory(),
            })
            .collect(),
        jumps: file.jumps.clone(),
        truncated: file.truncated.clone(),
        partial: file.partial,
        terminal_error: file.terminal_error,
        pass: file.pass,
    }
}

fn empty_trajectory() -> triobs_core::sim::Trajectory {
    let mut rhs = |_t: f64, _x: &[f64]| Ok(vec![0.0]);
    triobs_core::sim::integrate(&mut rhs, 0.0, &[0.0], 1.0, 1.0).unwrap()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckDto {
    pub name: String,
    pub pass: bool,
    pub worst_margin: f64,
    pub witness_t: Option<f64>,
    pub witness: Option<String>,
    pub samples: usize,
}

impl From<&triobs_core::verify::CheckResult> for CheckDto {
    fn from(c: &triobs_core::verify::CheckResult) -> Self {
        CheckDto {
            name: c.name.clone(),
            pass: c.pass,
            worst_margin: c.worst_margin,
            witness_t: c.witness.as_ref().map(|w| w.t),
            witness: c.witness.as_ref().map(|w| w.detail.clone()),
            samples: c.samples,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckResultsFile {
    pub format_version: u32,
    pub scenario_name: String,
    pub seed: u64,
    pub results: Vec<CheckDto>,
    pub pass: bool,
}

/// Diagnostics written when a pipeline stage fails; deterministic, so
/// failure paths stay reproducible too.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailureFile {
    pub format_version: u32,
    pub kind: String,
    pub scenario: Scenario,
    pub stage: String,
    pub error: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serializing artifact")?;
    fs::write(path, text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Trace CSV: `t,x1..xn,z1..zn,e1..en,y,V,envelope,g`, one row per stored
/// sample, shortest-round-trip float formatting.
pub fn write_trace_csv(path: &Path, n: usize, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::new();
    out.push('t');
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",z{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",e{i}"));
    }
    out.push_str(",y,V,envelope,g\n");
    for r in rows {
        out.push_str(&format!("{}", r.t));
        for v in &r.x {
            out.push_str(&format!(",{v}"));
        }
        for v in &r.z {
            out.push_str(&format!(",{v}"));
        }
        for v in &r.e {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{},{},{}\n", r.y, r.v, r.envelope, r.g));
    }
    fs::write(path, out.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Wall-clock timings, kept apart from the deterministic artifacts.
pub fn write_timings(dir: &Path, name: &str, timings: &BTreeMap<String, f64>) -> Result<()> {
    write_json(&dir.join(format!("{name}.timings.json")), timings)
}

pub fn artifact_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}.{suffix}"))
}
