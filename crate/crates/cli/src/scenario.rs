//! Scenario configuration: a human-editable TOML file describing the plant,
//! the run mode and the numeric knobs, with defaults applied on load and the
//! resolved form echoed into every report.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use triobs_core::expr::ScalarField;
use triobs_core::synthesis::PhiOptions;
use triobs_core::system::TriangularSystem;

/// On-disk scenario schema. Optional keys fall back to documented defaults;
/// the resolved scenario (defaults applied) is what reports echo.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub system: SystemSpec,
    pub mode: ModeSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub constants: ConstantsSpec,
    #[serde(default)]
    pub g: GSpec,
    #[serde(default)]
    pub grids: GridSpec,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct SystemSpec {
    pub n: usize,
    /// odd positive coupling powers, one per coupling
    pub m: Vec<u32>,
    /// drift expressions `f_i(t, x1..xi)`
    pub f: Vec<String>,
    /// coupling expressions `a_i(t, x1)`
    pub a: Vec<String>,
    /// completeness bound `beta(t, s)`
    pub beta: String,
    /// optional growth-condition expression, recorded for documentation only
    #[serde(default)]
    pub c_bound: Option<String>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ModeSpec {
    /// `odp` (fixed ball, needs `R`) or `sodp`
    pub kind: String,
    #[serde(default)]
    pub big_r: Option<f64>,
    pub x0: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct RunSpec {
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_target")]
    pub target_precision: f64,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            t0: 0.0,
            horizon: default_horizon(),
            step: default_step(),
            target_precision: default_target(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ConstantsSpec {
    #[serde(default = "default_l")]
    pub big_l: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
    /// defaults to the state dimension when absent
    #[serde(default)]
    pub c2: Option<f64>,
}

impl Default for ConstantsSpec {
    fn default() -> Self {
        ConstantsSpec { big_l: default_l(), c1: default_c1(), c2: None }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct GSpec {
    #[serde(default = "default_g_expr")]
    pub expr: String,
}

impl Default for GSpec {
    fn default() -> Self {
        GSpec { expr: default_g_expr() }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct GridSpec {
    #[serde(default = "default_env_knots")]
    pub env_knots: usize,
    #[serde(default = "default_box_grid")]
    pub box_grid: usize,
    #[serde(default = "default_phi_knots")]
    pub phi_knots: usize,
    #[serde(default = "default_beta_trials")]
    pub beta_trials: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            env_knots: default_env_knots(),
            box_grid: default_box_grid(),
            phi_knots: default_phi_knots(),
            beta_trials: default_beta_trials(),
        }
    }
}

fn default_seed() -> u64 {
    42
}
fn default_horizon() -> f64 {
    20.0
}
fn default_step() -> f64 {
    1e-3
}
fn default_target() -> f64 {
    1e-4
}
fn default_l() -> f64 {
    2.0
}
fn default_c1() -> f64 {
    1.0
}
fn default_g_expr() -> String {
    "0.5*exp(-t)".to_string()
}
fn default_env_knots() -> usize {
    96
}
fn default_box_grid() -> usize {
    21
}
fn default_phi_knots() -> usize {
    96
}
fn default_beta_trials() -> usize {
    100
}

/// Run mode resolved from the scenario.
#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    Odp { big_r: f64 },
    Sodp,
}

/// Scenario with every expression parsed, every default applied and the
/// plant validated structurally.
#[derive(Debug)]
pub struct ResolvedScenario {
    pub scenario: Scenario,
    pub sys: Arc<TriangularSystem>,
    pub g_field: ScalarField,
    pub g_is_default: bool,
    pub mode: Mode,
    pub c2: f64,
    pub x0: Vec<f64>,
}

impl ResolvedScenario {
    pub fn phi_options(&self) -> PhiOptions {
        PhiOptions { knots: self.scenario.grids.phi_knots, ..PhiOptions::default() }
    }

    pub fn run_setup(&self) -> triobs_core::sim::RunSetup {
        triobs_core::sim::RunSetup {
            g_field: self.g_field.clone(),
            g_is_default: self.g_is_default,
            big_l: self.scenario.constants.big_l,
            c1: self.scenario.constants.c1,
            c2: self.c2,
            t0: self.scenario.run.t0,
            horizon: self.scenario.run.horizon,
            step: self.scenario.run.step,
            env_knots: self.scenario.grids.env_knots,
            box_grid: self.scenario.grids.box_grid,
            phi: self.phi_options(),
            seed: self.scenario.seed,
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<ResolvedScenario> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario file {}", path.display()))?;
    resolve_scenario_str(&text)
}

pub fn resolve_scenario_str(text: &str) -> Result<ResolvedScenario> {
    let scenario: Scenario = toml::from_str(text).context("scenario schema violation")?;
    resolve(scenario)
}

fn var_names(count: usize) -> Vec<String> {
    let mut v = vec!["t".to_string()];
    for i in 1..=count {
        v.push(format!("x{i}"));
    }
    v
}

pub fn resolve(scenario: Scenario) -> Result<ResolvedScenario> {
    let spec = &scenario.system;
    if spec.f.len() != spec.n {
        bail!("system.f: expected {} drift expressions, got {}", spec.n, spec.f.len());
    }
    if spec.a.len() + 1 != spec.n {
        bail!("system.a: expected {} coupling expressions, got {}", spec.n - 1, spec.a.len());
    }
    if spec.m.len() + 1 != spec.n {
        bail!("system.m: expected {} powers, got {}", spec.n - 1, spec.m.len());
    }
    let mut f_fields = Vec::with_capacity(spec.n);
    for (i, src) in spec.f.iter().enumerate() {
        let names = var_names(i + 1);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        f_fields.push(
            ScalarField::parse(src, &refs, &format!("f{}", i + 1))
                .map_err(|e| anyhow::anyhow!("system.f[{i}]: {e}"))?,
        );
    }
    let mut a_fields = Vec::with_capacity(spec.n - 1);
    for (i, src) in spec.a.iter().enumerate() {
        a_fields.push(
            ScalarField::parse(src, &["t", "x1"], &format!("a{}", i + 1))
                .map_err(|e| anyhow::anyhow!("system.a[{i}]: {e}"))?,
        );
    }
    let beta = ScalarField::parse(&spec.beta, &["t", "s"], "beta")
        .map_err(|e| anyhow::anyhow!("system.beta: {e}"))?;
    if let Some(c) = &spec.c_bound {
        // documentation-only growth condition; still must parse
        ScalarField::parse(c, &["t"], "C")
            .map_err(|e| anyhow::anyhow!("system.c_bound: {e}"))?;
    }
    let sys = TriangularSystem::new(spec.m.clone(), f_fields, a_fields, beta)
        .map_err(|e| anyhow::anyhow!("system: {e}"))?;

    let g_field = ScalarField::parse(&scenario.g.expr, &["t"], "g")
        .map_err(|e| anyhow::anyhow!("g.expr: {e}"))?;
    let g_is_default = scenario.g.expr == default_g_expr();

    let mode = match scenario.mode.kind.as_str() {
        "odp" => {
            let big_r = scenario
                .mode
                .big_r
                .ok_or_else(|| anyhow::anyhow!("mode.big_r is required for odp scenarios"))?;
            if !(big_r > 0.0) {
                bail!("mode.big_r must be positive");
            }
            Mode::Odp { big_r }
        }
        "sodp" => Mode::Sodp,
        other => bail!("mode.kind must be `odp` or `sodp`, got `{other}`"),
    };
    if scenario.mode.x0.len() != spec.n {
        bail!("mode.x0 has {} components, system has {}", scenario.mode.x0.len(), spec.n);
    }
    let c2 = scenario.constants.c2.unwrap_or(spec.n as f64);
    if !(scenario.constants.big_l > 1.0) {
        bail!("constants.big_l must exceed 1");
    }
    if !(scenario.constants.c1 >= 0.5) {
        bail!("constants.c1 must be at least 1/2");
    }
    let x0 = scenario.mode.x0.clone();
    Ok(ResolvedScenario { scenario, sys: Arc::new(sys), g_field, g_is_default, mode, c2, x0 })
}

/// Built-in demo scenarios, embedded from `scenarios/`.
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "example11-odp" => Some(include_str!("../scenarios/example11-odp.toml")),
        "chain2-sodp" => Some(include_str!("../scenarios/chain2-sodp.toml")),
        "linear2-odp" => Some(include_str!("../scenarios/linear2-odp.toml")),
        "linear2-sodp" => Some(include_str!("../scenarios/linear2-sodp.toml")),
        _ => None,
    }
}

pub const BUILTIN_NAMES: &[&str] =
    &["example11-odp", "chain2-sodp", "linear2-odp", "linear2-sodp"];
