//! Fixed-step 4th-order Runge-Kutta co-integration of plant and observer,
//! with a step-stability probe (each accepted run must agree with its
//! half-step rerun), divergence and step-budget guards, thinned trajectory
//! storage and structured run reports.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::envelopes::{self, EnvelopeError};
use crate::expr::ScalarField;
use crate::fmath;
use crate::linalg::Cholesky;
use crate::observer::{self, ObserverError, SwitchPlan};
use crate::synthesis::{synthesize, GainSchedule, PhiOptions, SynthParams, SynthesisError};
use crate::system::{SystemError, TriangularSystem};

/// Hard cap on accepted steps per integration run.
pub const MAX_STEPS: u64 = 20_000_000;

/// Divergence guard: any state component beyond this aborts the run.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Stored samples per trajectory (steps are thinned to stay under this).
pub const STORE_CAP: usize = 4096;

/// Relative agreement required between a run and its half-step rerun.
pub const PROBE_TOL: f64 = 1e-4;

/// Most halvings the stability probe may apply to the requested step.
pub const PROBE_MAX_HALVINGS: u32 = 4;

#[derive(Clone, Debug)]
pub enum SimError {
    Diverged { t: f64 },
    NonFinite { t: f64 },
    StepBudget { required: u64, budget: u64 },
    ProbeExhausted {
        base_step: f64,
        final_step: f64,
        disagreement: f64,
        gain_scale: f64,
        step_hint: f64,
    },
    Rhs(String),
}

impl core::fmt::Display for SimError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SimError::Diverged { t } => write!(f, "state exceeded the divergence guard at t = {t}"),
            SimError::NonFinite { t } => write!(f, "state became non-finite at t = {t}"),
            SimError::StepBudget { required, budget } => {
                write!(f, "step budget exceeded: {required} steps needed, budget {budget}")
            }
            SimError::ProbeExhausted { base_step, final_step, disagreement, gain_scale, step_hint } => write!(
                f,
                "stability probe exhausted: runs at step {final_step:e} (from {base_step:e}) \
                 still disagree by {disagreement:e}; observer gain scale ~{gain_scale:e} \
                 suggests a stable step near {step_hint:e}"
            ),
            SimError::Rhs(m) => write!(f, "right-hand side failed: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SimError {}

/// Time-ordered state samples with stored derivatives; interpolation is the
/// derivative-matched cubic between samples.
#[derive(Clone, Debug)]
pub struct Trajectory {
    samples: Vec<(f64, Vec<f64>, Vec<f64>)>,
    pub step: f64,
    pub stride: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64], &[f64])> {
        self.samples.iter().map(|(t, x, d)| (*t, x.as_slice(), d.as_slice()))
    }

    pub fn first(&self) -> (f64, &[f64]) {
        let (t, x, _) = &self.samples[0];
        (*t, x)
    }

    pub fn last(&self) -> (f64, &[f64]) {
        let (t, x, _) = self.samples.last().unwrap();
        (*t, x)
    }

    /// Hermite interpolation between the bracketing stored samples.
    pub fn sample_at(&self, t: f64) -> Vec<f64> {
        let n = self.samples.len();
        if t <= self.samples[0].0 {
            return self.samples[0].1.clone();
        }
        if t >= self.samples[n - 1].0 {
            return self.samples[n - 1].1.clone();
        }
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.samples[mid].0 <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (ta, xa, da) = &self.samples[lo];
        let (tb, xb, db) = &self.samples[lo + 1];
        let h = tb - ta;
        let u = (t - ta) / h;
        let u2 = u * u;
        let u3 = u2 * u;
        let (h00, h10, h01, h11) = (
            2.0 * u3 - 3.0 * u2 + 1.0,
            u3 - 2.0 * u2 + u,
            -2.0 * u3 + 3.0 * u2,
            u3 - u2,
        );
        (0..xa.len())
            .map(|i| h00 * xa[i] + h10 * h * da[i] + h01 * xb[i] + h11 * h * db[i])
            .collect()
    }
}

pub type Rhs<'a> = &'a mut dyn FnMut(f64, &[f64]) -> Result<Vec<f64>, String>;
pub type StepCallback<'a> = &'a mut dyn FnMut(f64, &[f64]);

/// Classical fixed-step RK4 with divergence guard and thinned storage.
/// `on_step` observes every accepted step (including the initial state).
pub fn integrate_observed(
    rhs: Rhs<'_>,
    t0: f64,
    x0: &[f64],
    t1: f64,
    step: f64,
    on_step: StepCallback<'_>,
) -> Result<Trajectory, SimError> {
    assert!(step > 0.0 && t1 > t0);
    let span = t1 - t0;
    let steps_f = fmath::ceil(span / step);
    if steps_f > MAX_STEPS as f64 {
        return Err(SimError::StepBudget { required: steps_f as u64, budget: MAX_STEPS });
    }
    let steps = (steps_f as u64).max(1);
    let h = span / steps as f64;
    let stride = ((steps as usize) / STORE_CAP).max(1);
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut samples = Vec::with_capacity((steps as usize / stride) + 2);
    let eval = |rhs: Rhs<'_>, t: f64, x: &[f64]| -> Result<Vec<f64>, SimError> {
        let v = rhs(t, x).map_err(SimError::Rhs)?;
        debug_assert_eq!(v.len(), x.len());
        Ok(v)
    };
    let mut k1 = eval(rhs, t0, &x)?;
    on_step(t0, &x);
    samples.push((t0, x.clone(), k1.clone()));
    let mut scratch = vec![0.0; dim];
    for i in 0..steps {
        let t = t0 + span * (i as f64) / (steps as f64);
        let t_half = t + 0.5 * h;
        let t_next = t0 + span * ((i + 1) as f64) / (steps as f64);
        for j in 0..dim {
            scratch[j] = x[j] + 0.5 * h * k1[j];
        }
        let k2 = eval(rhs, t_half, &scratch)?;
        for j in 0..dim {
            scratch[j] = x[j] + 0.5 * h * k2[j];
        }
        let k3 = eval(rhs, t_half, &scratch)?;
        for j in 0..dim {
            scratch[j] = x[j] + h * k3[j];
        }
        let k4 = eval(rhs, t_next, &scratch)?;
        for j in 0..dim {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        for &v in &x {
            if !fmath::is_finite(v) {
                return Err(SimError::NonFinite { t: t_next });
            }
            if fmath::abs(v) > DIVERGENCE_GUARD {
                return Err(SimError::Diverged { t: t_next });
            }
        }
        k1 = eval(rhs, t_next, &x)?;
        on_step(t_next, &x);
        if (i + 1) % stride as u64 == 0 || i + 1 == steps {
            samples.push((t_next, x.clone(), k1.clone()));
        }
    }
    Ok(Trajectory { samples, step: h, stride })
}

pub fn integrate(rhs: Rhs<'_>, t0: f64, x0: &[f64], t1: f64, step: f64) -> Result<Trajectory, SimError> {
    integrate_observed(rhs, t0, x0, t1, step, &mut |_, _| {})
}

/// Worst relative disagreement between two runs of the same system, sampled
/// at 65 shared times.
fn disagreement(a: &Trajectory, b: &Trajectory, t0: f64, t1: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..=64 {
        let t = t0 + (t1 - t0) * i as f64 / 64.0;
        let xa = a.sample_at(t);
        let xb = b.sample_at(t);
        let mut num = 0.0f64;
        let mut den = 1.0f64;
        for j in 0..xa.len() {
            num = num.max(fmath::abs(xa[j] - xb[j]));
            den = den.max(fmath::abs(xa[j]));
        }
        worst = worst.max(num / den);
    }
    worst
}

/// Probe outcome: the accepted (half-step) trajectory and the step it used.
#[derive(Debug)]
pub struct ProbedRun {
    pub trajectory: Trajectory,
    pub step_used: f64,
    pub halvings: u32,
    pub disagreement: f64,
}

/// Run at `step` and `step/2`; accept the half-step run when they agree
/// within [`PROBE_TOL`], otherwise halve and retry up to
/// [`PROBE_MAX_HALVINGS`] times. `gain_scale` feeds the failure diagnostic.
pub fn integrate_with_probe(
    rhs: Rhs<'_>,
    t0: f64,
    x0: &[f64],
    t1: f64,
    step: f64,
    gain_scale: f64,
    on_accept: StepCallback<'_>,
) -> Result<ProbedRun, SimError> {
    let mut h = step;
    let mut last_disagreement = f64::INFINITY;
    for halvings in 0..=PROBE_MAX_HALVINGS {
        let coarse = integrate(rhs, t0, x0, t1, h);
        let fine = integrate(rhs, t0, x0, t1, h / 2.0);
        match (coarse, fine) {
            (Ok(a), Ok(b)) => {
                let dis = disagreement(&a, &b, t0, t1);
                last_disagreement = dis;
                if dis <= PROBE_TOL {
                    // replay the accepted run through the observer callback
                    let traj = integrate_observed(rhs, t0, x0, t1, h / 2.0, on_accept)?;
                    return Ok(ProbedRun {
                        trajectory: traj,
                        step_used: h / 2.0,
                        halvings,
                        disagreement: dis,
                    });
                }
            }
            (Err(SimError::StepBudget { required, budget }), _)
            | (_, Err(SimError::StepBudget { required, budget })) => {
                return Err(SimError::StepBudget { required, budget });
            }
            (Err(SimError::Rhs(m)), _) | (_, Err(SimError::Rhs(m))) => {
                return Err(SimError::Rhs(m));
            }
            _ => {}
        }
        h /= 2.0;
    }
    Err(SimError::ProbeExhausted {
        base_step: step,
        final_step: h * 2.0,
        disagreement: last_disagreement,
        gain_scale,
        step_hint: if gain_scale > 0.0 { 2.8 / gain_scale } else { f64::NAN },
    })
}

/// One stored co-integration sample.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub e: Vec<f64>,
    pub y: f64,
    pub v: f64,
    pub envelope: f64,
    pub g: f64,
}

/// Pass/fail with the worst margin and a witness for failures.
#[derive(Clone, Debug)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub worst_margin: f64,
    pub witness: Option<(f64, String)>,
}

impl Verdict {
    fn from_margin(name: &str, margin: f64, witness: Option<(f64, String)>) -> Self {
        Verdict { name: name.to_string(), pass: witness.is_none(), worst_margin: margin, witness }
    }
}

#[derive(Clone, Debug)]
pub enum RunError {
    Precondition(String),
    Envelope(EnvelopeError),
    Synthesis(SynthesisError),
    Observer(ObserverError),
    Sim(SimError),
    System(SystemError),
}

impl core::fmt::Display for RunError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RunError::Precondition(m) => write!(f, "precondition: {m}"),
            RunError::Envelope(e) => write!(f, "envelope: {e}"),
            RunError::Synthesis(e) => write!(f, "synthesis: {e}"),
            RunError::Observer(e) => write!(f, "observer: {e}"),
            RunError::Sim(e) => write!(f, "integration: {e}"),
            RunError::System(e) => write!(f, "system: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RunError {}

impl From<EnvelopeError> for RunError {
    fn from(e: EnvelopeError) -> Self {
        RunError::Envelope(e)
    }
}
impl From<SynthesisError> for RunError {
    fn from(e: SynthesisError) -> Self {
        RunError::Synthesis(e)
    }
}
impl From<ObserverError> for RunError {
    fn from(e: ObserverError) -> Self {
        RunError::Observer(e)
    }
}
impl From<SimError> for RunError {
    fn from(e: SimError) -> Self {
        RunError::Sim(e)
    }
}
impl From<SystemError> for RunError {
    fn from(e: SystemError) -> Self {
        RunError::System(e)
    }
}

/// Shared configuration for end-to-end runs.
#[derive(Clone, Debug)]
pub struct RunSetup {
    pub g_field: ScalarField,
    pub g_is_default: bool,
    pub big_l: f64,
    pub c1: f64,
    pub c2: f64,
    pub t0: f64,
    pub horizon: f64,
    pub step: f64,
    pub env_knots: usize,
    pub box_grid: usize,
    pub phi: PhiOptions,
    pub seed: u64,
}

/// Fixed-ball run report.
#[derive(Clone, Debug)]
pub struct OdpReport {
    pub big_r: f64,
    pub xi: f64,
    pub x0: Vec<f64>,
    pub t0: f64,
    pub horizon: f64,
    pub c1: f64,
    pub step_used: f64,
    pub halvings: u32,
    pub rows: Vec<TraceRow>,
    /// error stays strictly inside the gain bound
    pub bound_verdict: Verdict,
    /// error under the decaying envelope from `t0 + 1`
    pub envelope_verdict: Verdict,
    /// quadratic form under its a-priori cap
    pub v_cap_verdict: Verdict,
    /// plant under the completeness bound
    pub beta_verdict: Verdict,
    /// two-route quadratic form agreement
    pub v_consistency: Verdict,
    pub terminal_error: f64,
    pub g_end: f64,
    pub pass: bool,
}

/// Envelope value `max(xi e^{-c1 (t - t0 - 1)}, sqrt(g))` for `t >= t0 + 1`,
/// and the flat bound `xi` before that.
pub fn error_envelope(xi: f64, c1: f64, t0: f64, t: f64, g: f64) -> f64 {
    if t < t0 + 1.0 {
        xi
    } else {
        (xi * fmath::exp(-c1 * (t - (t0 + 1.0)))).max(fmath::sqrt(g.max(0.0)))
    }
}

/// Synthesize a schedule for the fixed-ball problem.
pub fn synthesize_for_ball(
    sys: &Arc<TriangularSystem>,
    setup: &RunSetup,
    big_r: f64,
) -> Result<GainSchedule, RunError> {
    let beta0 = sys.beta(setup.t0, big_r + 1.0)?;
    let xi = observer::xi_bound(setup.big_l, setup.c2, beta0)?;
    let env = envelopes::build_envelopes(
        sys,
        &setup.g_field,
        big_r,
        xi,
        setup.t0,
        setup.horizon,
        setup.env_knots,
        setup.box_grid,
    )?;
    let params = SynthParams {
        big_l: setup.big_l,
        c1: setup.c1,
        c2: setup.c2,
        xi,
        big_r,
        t0: setup.t0,
        horizon: setup.horizon,
        knots: setup.phi.knots,
        seed: setup.seed,
    };
    Ok(synthesize(sys, env, params, &setup.phi)?)
}

/// Largest observer gain component over a coarse time grid (stiffness
/// diagnostic for probe failures).
fn gain_scale(schedule: &GainSchedule) -> f64 {
    let mut scale = 0.0f64;
    for i in 0..=16 {
        let t = schedule.params.t0
            + (schedule.params.horizon - schedule.params.t0) * i as f64 / 16.0;
        if let Ok(k) = schedule.gain_vector(t) {
            for v in k {
                scale = scale.max(fmath::abs(v));
            }
        }
    }
    scale
}

/// Run the fixed-ball pipeline for one initial state: synthesize, co-integrate
/// plant and observer from `z = 0`, and record the error-envelope verdicts.
pub fn run_odp(
    sys: &Arc<TriangularSystem>,
    setup: &RunSetup,
    big_r: f64,
    x0: &[f64],
) -> Result<OdpReport, RunError> {
    let n = sys.dim();
    if x0.len() != n {
        return Err(RunError::Precondition(format!(
            "initial state has {} components, plant has {n}",
            x0.len()
        )));
    }
    let x0_norm = fmath::norm2(x0);
    if x0_norm > big_r + 1e-12 {
        return Err(RunError::Precondition(format!(
            "|x0| = {x0_norm} exceeds the design radius {big_r}"
        )));
    }
    let schedule = synthesize_for_ball(sys, setup, big_r)?;
    run_odp_with_schedule(sys, setup, &schedule, x0)
}

/// Same as [`run_odp`] but reusing an already synthesized schedule.
pub fn run_odp_with_schedule(
    sys: &Arc<TriangularSystem>,
    setup: &RunSetup,
    schedule: &GainSchedule,
    x0: &[f64],
) -> Result<OdpReport, RunError> {
    let n = sys.dim();
    let xi = schedule.params.xi;
    let big_r = schedule.params.big_r;
    let (t0, horizon) = (setup.t0, setup.horizon);
    let x0_norm = fmath::norm2(x0);

    let mut stacked0 = x0.to_vec();
    stacked0.extend(core::iter::repeat(0.0).take(n));

    let mut rhs = |t: f64, s: &[f64]| -> Result<Vec<f64>, String> {
        let (x, z) = s.split_at(n);
        let mut dx = sys.eval_plant_rhs(t, x).map_err(|e| e.to_string())?;
        let y = x[0];
        let dz =
            observer::luenberger_rhs(schedule, t, z, y).map_err(|e| e.to_string())?;
        dx.extend(dz);
        Ok(dx)
    };

    // streaming scalar checks at every accepted step
    let g_field = setup.g_field.clone();
    let beta_field = sys.beta_field().clone();
    let c1 = setup.c1;
    let mut worst_bound = f64::INFINITY; // xi - |e|
    let mut worst_env = f64::INFINITY; // envelope - |e| for t >= t0+1
    let mut worst_beta = f64::INFINITY; // beta(t,|x0|) - |x|
    let mut bound_w: Option<(f64, String)> = None;
    let mut env_w: Option<(f64, String)> = None;
    let mut beta_w: Option<(f64, String)> = None;
    {
        let mut on_step = |t: f64, s: &[f64]| {
            let (x, z) = s.split_at(n);
            let mut e2 = 0.0;
            let mut x2 = 0.0;
            for i in 0..n {
                let d = x[i] - z[i];
                e2 += d * d;
                x2 += x[i] * x[i];
            }
            let e_norm = fmath::sqrt(e2);
            let x_norm = fmath::sqrt(x2);
            let m_bound = xi - e_norm;
            if m_bound < worst_bound {
                worst_bound = m_bound;
                if m_bound <= 0.0 {
                    bound_w = Some((t, format!("|e| = {e_norm} vs bound {xi}")));
                }
            }
            if t >= t0 + 1.0 {
                let g = g_field.eval(&[t]).unwrap_or(f64::NAN);
                let env = error_envelope(xi, c1, t0, t, g);
                let m = env - e_norm;
                if m < worst_env {
                    worst_env = m;
                    if m < 0.0 {
                        env_w = Some((t, format!("|e| = {e_norm} vs envelope {env}")));
                    }
                }
            }
            let bound = beta_field.eval(&[t, x0_norm]).unwrap_or(f64::NAN);
            let m = bound - x_norm;
            if m < worst_beta {
                worst_beta = m;
                if m < -1e-9 * (1.0 + bound) {
                    beta_w = Some((t, format!("|x| = {x_norm} vs bound {bound}")));
                }
            }
        };

        let probed = integrate_with_probe(
            &mut rhs,
            t0,
            &stacked0,
            horizon,
            setup.step,
            gain_scale(schedule),
            &mut on_step,
        )?;

        // rows, quadratic-form checks and the terminal error come from the
        // stored samples of the accepted run
        let v_cap = schedule.params.big_l
            * fmath::exp(4.0 * setup.c2)
            * fmath::powi(sys.beta(t0, big_r + 1.0)?, 2);
        let mut rows = Vec::with_capacity(probed.trajectory.len());
        let mut worst_vcap = f64::INFINITY;
        let mut vcap_w: Option<(f64, String)> = None;
        let mut worst_vrel = 0.0f64;
        let mut vrel_w: Option<(f64, String)> = None;
        for (t, s, _) in probed.trajectory.iter() {
            let (x, z) = s.split_at(n);
            let e: Vec<f64> = (0..n).map(|i| x[i] - z[i]).collect();
            let p = schedule.p_full(t);
            let v_direct = p.quad_form(&e);
            let v_chol = match Cholesky::new(&p) {
                Ok(c) => c.quad_form_via_factor(&e),
                Err(_) => f64::NAN,
            };
            let rel = fmath::abs(v_direct - v_chol) / v_direct.abs().max(1e-300);
            if v_direct > 1e-280 && rel > worst_vrel {
                worst_vrel = rel;
                if rel > 1e-10 {
                    vrel_w = Some((t, format!("direct {v_direct} vs factored {v_chol}")));
                }
            }
            let m = v_cap - v_direct;
            if m < worst_vcap {
                worst_vcap = m;
                if m <= 0.0 {
                    vcap_w = Some((t, format!("V = {v_direct} vs cap {v_cap}")));
                }
            }
            let g = setup.g_field.eval(&[t]).unwrap_or(f64::NAN);
            rows.push(TraceRow {
                t,
                x: x.to_vec(),
                z: z.to_vec(),
                e: e.clone(),
                y: x[0],
                v: v_direct,
                envelope: error_envelope(xi, c1, t0, t, g),
                g,
            });
        }
        let terminal_error = rows.last().map(|r| fmath::norm2(&r.e)).unwrap_or(f64::NAN);
        let g_end = setup.g_field.eval(&[horizon]).map_err(EnvelopeError::Field)?;

        let bound_verdict = Verdict::from_margin("error-bound", worst_bound, bound_w);
        let envelope_verdict = Verdict::from_margin("error-envelope", worst_env, env_w);
        let v_cap_verdict = Verdict::from_margin("quadratic-form-cap", worst_vcap, vcap_w);
        let beta_verdict = Verdict::from_margin("completeness-bound", worst_beta, beta_w);
        let v_consistency = Verdict::from_margin("quadratic-form-consistency", worst_vrel, vrel_w);
        let pass = bound_verdict.pass
            && envelope_verdict.pass
            && v_cap_verdict.pass
            && beta_verdict.pass
            && v_consistency.pass;
        Ok(OdpReport {
            big_r,
            xi,
            x0: x0.to_vec(),
            t0,
            horizon,
            c1,
            step_used: probed.step_used,
            halvings: probed.halvings,
            rows,
            bound_verdict,
            envelope_verdict,
            v_cap_verdict,
            beta_verdict,
            v_consistency,
            terminal_error,
            g_end,
            pass,
        })
    }
}

/// Per-window report of a switching run.
#[derive(Clone, Debug)]
pub struct SegmentReport {
    pub k: usize,
    pub t_start: f64,
    pub t_mid: f64,
    pub t_end: f64,
    pub clipped: bool,
    pub xi: f64,
    pub zeta: f64,
    pub step_used: f64,
    pub halvings: u32,
    pub rows: Vec<TraceRow>,
    /// whether the saturation blend ever engaged
    pub saturation_active: bool,
    /// estimate stays inside the saturation radius
    pub bound_verdict: Verdict,
    /// `|e_k| <= 1/k` on the trusted half
    pub decay_verdict: Verdict,
    /// stacked pair trajectory for estimate assembly
    pub pair: Trajectory,
}

#[derive(Clone, Debug)]
pub struct SodpReport {
    pub x0: Vec<f64>,
    pub k0: usize,
    pub times: Vec<f64>,
    pub segments: Vec<SegmentReport>,
    pub jumps: Vec<(f64, f64)>,
    pub truncated: Option<String>,
    pub partial: bool,
    pub terminal_error: f64,
    pub pass: bool,
}

/// Run the switching pipeline: build the plan, integrate each window's
/// saturated observer against the plant from `z = 0`, and check saturation
/// inactivity and the per-window decay bound for windows at or past the
/// initial-norm index.
pub fn run_sodp(
    sys: &Arc<TriangularSystem>,
    setup: &RunSetup,
    x0: &[f64],
) -> Result<SodpReport, RunError> {
    let n = sys.dim();
    if x0.len() != n {
        return Err(RunError::Precondition(format!(
            "initial state has {} components, plant has {n}",
            x0.len()
        )));
    }
    let plan_setup = observer::PlanSetup {
        g_field: &setup.g_field,
        g_is_default: setup.g_is_default,
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
    let plan: SwitchPlan = observer::switch_plan(sys, &plan_setup)?;
    let k0 = SwitchPlan::k0_for(fmath::norm2(x0));

    // one global plant run supplies each window's plant restart state
    let mut plant_rhs =
        |t: f64, x: &[f64]| sys.eval_plant_rhs(t, x).map_err(|e| e.to_string());
    let plant = integrate(&mut plant_rhs, setup.t0, x0, setup.horizon, setup.step)?;

    let mut segments = Vec::new();
    let mut pieces: Vec<(f64, f64, Trajectory)> = Vec::new();
    for seg in &plan.segments {
        let x_start = plant.sample_at(seg.t_start);
        let mut stacked0 = x_start.clone();
        stacked0.extend(core::iter::repeat(0.0).take(n));
        let zeta = seg.zeta;
        let schedule = &seg.schedule;
        let mut rhs = |t: f64, s: &[f64]| -> Result<Vec<f64>, String> {
            let (x, z) = s.split_at(n);
            let mut dx = sys.eval_plant_rhs(t, x).map_err(|e| e.to_string())?;
            let y = x[0];
            let dz = observer::switched_rhs(schedule, zeta, t, z, y)
                .map_err(|e| e.to_string())?;
            dx.extend(dz);
            Ok(dx)
        };
        let mut max_z = 0.0f64;
        let mut decay_margin = f64::INFINITY;
        let mut decay_w: Option<(f64, String)> = None;
        let inv_k = 1.0 / seg.k as f64;
        let (t_mid, t_end) = (seg.t_mid, seg.t_end);
        let mut on_step = |t: f64, s: &[f64]| {
            let (x, z) = s.split_at(n);
            let zn = fmath::norm2(z);
            if zn > max_z {
                max_z = zn;
            }
            if t >= t_mid {
                let mut e2 = 0.0;
                for i in 0..n {
                    let d = x[i] - z[i];
                    e2 += d * d;
                }
                let m = inv_k - fmath::sqrt(e2);
                if m < decay_margin {
                    decay_margin = m;
                    if m < 0.0 {
                        decay_w = Some((t, format!("|e_{}| = {} vs 1/k = {inv_k}", seg.k, fmath::sqrt(e2))));
                    }
                }
            }
        };
        let probed = integrate_with_probe(
            &mut rhs,
            seg.t_start,
            &stacked0,
            t_end,
            setup.step,
            gain_scale(schedule),
            &mut on_step,
        )?;
        let sat_active = max_z >= zeta;
        let bound_verdict = Verdict::from_margin(
            "saturation-bound",
            zeta - max_z,
            if sat_active {
                Some((t_end, format!("max |z| = {max_z} vs radius {zeta}")))
            } else {
                None
            },
        );
        let decay_verdict = Verdict::from_margin("window-decay", decay_margin, decay_w);
        let mut rows = Vec::with_capacity(probed.trajectory.len());
        for (t, s, _) in probed.trajectory.iter() {
            let (x, z) = s.split_at(n);
            let e: Vec<f64> = (0..n).map(|i| x[i] - z[i]).collect();
            let g = setup.g_field.eval(&[t]).unwrap_or(f64::NAN);
            rows.push(TraceRow {
                t,
                x: x.to_vec(),
                z: z.to_vec(),
                e: e.clone(),
                y: x[0],
                v: f64::NAN,
                envelope: error_envelope(seg.xi, setup.c1, seg.t_start, t, g),
                g,
            });
        }
        if seg.t_mid < seg.t_end {
            pieces.push((seg.t_mid, seg.t_end, probed.trajectory.clone()));
        }
        segments.push(SegmentReport {
            k: seg.k,
            t_start: seg.t_start,
            t_mid: seg.t_mid,
            t_end: seg.t_end,
            clipped: seg.t_end < plan.times.get(seg.k).copied().unwrap_or(seg.t_end),
            xi: seg.xi,
            zeta: seg.zeta,
            step_used: probed.step_used,
            halvings: probed.halvings,
            rows,
            saturation_active: sat_active,
            bound_verdict,
            decay_verdict,
            pair: probed.trajectory,
        });
    }

    let assembled = observer::AssembledEstimate::new(&pieces, n)?;
    let jumps: Vec<(f64, f64)> =
        assembled.jumps().into_iter().map(|j| (j.t, j.magnitude)).collect();
    let t_last = segments.last().map(|s| s.t_end).unwrap_or(setup.horizon);
    let terminal_error = match assembled.sample(t_last) {
        Some(z) => {
            let x = plant.sample_at(t_last);
            let diff: Vec<f64> = (0..n).map(|i| x[i] - z[i]).collect();
            fmath::norm2(&diff)
        }
        None => f64::NAN,
    };
    let partial = plan.truncated.is_some()
        || segments.last().map(|s| s.clipped).unwrap_or(true);
    let pass = plan.truncated.is_none()
        && segments
            .iter()
            .filter(|s| s.k >= k0)
            .all(|s| !s.saturation_active && s.decay_verdict.pass);
    Ok(SodpReport {
        x0: x0.to_vec(),
        k0,
        times: plan.times.clone(),
        segments,
        jumps,
        truncated: plan.truncated,
        partial,
        terminal_error,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_matches_exponential_decay() {
        let mut rhs = |_t: f64, x: &[f64]| Ok(vec![-x[0]]);
        let traj = integrate(&mut rhs, 0.0, &[1.0], 1.0, 0.01).unwrap();
        let (_, x) = traj.last();
        assert!((x[0] - fmath::exp(-1.0)).abs() < 1e-8, "{}", x[0]);
    }

    #[test]
    fn rk4_constant_field() {
        let mut rhs = |_t: f64, _x: &[f64]| Ok(vec![0.0, 0.0]);
        let traj = integrate(&mut rhs, 0.0, &[1.5, -2.0], 3.0, 0.1).unwrap();
        let (_, x) = traj.last();
        assert_eq!(x, &[1.5, -2.0]);
    }

    #[test]
    fn rk4_fourth_order_ratio() {
        // halving the step shrinks the terminal error by roughly 2^4
        let err_at = |h: f64| {
            let mut rhs = |_t: f64, x: &[f64]| Ok(vec![-x[0]]);
            let traj = integrate(&mut rhs, 0.0, &[1.0], 1.0, h).unwrap();
            (traj.last().1[0] - fmath::exp(-1.0)).abs()
        };
        let ratio = err_at(0.02) / err_at(0.01);
        assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn divergence_guard_trips() {
        let mut rhs = |_t: f64, x: &[f64]| Ok(vec![x[0] * x[0]]);
        let err = integrate(&mut rhs, 0.0, &[10.0, ], 2.0, 0.01).unwrap_err();
        assert!(matches!(err, SimError::Diverged { .. } | SimError::NonFinite { .. }));
    }

    #[test]
    fn step_budget_enforced() {
        let mut rhs = |_t: f64, x: &[f64]| Ok(vec![-x[0]]);
        let err = integrate(&mut rhs, 0.0, &[1.0], 1.0, 1e-12).unwrap_err();
        assert!(matches!(err, SimError::StepBudget { .. }));
    }

    #[test]
    fn trajectory_interpolation_is_cubic_accurate() {
        let mut rhs = |t: f64, _x: &[f64]| Ok(vec![fmath::cos(t)]);
        let traj = integrate(&mut rhs, 0.0, &[0.0], 3.0, 0.05).unwrap();
        for i in 0..=30 {
            let t = 3.0 * i as f64 / 30.0;
            let v = traj.sample_at(t)[0];
            assert!((v - fmath::sin(t)).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn probe_accepts_stable_step_without_halving() {
        let mut rhs = |_t: f64, x: &[f64]| Ok(vec![-x[0]]);
        let probed =
            integrate_with_probe(&mut rhs, 0.0, &[1.0], 1.0, 0.01, 1.0, &mut |_, _| {})
                .unwrap();
        assert_eq!(probed.halvings, 0);
        assert_eq!(probed.step_used, 0.005);
    }

    #[test]
    fn probe_halves_unstable_step_until_agreement() {
        // stiff linear decay: RK4 needs h < 2.78/50
        let mut rhs = |_t: f64, x: &[f64]| Ok(vec![-50.0 * x[0]]);
        let probed =
            integrate_with_probe(&mut rhs, 0.0, &[1.0], 2.0, 0.1, 50.0, &mut |_, _| {})
                .unwrap();
        assert!(probed.halvings >= 1);
        let (_, x) = probed.trajectory.last();
        assert!(x[0].abs() < 1e-6);
    }

    #[test]
    fn probe_exhaustion_reports_diagnostics() {
        // gain far beyond what four halvings can stabilize
        let mut rhs = |_t: f64, x: &[f64]| Ok(vec![-1e6 * x[0]]);
        let err = integrate_with_probe(&mut rhs, 0.0, &[1.0], 5.0, 0.05, 1e6, &mut |_, _| {})
            .unwrap_err();
        match err {
            SimError::ProbeExhausted { step_hint, .. } => {
                assert!((step_hint - 2.8e-6).abs() < 1e-9);
            }
            other => panic!("expected probe exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn error_envelope_shape() {
        let xi = 10.0;
        // before t0+1: flat bound
        assert_eq!(error_envelope(xi, 1.0, 0.0, 0.5, 0.3), xi);
        // after: decaying exponential until sqrt(g) dominates
        let e1 = error_envelope(xi, 1.0, 0.0, 2.0, 1e-8);
        assert!((e1 - xi * fmath::exp(-1.0)).abs() < 1e-12);
        let e2 = error_envelope(xi, 1.0, 0.0, 30.0, 0.25);
        assert_eq!(e2, 0.5);
    }
}
