//! Observer assembly: the fixed-ball output-injection observer and the
//! switching plan (switch times, per-segment gain bounds, saturation radii,
//! per-segment schedules).

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::envelopes::build_envelopes;
use crate::expr::ScalarField;
use crate::fmath;
use crate::sim::Trajectory;
use crate::synthesis::{synthesize, GainSchedule, PhiOptions, SynthParams, SynthesisError};
use crate::system::{SystemError, TriangularSystem};
use crate::timefn::linspace;

#[derive(Clone, Debug)]
pub enum ObserverError {
    Overflow(String),
    Schedule(String),
    System(String),
    Plan(String),
}

impl core::fmt::Display for ObserverError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ObserverError::Overflow(m) => write!(f, "overflow: {m}"),
            ObserverError::Schedule(m) => write!(f, "schedule: {m}"),
            ObserverError::System(m) => write!(f, "system: {m}"),
            ObserverError::Plan(m) => write!(f, "switch plan: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ObserverError {}

impl From<SystemError> for ObserverError {
    fn from(e: SystemError) -> Self {
        ObserverError::System(format!("{e}"))
    }
}

/// Smallest admissible gain bound for a design ball of radius `R` started at
/// `t_start`: `sqrt(L) · exp(2 c2) · beta(t_start, R + 1)`.
pub fn xi_bound(big_l: f64, c2: f64, beta_value: f64) -> Result<f64, ObserverError> {
    let v = fmath::sqrt(big_l) * fmath::exp(2.0 * c2) * beta_value;
    if !fmath::is_finite(v) {
        return Err(ObserverError::Overflow(format!(
            "gain bound overflowed (L = {big_l}, c2 = {c2}, beta = {beta_value})"
        )));
    }
    Ok(v)
}

/// Observer right-hand side: copy of the output-substituted dynamics plus the
/// output injection `φ(t) P(t)^{-1} h' (y - z1)`, the inverse applied through
/// a symmetric positive definite solve.
pub fn luenberger_rhs(
    schedule: &GainSchedule,
    t: f64,
    z: &[f64],
    y: f64,
) -> Result<Vec<f64>, ObserverError> {
    let mut dz = schedule.sys.eval_output_form(t, z, y)?;
    let gain = schedule.gain_vector(t).map_err(ObserverError::Schedule)?;
    let innovation = y - z[0];
    for (d, k) in dz.iter_mut().zip(&gain) {
        *d += k * innovation;
    }
    Ok(dz)
}

/// Blending factor that keeps each segment's dynamics globally bounded:
/// 1 inside the saturation radius, 0 beyond twice the radius, linear between.
pub fn saturation_factor(z_norm: f64, zeta: f64) -> f64 {
    if z_norm <= zeta {
        1.0
    } else if z_norm >= 2.0 * zeta {
        0.0
    } else {
        (2.0 * zeta - z_norm) / zeta
    }
}

/// Segment dynamics: the nominal observer field scaled by the saturation
/// factor of the current estimate norm.
pub fn switched_rhs(
    schedule: &GainSchedule,
    zeta: f64,
    t: f64,
    z: &[f64],
    y: f64,
) -> Result<Vec<f64>, ObserverError> {
    let factor = saturation_factor(fmath::norm2(z), zeta);
    if factor == 0.0 {
        return Ok(alloc::vec![0.0; z.len()]);
    }
    let mut dz = luenberger_rhs(schedule, t, z, y)?;
    if factor < 1.0 {
        for d in &mut dz {
            *d *= factor;
        }
    }
    Ok(dz)
}

/// One window of the switching observer.
#[derive(Clone, Debug)]
pub struct SwitchSegment {
    /// 1-based window index; the design radius equals the index
    pub k: usize,
    pub t_start: f64,
    /// start of the window's trusted half (`t_k`)
    pub t_mid: f64,
    pub t_end: f64,
    pub xi: f64,
    pub zeta: f64,
    pub schedule: GainSchedule,
}

#[derive(Clone, Debug)]
pub struct SwitchPlan {
    pub t0: f64,
    pub horizon: f64,
    /// switch times `t_1 = t0 < t_2 < ...`, as far as computed
    pub times: Vec<f64>,
    pub segments: Vec<SwitchSegment>,
    /// set when gain overflow stopped the plan early
    pub truncated: Option<String>,
}

impl SwitchPlan {
    /// First window index adequate for an initial state of the given norm
    /// (at least 2).
    pub fn k0_for(x0_norm: f64) -> usize {
        let mut k = 2usize;
        while (k as f64) < x0_norm {
            k += 1;
        }
        k
    }
}

/// Closed-form switch time for the default decay profile `0.5 e^{-t}` and
/// `c1 = 1`: both envelope terms are decreasing, so the earliest admissible
/// time is the larger crossing point.
pub fn switch_time_default_profile(i: usize, t_prev: f64, xi_i: f64, c1: f64) -> f64 {
    debug_assert!((c1 - 1.0).abs() < 1e-12);
    let i_f = i as f64;
    let from_gain = t_prev + 1.0 + fmath::ln(i_f * xi_i);
    let from_profile = fmath::ln(i_f * i_f / 2.0);
    (t_prev + 1.0).max(from_gain).max(from_profile)
}

/// General switch time by scanning the monotone envelope
/// `τ -> sup_{t >= τ} max(ξ_i e^{-c1 (t - t_prev - 1)}, sqrt(g(t)))`
/// on a grid and bisecting the crossing.
pub fn switch_time_general(
    i: usize,
    t_prev: f64,
    xi_i: f64,
    c1: f64,
    g_field: &ScalarField,
    scan_to: f64,
) -> Result<f64, ObserverError> {
    let target = 1.0 / i as f64;
    let start = t_prev + 1.0;
    let grid = linspace(start, scan_to.max(start + 1.0), 4096);
    let g_at = |t: f64| -> Result<f64, ObserverError> {
        g_field
            .eval(&[t])
            .map_err(|e| ObserverError::Plan(format!("decay profile failed at {t}: {e}")))
    };
    // suffix supremum of sqrt(g) over the scan grid
    let mut suffix = alloc::vec![0.0f64; grid.len()];
    let mut acc: f64 = 0.0;
    for (j, &t) in grid.iter().enumerate().rev() {
        acc = acc.max(fmath::sqrt(g_at(t)?.max(0.0)));
        suffix[j] = acc;
    }
    let envelope = |j: usize| -> f64 {
        let t = grid[j];
        let gain_term = xi_i * fmath::exp(-c1 * (t - start));
        gain_term.max(suffix[j])
    };
    let mut found = None;
    for j in 0..grid.len() {
        if envelope(j) <= target {
            found = Some(j);
            break;
        }
    }
    let j = found.ok_or_else(|| {
        ObserverError::Plan(format!(
            "switch condition for window {i} not met by t = {} (envelope {} > {target})",
            grid[grid.len() - 1],
            envelope(grid.len() - 1)
        ))
    })?;
    if j == 0 {
        return Ok(start);
    }
    // bisect between the last failing and first passing grid point; only the
    // closed-form gain term varies continuously between grid nodes
    let (mut lo, mut hi) = (grid[j - 1], grid[j]);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let gain_term = xi_i * fmath::exp(-c1 * (mid - start));
        if gain_term.max(suffix[j]) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Inputs for building a switching plan.
pub struct PlanSetup<'a> {
    pub g_field: &'a ScalarField,
    pub g_is_default: bool,
    pub big_l: f64,
    pub c1: f64,
    pub c2: f64,
    pub t0: f64,
    pub horizon: f64,
    pub env_knots: usize,
    pub box_grid: usize,
    pub phi: PhiOptions,
    pub seed: u64,
}

/// Build the switching plan: switch times and gain bounds first, then one
/// synthesized schedule per window (design radius = window index) on
/// `[t_{k-1}, t_{k+1}]`, clipped to the horizon. Gain overflow truncates the
/// plan with a note instead of failing it.
pub fn switch_plan(
    sys: &Arc<TriangularSystem>,
    setup: &PlanSetup<'_>,
) -> Result<SwitchPlan, ObserverError> {
    // times[j] holds the (j+1)-th switch time; xis[j] the (j+1)-th gain bound
    let mut times = alloc::vec![setup.t0];
    let beta1 = sys.beta(setup.t0, 2.0).map_err(|e| ObserverError::Plan(format!("{e}")))?;
    let mut xis = alloc::vec![xi_bound(setup.big_l, setup.c2, beta1)?];
    // window k spans [t_{k-1}, t_{k+1}], so every window starting before the
    // horizon needs one switch time beyond it
    let mut i = 2usize;
    while times.len() < 3 || times[times.len() - 2] < setup.horizon {
        let t_prev = *times.last().unwrap();
        let beta_v = sys
            .beta(t_prev, (i + 1) as f64)
            .map_err(|e| ObserverError::Plan(format!("{e}")))?;
        let xi_i = xi_bound(setup.big_l, setup.c2, beta_v)?;
        let t_i = if setup.g_is_default && (setup.c1 - 1.0).abs() < 1e-12 {
            switch_time_default_profile(i, t_prev, xi_i, setup.c1)
        } else {
            switch_time_general(i, t_prev, xi_i, setup.c1, setup.g_field, setup.horizon + 200.0)?
        };
        if t_i < t_prev + 1.0 {
            return Err(ObserverError::Plan(format!(
                "switch times must advance by at least one unit (t_{i} = {t_i})"
            )));
        }
        times.push(t_i);
        xis.push(xi_i);
        i += 1;
        if i > 64 {
            break;
        }
    }

    let mut segments = Vec::new();
    let mut truncated = None;
    // times[j] = t_{j+1}: window k runs [t_{k-1}, t_{k+1}] with t_0 = t_1
    for seg_k in 1..times.len() {
        let t_start = if seg_k == 1 { times[0] } else { times[seg_k - 2] };
        if t_start >= setup.horizon {
            break;
        }
        let t_mid = times[seg_k - 1];
        let t_end_full = times[seg_k];
        let t_end = t_end_full.min(setup.horizon);
        let big_r = seg_k as f64;
        let xi_k = xis[seg_k - 1];
        let beta_end = sys
            .beta(t_end_full, big_r)
            .map_err(|e| ObserverError::Plan(format!("{e}")))?;
        let zeta = beta_end + xi_k;
        let env = match build_envelopes(
            sys,
            setup.g_field,
            big_r,
            xi_k,
            t_start,
            t_end,
            setup.env_knots,
            setup.box_grid,
        ) {
            Ok(env) => env,
            Err(e) => {
                truncated = Some(format!("window {seg_k}: envelope build failed: {e}"));
                break;
            }
        };
        let params = SynthParams {
            big_l: setup.big_l,
            c1: setup.c1,
            c2: setup.c2,
            xi: xi_k,
            big_r,
            t0: t_start,
            horizon: t_end,
            knots: setup.phi.knots,
            seed: setup.seed ^ (seg_k as u64) << 8,
        };
        match synthesize(sys, env, params, &setup.phi) {
            Ok(schedule) => segments.push(SwitchSegment {
                k: seg_k,
                t_start,
                t_mid,
                t_end,
                xi: xi_k,
                zeta,
                schedule,
            }),
            Err(e @ SynthesisError::Overflow { .. }) => {
                truncated = Some(format!("window {seg_k}: {e}"));
                break;
            }
            Err(e) => return Err(ObserverError::Schedule(format!("window {seg_k}: {e}"))),
        }
    }
    Ok(SwitchPlan {
        t0: setup.t0,
        horizon: setup.horizon,
        times,
        segments,
        truncated,
    })
}

/// A jump of the concatenated estimate at a switch time.
#[derive(Clone, Debug)]
pub struct ZJump {
    pub t: f64,
    pub magnitude: f64,
}

/// Concatenated estimate over segment trajectories: piece `k` is trusted on
/// `[t_k, t_{k+1})`. `pieces` holds `(t_mid, t_end, observer trajectory)`
/// where the trajectory state is the stacked `[plant; observer]` pair and
/// only the observer half is read.
pub struct AssembledEstimate<'a> {
    pieces: &'a [(f64, f64, Trajectory)],
    n: usize,
}

impl<'a> AssembledEstimate<'a> {
    pub fn new(pieces: &'a [(f64, f64, Trajectory)], n: usize) -> Result<Self, ObserverError> {
        for w in pieces.windows(2) {
            if w[1].0 > w[0].1 + 1e-9 {
                return Err(ObserverError::Plan(format!(
                    "coverage gap between {} and {}",
                    w[0].1, w[1].0
                )));
            }
        }
        Ok(AssembledEstimate { pieces, n })
    }

    /// `Z(t)`: the estimate of the piece whose trusted half contains `t`.
    pub fn sample(&self, t: f64) -> Option<Vec<f64>> {
        let idx = self
            .pieces
            .iter()
            .position(|&(mid, end, _)| t >= mid && (t < end || end == self.pieces.last().unwrap().1))?;
        let full = self.pieces[idx].2.sample_at(t);
        Some(full[self.n..].to_vec())
    }

    /// Jump magnitudes at the interior hand-over times.
    pub fn jumps(&self) -> Vec<ZJump> {
        let mut out = Vec::new();
        for w in self.pieces.windows(2) {
            let t = w[1].0;
            let left = &w[0].2.sample_at(t)[self.n..];
            let right = &w[1].2.sample_at(t)[self.n..];
            let mut d = 0.0;
            for i in 0..self.n {
                let diff = left[i] - right[i];
                d += diff * diff;
            }
            out.push(ZJump { t, magnitude: fmath::sqrt(d) });
        }
        out
    }
}
