//! Inductive synthesis of the time-varying gain schedule.
//!
//! Starting from the trailing 2×2 block, each step borders the previous gain
//! matrix with a corner entry and an off-diagonal entry built from the
//! injection weight of the previous level:
//!
//! * the off-diagonal entry is nonposive, vanishes at `t0`, and divides by
//!   powers of the decay profile, which is what lets the quadratic form
//!   dominate the odd-power couplings at error scale `sqrt(g)`;
//! * the corner entry `p² / (L - 1) + L` keeps
//!   `det(P_k - I) = (L - 1)^k` identically and `P_k(t0) = L·I` exactly;
//! * the decrease rate `d_k` dips to `-M_k` on a transient window whose
//!   width `τ_k` shrinks like `1 / M_k`, so its running integral stays above
//!   `-k`.
//!
//! The injection weight φ for a level is synthesized by sampled maximization
//! of the Lyapunov ratio over the admissible error set (unit directions with
//! a floored output component, scales between the level-set radius and `ξ`,
//! plant values in the reachable box, worst-case factor coefficients in
//! closed form), then doubled and re-validated on a denser grid.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::envelopes::EnvelopeSet;
use crate::fmath;
use crate::linalg::{Cholesky, Mat};
use crate::rng;
use crate::system::{eval_b, vartheta, TriangularSystem};
use crate::timefn::{linspace, ramp01_dual, smoothstep, Dual, Pchip, TimeFunction};

/// Injection weights never sit below this floor (they must stay positive).
pub const PHI_FLOOR: f64 = 1e-6;

/// Synthesis aborts when any scheduled quantity passes this magnitude.
pub const OVERFLOW_LIMIT: f64 = 1e300;

/// Smallest output component sampled by the ratio maximization. Directions
/// closer to the kernel are covered by the level's own decrease inequality.
pub const OUTPUT_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct SynthParams {
    pub big_l: f64,
    pub c1: f64,
    pub c2: f64,
    pub xi: f64,
    pub big_r: f64,
    pub t0: f64,
    pub horizon: f64,
    /// knot count for sampled time functions
    pub knots: usize,
    pub seed: u64,
}

impl SynthParams {
    pub fn validate(&self, n: usize) -> Result<(), SynthesisError> {
        if !(self.big_l > 1.0) {
            return Err(SynthesisError::BadParams(format!("L must exceed 1, got {}", self.big_l)));
        }
        if !(self.c1 >= 0.5) {
            return Err(SynthesisError::BadParams(format!("c1 must be >= 1/2, got {}", self.c1)));
        }
        if !(self.c2 > 0.0) {
            return Err(SynthesisError::BadParams(format!("c2 must be positive, got {}", self.c2)));
        }
        if !(self.xi >= 1.0) {
            return Err(SynthesisError::BadParams(format!("xi must be >= 1, got {}", self.xi)));
        }
        if !(self.big_r > 0.0) {
            return Err(SynthesisError::BadParams(format!("R must be positive, got {}", self.big_r)));
        }
        if !(self.horizon > self.t0) {
            return Err(SynthesisError::BadParams("horizon must exceed t0".into()));
        }
        if n < 2 {
            return Err(SynthesisError::BadParams("need at least two states".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum SynthesisError {
    BadParams(String),
    NonFinite { level: usize, what: &'static str, t: f64 },
    Overflow { level: usize, what: &'static str, t: f64, value: f64 },
    PhiValidation { level: usize, t: f64, required: f64, provided: f64 },
    DecreaseRatePrecondition { at: f64, value: f64, c1: f64 },
    Structural { level: usize, what: String },
}

impl core::fmt::Display for SynthesisError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SynthesisError::BadParams(m) => write!(f, "bad synthesis parameters: {m}"),
            SynthesisError::NonFinite { level, what, t } => {
                write!(f, "level {level}: {what} is non-finite at t = {t}")
            }
            SynthesisError::Overflow { level, what, t, value } => write!(
                f,
                "level {level}: {what} exceeded the magnitude guard at t = {t} ({value:e}); \
                 the scheduled gains grow too fast for this horizon"
            ),
            SynthesisError::PhiValidation { level, t, required, provided } => write!(
                f,
                "level {level}: injection weight validation failed at t = {t} \
                 (needs {required:e}, has {provided:e}); envelopes likely underestimate"
            ),
            SynthesisError::DecreaseRatePrecondition { at, value, c1 } => write!(
                f,
                "decrease rate at t0+1 is {value} which does not exceed c1 = {c1} (t = {at})"
            ),
            SynthesisError::Structural { level, what } => {
                write!(f, "level {level}: structural invariant failed: {what}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SynthesisError {}

/// One level of the bordered construction (block size `k`, 2 ≤ k ≤ n).
#[derive(Clone, Debug)]
pub struct GainLevel {
    pub k: usize,
    /// power of the coupling this level adds on top of the previous block
    pub m: u32,
    pub vartheta: f64,
    /// corner entry of the bordered matrix (`p² / (L-1) + L`)
    pub corner: TimeFunction,
    /// off-diagonal border entry (nonpositive, zero at `t0`)
    pub border: TimeFunction,
    /// decrease rate `d_k`
    pub d: TimeFunction,
    /// transient dip magnitude `M_k`
    pub big_m: f64,
    /// transient window width `τ_k`
    pub tau: f64,
}

/// The complete synthesized schedule.
#[derive(Clone, Debug)]
pub struct GainSchedule {
    pub sys: Arc<TriangularSystem>,
    pub env: EnvelopeSet,
    pub params: SynthParams,
    /// levels 2..=n (index 0 holds k = 2)
    pub levels: Vec<GainLevel>,
    /// inductive injection weights `φ_k` for k = 2..n-1 (empty when n = 2)
    pub phis: Vec<TimeFunction>,
    /// relaxed final decrease rate (`d_n` minus the margin constant)
    pub dbar_final: TimeFunction,
    /// final injection weight used by the observer
    pub phi_final: TimeFunction,
}

impl GainSchedule {
    pub fn n(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn level(&self, k: usize) -> &GainLevel {
        &self.levels[k - 2]
    }

    /// Inductive relaxed rate `d_k - 1/2` for a non-final level.
    pub fn dbar_step(&self, k: usize) -> TimeFunction {
        dbar_step(&self.level(k).d)
    }

    pub fn phi_inductive(&self, k: usize) -> &TimeFunction {
        &self.phis[k - 2]
    }

    pub fn p_matrix(&self, k: usize, t: f64) -> Mat {
        assemble_p(&self.levels, self.params.big_l, k, t, false)
    }

    pub fn p_dot(&self, k: usize, t: f64) -> Mat {
        assemble_p(&self.levels, self.params.big_l, k, t, true)
    }

    pub fn p_full(&self, t: f64) -> Mat {
        self.p_matrix(self.n(), t)
    }

    pub fn p_dot_full(&self, t: f64) -> Mat {
        self.p_dot(self.n(), t)
    }

    /// Observer gain vector `φ(t) P(t)^{-1} h'` with `h = (1, 0, ..., 0)`.
    pub fn gain_vector(&self, t: f64) -> Result<Vec<f64>, String> {
        let p = self.p_full(t);
        let chol = Cholesky::new(&p)
            .map_err(|e| format!("gain matrix lost positive definiteness at t = {t}: {e}"))?;
        let mut e1 = vec![0.0; self.n()];
        e1[0] = 1.0;
        let mut v = chol.solve(&e1);
        let phi = self.phi_final.value(t);
        for x in &mut v {
            *x *= phi;
        }
        Ok(v)
    }
}

/// Nested assembly: level `k` contributes the corner/border pair at offset
/// `k_top - k`, and the innermost 1×1 block is the constant `L`.
fn assemble_p(levels: &[GainLevel], big_l: f64, k_top: usize, t: f64, deriv: bool) -> Mat {
    let mut p = Mat::zeros(k_top);
    for lvl in 2..=k_top {
        let o = k_top - lvl;
        let gl = &levels[lvl - 2];
        let (c, b) = if deriv {
            (gl.corner.deriv(t), gl.border.deriv(t))
        } else {
            (gl.corner.value(t), gl.border.value(t))
        };
        p[(o, o)] = c;
        p[(o, o + 1)] = b;
        p[(o + 1, o)] = b;
    }
    p[(k_top - 1, k_top - 1)] = if deriv { 0.0 } else { big_l };
    p
}

/// `d - 1/2`, the relaxed rate handed to the next extension step.
pub fn dbar_step(d: &TimeFunction) -> TimeFunction {
    let d = d.clone();
    TimeFunction::new(move |t| d.dual(t) - Dual::constant(0.5))
}

/// Relaxed final decrease rate: `d - c` up to `t0 + 1` and
/// `max(c1, d - c)` afterwards, with `c = min(d(t0+1) - c1, c2)`.
pub fn make_dbar(
    d: &TimeFunction,
    c1: f64,
    c2: f64,
    t0: f64,
) -> Result<TimeFunction, SynthesisError> {
    let d_at = d.value(t0 + 1.0);
    let c = (d_at - c1).min(c2);
    if !(c > 0.0) {
        return Err(SynthesisError::DecreaseRatePrecondition { at: t0 + 1.0, value: d_at, c1 });
    }
    let d = d.clone();
    Ok(TimeFunction::new(move |t| {
        let shifted = d.dual(t) - Dual::constant(c);
        if t <= t0 + 1.0 || shifted.v >= c1 {
            shifted
        } else {
            Dual::constant(c1)
        }
    }))
}

/// Base level (`k = 2`): the trailing 2×2 block.
pub fn synth_level2(
    sys: &TriangularSystem,
    env: &EnvelopeSet,
    params: &SynthParams,
) -> Result<GainLevel, SynthesisError> {
    let n = sys.dim();
    let m = sys.powers()[n - 2];
    let vt = vartheta(m, 100_000);
    let t0 = params.t0;
    let mut big_m = 0.0f64;
    for t in linspace(t0, t0 + 0.5, 257) {
        big_m = big_m.max(env.sigma.value(t));
    }
    if !fmath::is_finite(big_m) {
        return Err(SynthesisError::NonFinite { level: 2, what: "transient magnitude", t: t0 });
    }
    // degenerate drift-free case: no transient needed, full unit window
    let tau = if big_m <= 0.0 { 1.0 } else { (1.0 / big_m).min(1.0) };
    let theta = smoothstep(t0, tau);
    let nn = n as f64;
    let l_pow = fmath::powi(params.big_l, (m + 1) / 2);
    let g_exp = (m - 1) / 2;
    let border = {
        let theta = theta.clone();
        let sigma = env.sigma.clone();
        let w = env.w.clone();
        let g = env.g.clone();
        TimeFunction::new(move |t| {
            let th = theta.dual(t);
            let num = th * (Dual::constant(nn) + sigma.dual(t)) * l_pow;
            let den = w.dual(t) * g.dual(t).powi(g_exp) * vt;
            -(num / den)
        })
    };
    let d = {
        let ramp_a = t0 + tau / 2.0;
        let ramp_b = t0 + tau;
        TimeFunction::new(move |t| {
            let r = ramp01_dual(ramp_a, ramp_b, t);
            (Dual::constant(1.0) - r) * (-big_m) + r * nn
        })
    };
    let corner = corner_from_border(&border, params.big_l);
    let level =
        GainLevel { k: 2, m, vartheta: vt, corner, border, d, big_m, tau };
    check_level_magnitudes(&level, params)?;
    Ok(level)
}

/// Extension step: given level `k` and its injection weight, build level
/// `k + 1`.
pub fn extend_level(
    prev: &GainLevel,
    phi_prev: &TimeFunction,
    m_new: u32,
    env: &EnvelopeSet,
    params: &SynthParams,
) -> Result<GainLevel, SynthesisError> {
    let k_new = prev.k + 1;
    let vt = vartheta(m_new, 100_000);
    let t0 = params.t0;
    let xi2 = params.xi * params.xi;
    let dbar_prev = dbar_step(&prev.d);
    let mut worst = f64::NEG_INFINITY;
    for t in linspace(t0, t0 + 0.5, 513) {
        // the inner maximum over s in [0, φ ξ²] sits at the right endpoint
        let v = -dbar_prev.value(t) + phi_prev.value(t) * xi2 / env.g.value(t) + 0.25;
        worst = worst.max(v);
    }
    if !fmath::is_finite(worst) {
        return Err(SynthesisError::Overflow {
            level: k_new,
            what: "transient magnitude",
            t: t0,
            value: worst,
        });
    }
    let big_m = fmath::abs(worst);
    let tau = if big_m <= 0.0 { 0.5 } else { (1.0 / (4.0 * big_m)).min(0.5) };
    let theta = smoothstep(t0, tau.max(f64::MIN_POSITIVE));
    let gamma = (m_new + 1) / 2;
    let d = {
        let ramp_a = t0 + tau / 2.0;
        let ramp_b = t0 + tau;
        let dbar_prev = dbar_prev.clone();
        // blended as (1-r)(-M) + r·target: the factored form cancels exactly
        // at the window end even when M dwarfs the target
        TimeFunction::new(move |t| {
            let r = ramp01_dual(ramp_a, ramp_b, t);
            let target = dbar_prev.dual(t) - Dual::constant(0.25);
            (Dual::constant(1.0) - r) * (-big_m) + r * target
        })
    };
    let border = {
        let theta = theta.clone();
        let g = env.g.clone();
        let w = env.w.clone();
        let phi = phi_prev.clone();
        TimeFunction::new(move |t| {
            let zeta = theta.dual(t)
                / ((g.dual(t) * 0.25).powi(gamma - 1) * gamma as f64);
            -(zeta * phi.dual(t).powi(gamma)) / (w.dual(t) * vt)
        })
    };
    let corner = corner_from_border(&border, params.big_l);
    let level = GainLevel { k: k_new, m: m_new, vartheta: vt, corner, border, d, big_m, tau };
    check_level_magnitudes(&level, params)?;
    // the new rate may never exceed the previous relaxed rate
    for t in linspace(t0, params.horizon, 257) {
        let lhs = level.d.value(t);
        let rhs = dbar_prev.value(t);
        if lhs > rhs + 1e-9 * (1.0 + fmath::abs(rhs)) {
            return Err(SynthesisError::Structural {
                level: k_new,
                what: format!("rate {lhs} exceeds previous relaxed rate {rhs} at t = {t}"),
            });
        }
    }
    Ok(level)
}

/// Corner entry from its defining relation to the border entry:
/// `p²/(L-1) + L` (which is what keeps the shifted determinant constant).
pub fn corner_from_border(border: &TimeFunction, big_l: f64) -> TimeFunction {
    let border = border.clone();
    // ratio of consecutive shifted determinants is 1/(L-1) by the identity
    let inv = 1.0 / (big_l - 1.0);
    TimeFunction::new(move |t| {
        let p = border.dual(t);
        p * p * inv + Dual::constant(big_l)
    })
}

fn check_level_magnitudes(level: &GainLevel, params: &SynthParams) -> Result<(), SynthesisError> {
    for t in linspace(params.t0, params.horizon, 513) {
        for (what, f) in [
            ("corner entry", &level.corner),
            ("border entry", &level.border),
            ("decrease rate", &level.d),
        ] {
            let d = f.dual(t);
            if !d.v.is_finite() {
                return Err(SynthesisError::NonFinite { level: level.k, what, t });
            }
            if fmath::abs(d.v) > OVERFLOW_LIMIT {
                return Err(SynthesisError::Overflow { level: level.k, what, t, value: d.v });
            }
        }
        if level.border.value(t) > 1e-12 {
            return Err(SynthesisError::Structural {
                level: level.k,
                what: format!("border entry positive at t = {t}"),
            });
        }
    }
    Ok(())
}

/// Tuning for the sampled ratio maximization.
#[derive(Clone, Debug)]
pub struct PhiOptions {
    pub knots: usize,
    /// circle/sphere samples for the non-output components
    pub hat_dirs: usize,
    /// log-spaced output-component magnitudes per sign
    pub w1_points: usize,
    pub sigma_points: usize,
    pub y_points: usize,
    pub x_points: usize,
    pub validation_factor: usize,
}

impl Default for PhiOptions {
    fn default() -> Self {
        PhiOptions {
            knots: 96,
            hat_dirs: 16,
            w1_points: 26,
            sigma_points: 12,
            y_points: 17,
            x_points: 17,
            validation_factor: 10,
        }
    }
}

/// Shared per-time data for ratio evaluations.
pub(crate) struct KnotData {
    pub p: Mat,
    pub pd: Mat,
    pub sigma: f64,
    pub beta: f64,
    pub g: f64,
    /// coupling values per (local row, y grid index)
    pub a_vals: Vec<Vec<f64>>,
    pub powers: Vec<u32>,
    pub k: usize,
}

pub(crate) fn knot_data(
    sys: &TriangularSystem,
    env: &EnvelopeSet,
    levels: &[GainLevel],
    big_l: f64,
    k: usize,
    t: f64,
    y_points: usize,
) -> KnotData {
    let n = sys.dim();
    let p = assemble_p(levels, big_l, k, t, false);
    let pd = assemble_p(levels, big_l, k, t, true);
    let sigma = env.sigma.value(t);
    let beta = env.beta_r.value(t);
    let g = env.g.value(t);
    let mut a_vals = Vec::with_capacity(k.saturating_sub(1));
    let mut powers = Vec::with_capacity(k.saturating_sub(1));
    for r in 0..k - 1 {
        let ci = n - k + r;
        let mut row = Vec::with_capacity(y_points);
        for y in linspace(-beta, beta, y_points) {
            row.push(sys.coupling_at(ci, t, y).unwrap_or(f64::NAN));
        }
        a_vals.push(row);
        powers.push(sys.powers()[ci]);
    }
    KnotData { p, pd, sigma, beta, g, a_vals, powers, k }
}

/// Extrema of `b_m(x, e_arg)` over `|x| <= half`. Exact for `m <= 3`
/// (constant, or a parabola with vertex `e/2`), gridded above.
fn b_extrema(m: u32, half: f64, e_arg: f64, x_points: usize) -> (f64, f64) {
    if m == 1 {
        return (1.0, 1.0);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut consider = |alpha: f64| {
        let v = eval_b(m, alpha, e_arg);
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    };
    consider(-half);
    consider(half);
    if m == 3 {
        let vertex = e_arg / 2.0;
        if vertex > -half && vertex < half {
            consider(vertex);
        }
    } else {
        for x in linspace(-half, half, x_points) {
            consider(x);
        }
    }
    (lo, hi)
}

/// Supremum over plant values, output values and the factor-coefficient ball
/// of the quadratic-form numerator
/// `w' P A(w σ) w + ½ w' Ṗ w` at a unit direction `w` and error scale `σ`.
/// Returns `(sup, scale)`, where `scale` tracks the term magnitudes for
/// scale-aware tolerances.
pub(crate) fn numerator_sup(kd: &KnotData, w: &[f64], sigma_scale: f64, x_points: usize) -> (f64, f64) {
    let k = kd.k;
    let pw = kd.p.matvec(w);
    let half_pdot = 0.5 * kd.pd.quad_form(w);
    // the form is affine in the factor coefficients; the ball supremum adds
    // sigma times the coefficient norm (scaled to survive squaring near the
    // top of the f64 range)
    let mut qmax = 0.0f64;
    for i in 0..k {
        for j in 0..=i {
            let c = fmath::abs(pw[i] * w[j]);
            if c > qmax {
                qmax = c;
            }
        }
    }
    let q_term = if qmax == 0.0 {
        0.0
    } else {
        let mut qnorm2 = 0.0;
        for i in 0..k {
            for j in 0..=i {
                let c = pw[i] * w[j] / qmax;
                qnorm2 += c * c;
            }
        }
        kd.sigma * qmax * fmath::sqrt(qnorm2)
    };
    let mut coefs = [0.0f64; 8];
    let mut bmins = [0.0f64; 8];
    let mut bmaxs = [0.0f64; 8];
    for r in 0..k - 1 {
        let e_arg = sigma_scale * w[r + 1];
        let (lo, hi) = b_extrema(kd.powers[r], kd.beta, e_arg, x_points);
        coefs[r] = pw[r] * w[r + 1];
        bmins[r] = lo;
        bmaxs[r] = hi;
    }
    let y_count = kd.a_vals.first().map_or(0, Vec::len);
    let mut coupling_sup = f64::NEG_INFINITY;
    let mut coupling_mag = 0.0f64;
    for yi in 0..y_count {
        let mut s = 0.0;
        let mut mag = 0.0;
        for r in 0..k - 1 {
            let a = kd.a_vals[r][yi];
            let b = if coefs[r] >= 0.0 { bmaxs[r] } else { bmins[r] };
            s += coefs[r] * a * b;
            mag += fmath::abs(coefs[r]) * a * bmaxs[r].max(fmath::abs(bmins[r]));
        }
        if s > coupling_sup {
            coupling_sup = s;
        }
        if mag > coupling_mag {
            coupling_mag = mag;
        }
    }
    if y_count == 0 {
        coupling_sup = 0.0;
    }
    let sup = half_pdot + q_term + coupling_sup;
    let scale = fmath::abs(half_pdot) + q_term + coupling_mag;
    (sup, scale)
}

/// Deterministic direction set for the non-output components.
fn hat_directions(dim: usize, count: usize, rng: &mut rng::Rng, offset: f64) -> Vec<Vec<f64>> {
    match dim {
        0 => vec![Vec::new()],
        1 => vec![vec![1.0], vec![-1.0]],
        2 => {
            let mut out = Vec::with_capacity(count);
            for j in 0..count {
                let th = 2.0 * core::f64::consts::PI * (j as f64 + offset) / count as f64;
                out.push(vec![fmath::cos(th), fmath::sin(th)]);
            }
            out
        }
        _ => {
            let mut out = Vec::with_capacity(count + 2 * dim);
            for axis in 0..dim {
                let mut v = vec![0.0; dim];
                v[axis] = 1.0;
                out.push(v.clone());
                v[axis] = -1.0;
                out.push(v);
            }
            for _ in 0..count {
                out.push(rng::unit_sphere(rng, dim));
            }
            out
        }
    }
}

/// Signed output-component magnitudes, log-spaced down to the floor plus a
/// linear tail near 1.
fn w1_values(points: usize, offset: f64) -> Vec<f64> {
    let mut mags = Vec::with_capacity(points + 6);
    let lo = fmath::ln(OUTPUT_FLOOR);
    let hi = fmath::ln(0.45);
    for j in 0..points {
        let u = (j as f64 + offset) / points as f64;
        mags.push(fmath::exp(lo + (hi - lo) * u));
    }
    for &v in &[0.55, 0.7, 0.82, 0.92, 0.985, 1.0] {
        mags.push(v);
    }
    let mut out = Vec::with_capacity(2 * mags.len());
    for &v in &mags {
        out.push(v);
        if v < 1.0 {
            out.push(-v);
        }
    }
    out
}

struct RatioSampling {
    hats: Vec<Vec<f64>>,
    w1s: Vec<f64>,
    sigma_points: usize,
    x_points: usize,
}

/// Largest sampled Lyapunov ratio
/// `(numerator_sup + dbar·w'Pw) / |output component|²` at time `t`.
fn worst_ratio(
    kd: &KnotData,
    dbar_t: f64,
    xi: f64,
    sampling: &RatioSampling,
) -> f64 {
    let k = kd.k;
    let mut worst = f64::NEG_INFINITY;
    let mut w = vec![0.0; k];
    for hat in &sampling.hats {
        for &w1 in &sampling.w1s {
            let tail = fmath::sqrt((1.0 - w1 * w1).max(0.0));
            w[0] = w1;
            for (i, h) in hat.iter().enumerate() {
                w[i + 1] = h * tail;
            }
            let wpw = kd.p.quad_form(&w);
            if !(wpw > 0.0) || !wpw.is_finite() {
                continue;
            }
            let rho = fmath::sqrt(kd.g / wpw);
            if rho > xi {
                continue;
            }
            let lo = rho.max(1e-300);
            let ratio_sig = xi / lo;
            for si in 0..sampling.sigma_points {
                let u = si as f64 / (sampling.sigma_points - 1) as f64;
                let sigma_scale = lo * fmath::powf(ratio_sig, u);
                let (sup, _) = numerator_sup(kd, &w, sigma_scale, sampling.x_points);
                let num = sup + dbar_t * wpw;
                let r = num / (w1 * w1);
                if r > worst {
                    worst = r;
                }
            }
        }
    }
    worst
}

/// Synthesize the injection weight for block size `k` against a relaxed rate.
///
/// Knot values are the sampled ratio maxima doubled (floored at
/// [`PHI_FLOOR`]); a validation pass on a `validation_factor`-denser grid
/// with shifted sampling re-checks the inequality, doubling the weight up to
/// three times before giving up.
pub fn synth_phi(
    sys: &TriangularSystem,
    env: &EnvelopeSet,
    levels: &[GainLevel],
    big_l: f64,
    k: usize,
    dbar: &TimeFunction,
    xi: f64,
    t0: f64,
    horizon: f64,
    opts: &PhiOptions,
    seed: u64,
) -> Result<TimeFunction, SynthesisError> {
    let mut rng_synth = rng::substream(seed, "phi-synth");
    let sampling = RatioSampling {
        hats: hat_directions(k - 1, opts.hat_dirs, &mut rng_synth, 0.0),
        w1s: w1_values(opts.w1_points, 0.0),
        sigma_points: opts.sigma_points.max(3),
        x_points: opts.x_points,
    };
    let grid = linspace(t0, horizon, opts.knots.max(9));
    let mut values = Vec::with_capacity(grid.len());
    for &t in &grid {
        let kd = knot_data(sys, env, levels, big_l, k, t, opts.y_points);
        let ratio = worst_ratio(&kd, dbar.value(t), xi, &sampling);
        if !fmath::is_finite(ratio) {
            return Err(SynthesisError::NonFinite { level: k, what: "injection ratio", t });
        }
        let v = (2.0 * ratio).max(PHI_FLOOR);
        if v > OVERFLOW_LIMIT {
            return Err(SynthesisError::Overflow {
                level: k,
                what: "injection weight",
                t,
                value: v,
            });
        }
        values.push(v);
    }

    let mut rng_val = rng::substream(seed, "phi-validate");
    let val_sampling = RatioSampling {
        hats: hat_directions(k - 1, (opts.hat_dirs / 2).max(6), &mut rng_val, 0.5),
        w1s: w1_values((opts.w1_points / 2).max(8), 0.5),
        sigma_points: (opts.sigma_points / 2).max(3),
        x_points: opts.x_points,
    };
    let val_grid = linspace(t0, horizon, opts.validation_factor * grid.len());
    for _round in 0..4 {
        let phi = TimeFunction::from_pchip(Pchip::new(grid.clone(), values.clone()));
        let mut worst_violation: Option<(f64, f64, f64)> = None;
        for &t in &val_grid {
            let kd = knot_data(sys, env, levels, big_l, k, t, opts.y_points);
            let required = worst_ratio(&kd, dbar.value(t), xi, &val_sampling);
            let provided = phi.value(t);
            let scale = fmath::abs(required).max(provided).max(1.0);
            if required > provided + 1e-8 * scale {
                let deficit = required - provided;
                if worst_violation.map_or(true, |(_, _, d)| deficit > d) {
                    worst_violation = Some((t, required, deficit));
                }
            }
        }
        match worst_violation {
            None => return Ok(phi),
            Some((t, required, _)) => {
                let mut overflowed = false;
                for v in &mut values {
                    *v *= 2.0;
                    if *v > OVERFLOW_LIMIT {
                        overflowed = true;
                    }
                }
                if overflowed {
                    return Err(SynthesisError::Overflow {
                        level: k,
                        what: "injection weight",
                        t,
                        value: required,
                    });
                }
            }
        }
    }
    let phi = TimeFunction::from_pchip(Pchip::new(grid, values));
    // report the last violation precisely
    for &t in &val_grid {
        let kd = knot_data(sys, env, levels, big_l, k, t, opts.y_points);
        let required = worst_ratio(&kd, dbar.value(t), xi, &val_sampling);
        let provided = phi.value(t);
        if required > provided + 1e-8 * fmath::abs(required).max(provided).max(1.0) {
            return Err(SynthesisError::PhiValidation { level: k, t, required, provided });
        }
    }
    Ok(phi)
}

/// Run the full construction: base level, alternating weight synthesis and
/// extension up to the state dimension, then the relaxed final rate and the
/// final injection weight.
pub fn synthesize(
    sys: &Arc<TriangularSystem>,
    env: EnvelopeSet,
    params: SynthParams,
    opts: &PhiOptions,
) -> Result<GainSchedule, SynthesisError> {
    let n = sys.dim();
    params.validate(n)?;
    let mut levels = vec![synth_level2(sys, &env, &params)?];
    let mut phis = Vec::new();
    while levels.last().unwrap().k < n {
        let k = levels.last().unwrap().k;
        let dbar = dbar_step(&levels.last().unwrap().d);
        let phi_k = synth_phi(
            sys,
            &env,
            &levels,
            params.big_l,
            k,
            &dbar,
            params.xi,
            params.t0,
            params.horizon,
            opts,
            params.seed ^ k as u64,
        )?;
        let m_new = sys.powers()[n - k - 1];
        let next = extend_level(levels.last().unwrap(), &phi_k, m_new, &env, &params)?;
        phis.push(phi_k);
        levels.push(next);
    }
    let dbar_final = make_dbar(&levels.last().unwrap().d, params.c1, params.c2, params.t0)?;
    let phi_final = synth_phi(
        sys,
        &env,
        &levels,
        params.big_l,
        n,
        &dbar_final,
        params.xi,
        params.t0,
        params.horizon,
        opts,
        params.seed ^ 0x5f5f,
    )?;
    let schedule = GainSchedule {
        sys: Arc::clone(sys),
        env,
        params,
        levels,
        phis,
        dbar_final,
        phi_final,
    };
    // exact-by-construction anchors
    let t0 = schedule.params.t0;
    let p0 = schedule.p_full(t0);
    let big_l = schedule.params.big_l;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { big_l } else { 0.0 };
            if fmath::abs(p0[(i, j)] - want) > 1e-12 * big_l {
                return Err(SynthesisError::Structural {
                    level: n,
                    what: format!(
                        "gain matrix at t0 is not L·I: entry ({i},{j}) = {}",
                        p0[(i, j)]
                    ),
                });
            }
        }
    }
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelopes::build_envelopes;
    use crate::expr::ScalarField;
    use crate::system::test_fixtures::{example_3state, linear_chain2, pure_chain2};

    fn default_g() -> ScalarField {
        ScalarField::parse("0.5*exp(-t)", &["t"], "g").unwrap()
    }

    fn quick_opts() -> PhiOptions {
        PhiOptions { knots: 33, hat_dirs: 12, w1_points: 18, sigma_points: 8, validation_factor: 4, ..PhiOptions::default() }
    }

    fn params(xi: f64, big_r: f64, horizon: f64, n: usize) -> SynthParams {
        SynthParams {
            big_l: 2.0,
            c1: 1.0,
            c2: n as f64,
            xi,
            big_r,
            t0: 0.0,
            horizon,
            knots: 33,
            seed: 42,
        }
    }

    fn schedule_for(
        sys: &TriangularSystem,
        xi: f64,
        big_r: f64,
        horizon: f64,
    ) -> GainSchedule {
        let sys = Arc::new(sys.clone());
        let p = params(xi, big_r, horizon, sys.dim());
        let env =
            build_envelopes(&sys, &default_g(), big_r, xi, p.t0, horizon, 33, 11).unwrap();
        synthesize(&sys, env, p, &quick_opts()).unwrap()
    }

    #[test]
    fn base_level_anchors() {
        let sys = pure_chain2();
        let p = params(2.0, 1.0, 3.0, 2);
        let env = build_envelopes(
            &Arc::new(sys.clone()),
            &default_g(),
            1.0,
            2.0,
            0.0,
            3.0,
            33,
            11,
        )
        .unwrap();
        let lvl = synth_level2(&sys, &env, &p).unwrap();
        // border vanishes at t0 and stays nonpositive
        assert_eq!(lvl.border.value(0.0), 0.0);
        for t in linspace(0.0, 3.0, 64) {
            assert!(lvl.border.value(t) <= 0.0);
        }
        // corner at t0 is exactly L
        assert_eq!(lvl.corner.value(0.0), 2.0);
        // drift-free chain: no transient, full unit window
        assert_eq!(lvl.big_m, 0.0);
        assert_eq!(lvl.tau, 1.0);
        // rate ramps 0 -> n and holds
        assert_eq!(lvl.d.value(0.0), 0.0);
        assert_eq!(lvl.d.value(1.0), 2.0);
        assert_eq!(lvl.d.value(2.5), 2.0);
    }

    #[test]
    fn base_level_det_identity_on_grid() {
        let sched = schedule_for(&pure_chain2(), 2.0, 1.0, 3.0);
        for t in linspace(0.0, 3.0, 100) {
            let pm = sched.p_matrix(2, t).sub_identity_scaled(1.0);
            let det = crate::linalg::det_lu(&pm);
            assert!(
                fmath::abs(det - 1.0) <= 1e-6,
                "det(P2 - I) = {det} at t = {t}"
            );
        }
    }

    #[test]
    fn schedule_t0_matrix_is_l_times_identity() {
        let sched = schedule_for(&linear_chain2(), 2.0, 1.0, 10.0);
        let p0 = sched.p_full(0.0);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 2.0 } else { 0.0 };
                assert!(fmath::abs(p0[(i, j)] - want) <= 1e-12);
            }
        }
    }

    #[test]
    fn linear_three_state_full_induction() {
        // m = 1 everywhere keeps every scheduled quantity bounded, so the
        // shifted determinant identity is checkable over the whole horizon.
        let f1 = ScalarField::parse("0", &["t", "x1"], "f1").unwrap();
        let f2 = ScalarField::parse("0", &["t", "x1", "x2"], "f2").unwrap();
        let f3 = ScalarField::parse("0", &["t", "x1", "x2", "x3"], "f3").unwrap();
        let a1 = ScalarField::parse("1", &["t", "x1"], "a1").unwrap();
        let a2 = ScalarField::parse("1", &["t", "x1"], "a2").unwrap();
        let beta = ScalarField::parse("s*(2+t+t^2)", &["t", "s"], "beta").unwrap();
        let sys = crate::system::TriangularSystem::new(
            vec![1, 1],
            vec![f1, f2, f3],
            vec![a1, a2],
            beta,
        )
        .unwrap();
        let sched = schedule_for(&sys, 2.0, 1.0, 8.0);
        assert_eq!(sched.levels.len(), 2);
        assert_eq!(sched.phis.len(), 1);
        // nested determinant identity at both sizes
        for t in linspace(0.0, 8.0, 50) {
            let d2 = crate::linalg::det_lu(&sched.p_matrix(2, t).sub_identity_scaled(1.0));
            let d3 = crate::linalg::det_lu(&sched.p_matrix(3, t).sub_identity_scaled(1.0));
            assert!(fmath::abs(d2 - 1.0) <= 1e-6, "level 2 det {d2} at {t}");
            assert!(fmath::abs(d3 - 1.0) <= 1e-6, "level 3 det {d3} at {t}");
        }
        // m = 1 collapses gamma to 1: the border of level 3 is
        // -theta * phi / (w * 1), so at the window end it equals -phi/w
        let lvl3 = sched.level(3);
        assert_eq!(lvl3.m, 1);
        assert_eq!(lvl3.vartheta, 1.0);
        let t = 4.0;
        let expect = -sched.phi_inductive(2).value(t) / sched.env.w.value(t);
        assert!(
            fmath::abs(lvl3.border.value(t) - expect) <= 1e-9 * fmath::abs(expect),
            "{} vs {expect}",
            lvl3.border.value(t)
        );
    }

    #[test]
    fn dbar_construction_examples() {
        // constant rate 2, c1 = 1, c2 = 3: c = 1 and the relaxed rate is 1
        let d = TimeFunction::constant(2.0);
        let dbar = make_dbar(&d, 1.0, 3.0, 0.0).unwrap();
        for t in [0.0, 0.5, 1.0, 2.0, 10.0] {
            assert!((dbar.value(t) - 1.0).abs() < 1e-15);
        }
        // rate barely above c1: tiny c, relaxed rate clamps at c1 on the tail
        let d = TimeFunction::constant(1.0 + 1e-6);
        let dbar = make_dbar(&d, 1.0, 3.0, 0.0).unwrap();
        assert!((dbar.value(5.0) - 1.0).abs() < 1e-12);
        assert!(dbar.value(5.0) < d.value(5.0));
        // a dip below c1 + c after t0+1 clamps at c1 but stays below d
        let d = TimeFunction::new(|t| {
            let dip = if (2.0..3.0).contains(&t) { 0.8 } else { 2.0 };
            Dual::constant(dip)
        });
        let dbar = make_dbar(&d, 0.5, 3.0, 0.0).unwrap();
        for t in linspace(2.1, 2.9, 10) {
            assert!((dbar.value(t) - 0.5).abs() < 1e-15);
            assert!(dbar.value(t) < d.value(t));
        }
    }

    #[test]
    fn dbar_precondition_rejected() {
        let d = TimeFunction::constant(0.9);
        assert!(matches!(
            make_dbar(&d, 1.0, 3.0, 0.0),
            Err(SynthesisError::DecreaseRatePrecondition { .. })
        ));
    }

    #[test]
    fn phi_floor_for_strictly_decreasing_case() {
        // A standalone level whose form is negative definite everywhere:
        // border 0, corner L (so P = L·I), rate d = 2 with dbar = 1/2 and a
        // drift-free system with a tiny box. The ratio is negative at every
        // sample, so the weight sits at the floor.
        let sys = linear_chain2();
        let xi = 1.0;
        let sysa = Arc::new(sys.clone());
        let env = build_envelopes(&sysa, &default_g(), 0.5, xi, 0.0, 2.0, 17, 9).unwrap();
        let levels = vec![GainLevel {
            k: 2,
            m: 1,
            vartheta: 1.0,
            corner: TimeFunction::constant(2.0),
            border: TimeFunction::constant(0.0),
            d: TimeFunction::constant(2.0),
            big_m: 0.0,
            tau: 1.0,
        }];
        // coupling is +1, so the (0,1) form can reach +|coef|: with dbar
        // very negative the whole numerator is negative and phi floors
        let dbar = TimeFunction::constant(-50.0);
        let phi = synth_phi(&sys, &env, &levels, 2.0, 2, &dbar, xi, 0.0, 2.0, &quick_opts(), 3)
            .unwrap();
        for t in linspace(0.0, 2.0, 9) {
            assert_eq!(phi.value(t), PHI_FLOOR);
        }
    }

    #[test]
    fn phi_validates_and_covers_near_kernel_directions() {
        let sys = linear_chain2();
        let sched = schedule_for(&sys, 2.0, 1.0, 6.0);
        // spot-check the final inequality margin on a fresh sample set
        let mut rng = crate::rng::seeded(99);
        let opts = quick_opts();
        for _ in 0..200 {
            let t = crate::rng::uniform_in(&mut rng, 0.0, 6.0);
            let kd = knot_data(&sys, &sched.env, &sched.levels, 2.0, 2, t, opts.y_points);
            let w_dir = crate::rng::unit_sphere(&mut rng, 2);
            if fmath::abs(w_dir[0]) < 1e-12 {
                continue;
            }
            let wpw = kd.p.quad_form(&w_dir);
            let rho = fmath::sqrt(kd.g / wpw);
            let sigma_scale =
                crate::rng::uniform_in(&mut rng, rho.min(2.0), 2.0).max(rho);
            let (sup, scale) = numerator_sup(&kd, &w_dir, sigma_scale, opts.x_points);
            let lhs = sup + sched.dbar_final.value(t) * wpw;
            let rhs = sched.phi_final.value(t) * w_dir[0] * w_dir[0];
            assert!(
                lhs <= rhs + 1e-8 * scale.max(rhs).max(1.0),
                "violated at t={t}, w={w_dir:?}, sigma={sigma_scale}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn extension_window_shrinks_with_magnitude() {
        // M = 0 gives the half-width window; positive M gives 1/(4M)
        let sys = example_3state();
        let sysa = Arc::new(sys.clone());
        let p = params(1.0, 0.5, 1.5, 3);
        let env = build_envelopes(&sysa, &default_g(), 0.5, 1.0, 0.0, 1.5, 17, 9).unwrap();
        let lvl2 = synth_level2(&sys, &env, &p).unwrap();
        let phi = TimeFunction::constant(1.0);
        let lvl3 = extend_level(&lvl2, &phi, sys.powers()[0], &env, &p).unwrap();
        assert_eq!(lvl3.k, 3);
        assert!(lvl3.big_m > 0.0);
        assert!((lvl3.tau - (0.25 / lvl3.big_m).min(0.5)).abs() < 1e-15);
        // border vanishes at t0
        assert_eq!(lvl3.border.value(0.0), 0.0);
        // the new rate never exceeds the previous relaxed rate
        let dbar2 = dbar_step(&lvl2.d);
        for t in linspace(0.0, 1.5, 64) {
            assert!(lvl3.d.value(t) <= dbar2.value(t) + 1e-9);
        }
    }

    #[test]
    fn gain_vector_diagonal_case() {
        let sched = schedule_for(&linear_chain2(), 2.0, 1.0, 4.0);
        // at t0 the matrix is L·I so the gain is (phi/L, 0)
        let k = sched.gain_vector(0.0).unwrap();
        let phi0 = sched.phi_final.value(0.0);
        assert!((k[0] - phi0 / 2.0).abs() <= 1e-12 * (1.0 + phi0));
        assert!(fmath::abs(k[1]) <= 1e-12 * (1.0 + phi0));
    }
}
