//! Validated scalar envelopes consumed by the gain synthesis.
//!
//! * `g` — the decay profile: `0 < g < 1`, `g' >= -g`, `g -> 0`.
//! * `sigma` — a nondecreasing upper bound for the summed worst-case drift
//!   partials over the reachable box of half-width `2 beta(t, R) + xi`.
//! * `w` — a positive lower bound for every coupling coefficient over the
//!   output range.
//! * `beta_r` — `t -> beta(t, R)`, the completeness bound at the design
//!   radius; the output set is over-approximated by `[-beta_r, beta_r]`.
//!
//! Discretized sup/inf values carry a multiplicative safety factor of 1.1;
//! conservatism only inflates gains and never breaks the decrease argument.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::expr::{extremum_on_box, ExtremumMode, FieldError, ScalarField};
use crate::fmath;
use crate::rng;
use crate::sim;
use crate::system::{SystemError, TriangularSystem};
use crate::timefn::{linspace, Dual, Pchip, TimeFunction};

/// Safety factor applied to every discretized extremum.
pub const SAFETY: f64 = 1.1;

#[derive(Clone, Debug)]
pub enum EnvelopeError {
    Field(FieldError),
    System(SystemError),
    DecayProfileInvalid(String),
    CouplingFloorNotPositive { t: f64, value: f64 },
    NonFinite { what: &'static str, t: f64 },
}

impl core::fmt::Display for EnvelopeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EnvelopeError::Field(e) => write!(f, "{e}"),
            EnvelopeError::System(e) => write!(f, "{e}"),
            EnvelopeError::DecayProfileInvalid(msg) => write!(f, "decay profile invalid: {msg}"),
            EnvelopeError::CouplingFloorNotPositive { t, value } => {
                write!(f, "coupling floor w({t}) = {value} is not positive")
            }
            EnvelopeError::NonFinite { what, t } => write!(f, "{what} is non-finite at t = {t}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EnvelopeError {}

impl From<FieldError> for EnvelopeError {
    fn from(e: FieldError) -> Self {
        EnvelopeError::Field(e)
    }
}

impl From<SystemError> for EnvelopeError {
    fn from(e: SystemError) -> Self {
        EnvelopeError::System(e)
    }
}

/// The bundle of validated envelopes for one design radius and gain bound.
#[derive(Clone, Debug)]
pub struct EnvelopeSet {
    pub g: TimeFunction,
    pub sigma: TimeFunction,
    pub w: TimeFunction,
    pub beta_r: TimeFunction,
    pub big_r: f64,
    pub xi: f64,
    pub t0: f64,
    pub horizon: f64,
}

/// Outcome of the decay-profile checks on a dense grid.
#[derive(Clone, Debug)]
pub struct DecayProfileReport {
    pub pass: bool,
    /// witness for a violation of `0 < g < 1`
    pub range_violation: Option<(f64, f64)>,
    /// witness for a violation of `g' >= -g`
    pub slope_violation: Option<(f64, f64, f64)>,
    pub g_end: f64,
    pub target: f64,
    pub target_met: bool,
}

/// Check the decay profile on a 1000-point grid with its symbolic
/// derivative, and report the terminal value against `target_precision`
/// (the profile must let `sqrt(g)` reach the target by the horizon).
pub fn validate_g(
    g_field: &ScalarField,
    t0: f64,
    horizon: f64,
    target_precision: f64,
) -> Result<DecayProfileReport, EnvelopeError> {
    let gdot = g_field.differentiate("t")?;
    let mut range_violation = None;
    let mut slope_violation = None;
    for t in linspace(t0, horizon, 1000) {
        let gv = g_field.eval(&[t])?;
        let gd = gdot.eval(&[t])?;
        if !(gv > 0.0 && gv < 1.0) && range_violation.is_none() {
            range_violation = Some((t, gv));
        }
        if gd < -gv - 1e-12 && slope_violation.is_none() {
            slope_violation = Some((t, gd, gv));
        }
    }
    let g_end = g_field.eval(&[horizon])?;
    let target_met = g_end <= target_precision * target_precision;
    Ok(DecayProfileReport {
        pass: range_violation.is_none() && slope_violation.is_none() && target_met,
        range_violation,
        slope_violation,
        g_end,
        target: target_precision,
        target_met,
    })
}

/// Witness for a completeness-bound violation.
#[derive(Clone, Debug)]
pub struct BetaWitness {
    pub trial: usize,
    pub t: f64,
    pub x_norm: f64,
    pub bound: f64,
}

#[derive(Clone, Debug)]
pub struct BetaValidationReport {
    pub pass: bool,
    pub trials: usize,
    pub witness: Option<BetaWitness>,
    /// set when `beta(t, s) >= s` failed on the check grid
    pub identity_witness: Option<(f64, f64, f64)>,
}

/// Monte Carlo validation of the completeness bound: simulate `trials`
/// plants from initial states uniform in the ball of radius `big_r` and
/// check `|x(t)| <= beta(t, |x0|)` at every accepted integration step, plus
/// `beta(t, s) >= s` on a grid.
pub fn validate_beta(
    sys: &TriangularSystem,
    big_r: f64,
    t0: f64,
    horizon: f64,
    trials: usize,
    step: f64,
    seed: u64,
) -> Result<BetaValidationReport, EnvelopeError> {
    let mut identity_witness = None;
    'outer: for t in linspace(t0, horizon, 64) {
        for s in linspace(0.0, big_r + 1.0, 64) {
            let b = sys.beta(t, s)?;
            if b < s - 1e-12 * (1.0 + s) {
                identity_witness = Some((t, s, b));
                break 'outer;
            }
        }
    }
    let mut rng = rng::substream(seed, "beta-validation");
    let mut witness = None;
    for trial in 0..trials {
        let x0 = rng::in_ball(&mut rng, sys.dim(), big_r);
        let x0_norm = fmath::norm2(&x0);
        let mut rhs =
            |t: f64, x: &[f64]| sys.eval_plant_rhs(t, x).map_err(|e| format!("{e}"));
        let traj = sim::integrate(&mut rhs, t0, &x0, horizon, step)
            .map_err(|e| EnvelopeError::DecayProfileInvalid(format!("plant run failed: {e}")))?;
        for (t, x, _) in traj.iter() {
            let bound = sys.beta(t, x0_norm)?;
            let norm = fmath::norm2(x);
            if norm > bound + 1e-9 * (1.0 + bound) {
                witness = Some(BetaWitness { trial, t, x_norm: norm, bound });
                break;
            }
        }
        if witness.is_some() {
            break;
        }
    }
    Ok(BetaValidationReport {
        pass: witness.is_none() && identity_witness.is_none(),
        trials,
        witness,
        identity_witness,
    })
}

/// Certified upper bound at one time for the summed worst-case drift
/// partials over the reachable box of half-width `2 beta(t, R) + xi`.
/// Also the radius of the factor-coefficient ball.
pub fn sigma_r_at(
    sys: &TriangularSystem,
    big_r: f64,
    xi: f64,
    t: f64,
    box_grid: usize,
) -> Result<f64, EnvelopeError> {
    let partials = drift_partials(sys)?;
    sigma_from_partials(sys, &partials, big_r, xi, t, box_grid)
}

/// Positive lower bound at one time for every coupling coefficient over the
/// output interval `|y| <= beta(t, R)`.
pub fn w_r_at(
    sys: &TriangularSystem,
    big_r: f64,
    t: f64,
    box_grid: usize,
) -> Result<f64, EnvelopeError> {
    let half = sys.beta(t, big_r)?;
    let mut low = f64::INFINITY;
    for i in 0..sys.dim() - 1 {
        let v = extremum_on_box(
            sys.coupling(i),
            &[(t, t), (-half, half)],
            ExtremumMode::MinValue,
            box_grid,
            SAFETY,
        )?;
        low = low.min(v);
    }
    if !(low > 0.0) {
        return Err(EnvelopeError::CouplingFloorNotPositive { t, value: low });
    }
    Ok(low)
}

fn drift_partials(
    sys: &TriangularSystem,
) -> Result<Vec<(usize, ScalarField)>, EnvelopeError> {
    // pairs (i, d f_i / d x_j) for i = 2..n, j = 2..i (1-based)
    let mut out = Vec::new();
    for i0 in 1..sys.dim() {
        for j in 2..=(i0 + 1) {
            let var = format!("x{j}");
            out.push((i0, sys.drift(i0).differentiate(&var)?));
        }
    }
    Ok(out)
}

fn sigma_from_partials(
    sys: &TriangularSystem,
    partials: &[(usize, ScalarField)],
    big_r: f64,
    xi: f64,
    t: f64,
    box_grid: usize,
) -> Result<f64, EnvelopeError> {
    let half = 2.0 * sys.beta(t, big_r)? + xi;
    let mut total = 0.0;
    for (i0, partial) in partials {
        let mut boxes = Vec::with_capacity(i0 + 2);
        boxes.push((t, t));
        for _ in 0..=*i0 {
            boxes.push((-half, half));
        }
        total += extremum_on_box(partial, &boxes, ExtremumMode::MaxAbs, box_grid, SAFETY)?;
    }
    Ok(total)
}

/// Build the full envelope set on `[t0, horizon]`.
///
/// `sigma` is sampled at `knots` points, made nondecreasing by a running
/// maximum and interpolated with a monotone C¹ spline; `w` likewise (running
/// minimum). Both inherit the 1.1 safety factor of the grid extrema, and a
/// ten-times-denser validation pass re-checks the coupling floor.
pub fn build_envelopes(
    sys: &TriangularSystem,
    g_field: &ScalarField,
    big_r: f64,
    xi: f64,
    t0: f64,
    horizon: f64,
    knots: usize,
    box_grid: usize,
) -> Result<EnvelopeSet, EnvelopeError> {
    let gdot = g_field.differentiate("t")?;
    let g_owned = g_field.clone();
    let g = TimeFunction::new(move |t| {
        match (g_owned.eval(&[t]), gdot.eval(&[t])) {
            (Ok(v), Ok(d)) => Dual::new(v, d),
            _ => Dual::new(f64::NAN, f64::NAN),
        }
    });

    let beta_dt = sys.beta_field().differentiate("t")?;
    let beta_owned = sys.beta_field().clone();
    let beta_r = TimeFunction::new(move |t| {
        match (beta_owned.eval(&[t, big_r]), beta_dt.eval(&[t, big_r])) {
            (Ok(v), Ok(d)) => Dual::new(v, d),
            _ => Dual::new(f64::NAN, f64::NAN),
        }
    });

    let grid = linspace(t0, horizon, knots.max(9));
    let partials = drift_partials(sys)?;
    let mut sigma_vals = Vec::with_capacity(grid.len());
    let mut running = 0.0f64;
    for &t in &grid {
        let v = sigma_from_partials(sys, &partials, big_r, xi, t, box_grid)?;
        if !fmath::is_finite(v) {
            return Err(EnvelopeError::NonFinite { what: "sigma", t });
        }
        running = running.max(v);
        sigma_vals.push(running);
    }
    let sigma = TimeFunction::from_pchip(Pchip::new(grid.clone(), sigma_vals));

    let mut w_vals = Vec::with_capacity(grid.len());
    let mut floor = f64::INFINITY;
    for &t in &grid {
        let v = w_r_at(sys, big_r, t, box_grid)?;
        floor = floor.min(v);
        w_vals.push(floor);
    }
    let w = TimeFunction::from_pchip(Pchip::new(grid.clone(), w_vals));

    // validation pass on a denser grid: the interpolated floor must stay
    // below the couplings over the output interval
    for &t in &linspace(t0, horizon, 10 * grid.len()) {
        let wf = w.value(t);
        if !(wf > 0.0) {
            return Err(EnvelopeError::CouplingFloorNotPositive { t, value: wf });
        }
        let half = sys.beta(t, big_r)?;
        for i in 0..sys.dim() - 1 {
            for y in [-half, -0.5 * half, 0.0, 0.5 * half, half] {
                let a = sys.coupling_at(i, t, y)?;
                if a < wf {
                    return Err(EnvelopeError::CouplingFloorNotPositive { t, value: wf });
                }
            }
        }
    }

    Ok(EnvelopeSet { g, sigma, w, beta_r, big_r, xi, t0, horizon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::test_fixtures::{example_3state, linear_chain2, pure_chain2};

    fn default_g() -> ScalarField {
        ScalarField::parse("0.5*exp(-t)", &["t"], "g").unwrap()
    }

    #[test]
    fn default_decay_profile_passes() {
        // g = 0.5 e^{-t} sits exactly on the slope boundary g' = -g
        let rep = validate_g(&default_g(), 0.0, 20.0, 1e-4).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!((rep.g_end - 0.5 * fmath::exp(-20.0)).abs() < 1e-18);
    }

    #[test]
    fn constant_half_fails_target() {
        let g = ScalarField::parse("0.5", &["t"], "g").unwrap();
        let rep = validate_g(&g, 0.0, 20.0, 0.5).unwrap();
        assert!(!rep.target_met);
        assert!(!rep.pass);
    }

    #[test]
    fn profile_above_one_fails_range() {
        let g = ScalarField::parse("2*exp(-t)", &["t"], "g").unwrap();
        let rep = validate_g(&g, 0.0, 20.0, 1e-4).unwrap();
        let (t, v) = rep.range_violation.expect("must catch range violation");
        assert_eq!(t, 0.0);
        assert_eq!(v, 2.0);
    }

    #[test]
    fn profile_decaying_too_fast_fails_slope() {
        let g = ScalarField::parse("0.5*exp(-3*t)", &["t"], "g").unwrap();
        let rep = validate_g(&g, 0.0, 10.0, 1e-4).unwrap();
        assert!(rep.slope_violation.is_some());
    }

    #[test]
    fn beta_validation_passes_for_pure_chain() {
        let sys = pure_chain2();
        let rep = validate_beta(&sys, 1.0, 0.0, 5.0, 20, 1e-2, 7).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn beta_half_identity_fails_immediately() {
        let f1 = ScalarField::parse("0", &["t", "x1"], "f1").unwrap();
        let f2 = ScalarField::parse("0", &["t", "x1", "x2"], "f2").unwrap();
        let a1 = ScalarField::parse("1", &["t", "x1"], "a1").unwrap();
        let beta = ScalarField::parse("s/2", &["t", "s"], "beta").unwrap();
        let sys =
            TriangularSystem::new(alloc::vec![3], alloc::vec![f1, f2], alloc::vec![a1], beta)
                .unwrap();
        let rep = validate_beta(&sys, 1.0, 0.0, 1.0, 2, 1e-2, 7).unwrap();
        assert!(!rep.pass);
        assert!(rep.identity_witness.is_some());
    }

    #[test]
    fn rest_plant_trivially_bounded() {
        let sys = example_3state();
        // x0 = 0 stays at the origin; any valid bound holds
        let mut rhs = |t: f64, x: &[f64]| sys.eval_plant_rhs(t, x).map_err(|e| format!("{e}"));
        let traj = sim::integrate(&mut rhs, 0.0, &[0.0, 0.0, 0.0], 3.0, 1e-2).unwrap();
        for (_, x, _) in traj.iter() {
            assert!(fmath::norm2(x) < 1e-12);
        }
    }

    #[test]
    fn sigma_constant_slope_drifts() {
        // all nonzero partials are -1: sum over the two pairs, times safety
        let sys = example_3state();
        let v = sigma_r_at(&sys, 1.0, 2.0, 3.0, 9).unwrap();
        assert!((v - 2.0 * SAFETY).abs() < 1e-12, "{v}");
    }

    #[test]
    fn sigma_zero_for_driftless_chain() {
        let sys = pure_chain2();
        let v = sigma_r_at(&sys, 1.0, 2.0, 0.0, 9).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn w_constant_coupling() {
        let sys = pure_chain2();
        let v = w_r_at(&sys, 1.0, 0.0, 33).unwrap();
        assert!((v - 1.0 / SAFETY).abs() < 1e-12);
    }

    #[test]
    fn w_rational_coupling_analytic_minimum() {
        // a2 = 1/(1+y^2) over |y| <= beta(t, R); minimum at the endpoint
        let sys = example_3state();
        let t = 0.0;
        let half = sys.beta(t, 1.0).unwrap();
        let expect = 1.0 / (1.0 + half * half) / SAFETY;
        let v = w_r_at(&sys, 1.0, t, 1001).unwrap();
        assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
    }

    #[test]
    fn envelope_build_monotone_sigma_and_positive_w() {
        let sys = example_3state();
        let env = build_envelopes(&sys, &default_g(), 1.0, 2.0, 0.0, 10.0, 33, 15).unwrap();
        let mut prev = -1.0;
        for t in linspace(0.0, 10.0, 101) {
            let s = env.sigma.value(t);
            assert!(s >= prev - 1e-12, "sigma not monotone at {t}");
            prev = s;
            assert!(env.w.value(t) > 0.0);
        }
    }

    #[test]
    fn envelope_refinement_within_safety_slack() {
        let sys = example_3state();
        let coarse = sigma_r_at(&sys, 1.0, 2.0, 1.0, 21).unwrap();
        let fine = sigma_r_at(&sys, 1.0, 2.0, 1.0, 42).unwrap();
        assert!(fine <= coarse * SAFETY + 1e-12);
        assert!(fine >= coarse / SAFETY - 1e-12);
        let wc = w_r_at(&sys, 1.0, 1.0, 21).unwrap();
        let wf = w_r_at(&sys, 1.0, 1.0, 42).unwrap();
        assert!(wf <= wc * SAFETY + 1e-12 && wf >= wc / SAFETY - 1e-12);
    }

    #[test]
    fn output_overapprox_holds_on_simulated_plants() {
        // |y(t)| = |x1(t)| <= |x(t)| <= beta(t, |x0|) <= beta(t, R)
        let sys = linear_chain2();
        let mut rng = crate::rng::seeded(3);
        for _ in 0..10 {
            let x0 = crate::rng::in_ball(&mut rng, 2, 1.0);
            let mut rhs =
                |t: f64, x: &[f64]| sys.eval_plant_rhs(t, x).map_err(|e| format!("{e}"));
            let traj = sim::integrate(&mut rhs, 0.0, &x0, 4.0, 1e-2).unwrap();
            for (t, x, _) in traj.iter() {
                let bound = sys.beta(t, 1.0).unwrap();
                assert!(fmath::abs(x[0]) <= bound + 1e-9);
            }
        }
    }
}
