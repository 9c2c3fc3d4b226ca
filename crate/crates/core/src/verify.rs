//! Sampling-based invariant suite. Each check is deterministic given its
//! seed, returns a result object with the worst margin and a witness on
//! failure, and has a corresponding corrupted fixture that must fail (the
//! negative controls guard against vacuous passes).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::fmath;
use crate::linalg::{det_lu, sym_eigenvalues, sym_spectral_norm};
use crate::rng;
use crate::sim::{error_envelope, OdpReport, SodpReport};
use crate::synthesis::{knot_data, numerator_sup, GainSchedule, OUTPUT_FLOOR};
use crate::system::{eval_b, vartheta};
use crate::timefn::{linspace, Dual, TimeFunction};

#[derive(Clone, Debug)]
pub struct Witness {
    pub t: f64,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub worst_margin: f64,
    pub witness: Option<Witness>,
    pub samples: usize,
}

impl CheckResult {
    fn new(name: &str, worst_margin: f64, witness: Option<Witness>, samples: usize) -> Self {
        CheckResult {
            name: name.to_string(),
            pass: witness.is_none(),
            worst_margin,
            witness,
            samples,
        }
    }
}

/// Shifted-determinant identity: `det(P_k(t) - I) = (L-1)^k` for every level
/// on a 100-point grid, within 1e-6 relative.
pub fn check_det_identity(schedule: &GainSchedule) -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut witness = None;
    let mut samples = 0;
    let (t0, horizon) = (schedule.params.t0, schedule.params.horizon);
    for k in 2..=schedule.n() {
        let expect = fmath::powi(schedule.params.big_l - 1.0, k as u32);
        for t in linspace(t0, horizon, 100) {
            samples += 1;
            let shifted = schedule.p_matrix(k, t).sub_identity_scaled(1.0);
            let det = det_lu(&shifted);
            let rel = fmath::abs(det - expect) / fmath::abs(expect);
            let margin = 1e-6 - rel;
            if margin < worst {
                worst = margin;
                if margin < 0.0 && witness.is_none() {
                    witness = Some(Witness {
                        t,
                        detail: format!(
                            "level {k}: det(P - I) = {det:e}, expected {expect:e} \
                             (relative error {rel:e}; border entry {:e})",
                            schedule.level(k).border.value(t)
                        ),
                    });
                }
            }
        }
    }
    CheckResult::new("det-identity", worst, witness, samples)
}

/// Positive definiteness of `P_k(t) - I` on the grid, plus the spectral-norm
/// anchor `|P_k(t0)| <= L` at the start time.
pub fn check_spd(schedule: &GainSchedule) -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut witness = None;
    let mut samples = 0;
    let (t0, horizon) = (schedule.params.t0, schedule.params.horizon);
    for k in 2..=schedule.n() {
        let norm0 = sym_spectral_norm(&schedule.p_matrix(k, t0));
        let margin0 = schedule.params.big_l + 1e-12 - norm0;
        samples += 1;
        if margin0 < worst {
            worst = margin0;
        }
        if margin0 < 0.0 && witness.is_none() {
            witness = Some(Witness {
                t: t0,
                detail: format!("level {k}: |P(t0)| = {norm0} exceeds L = {}", schedule.params.big_l),
            });
        }
        for t in linspace(t0, horizon, 100) {
            samples += 1;
            let shifted = schedule.p_matrix(k, t).sub_identity_scaled(1.0);
            let min_eig = sym_eigenvalues(&shifted).into_iter().fold(f64::INFINITY, f64::min);
            if min_eig < worst {
                worst = min_eig;
            }
            if min_eig <= 0.0 && witness.is_none() {
                witness = Some(Witness {
                    t,
                    detail: format!("level {k}: min eig(P - I) = {min_eig:e}"),
                });
            }
        }
    }
    CheckResult::new("spd", worst, witness, samples)
}

/// Which Lyapunov inequality to sample.
#[derive(Clone, Copy, Debug)]
pub enum LyapunovCase {
    /// kernel-direction decrease at one level: output component zero,
    /// margin `-d·w'Pw - sup`
    KernelLevel(usize),
    /// full final inequality: margin `φ |w1|² - dbar·w'Pw - sup`
    Final,
}

/// Sample the chosen inequality with worst-case factor coefficients resolved
/// in closed form and plant values at their box extrema. Directions are
/// uniform on the sphere plus a log-spaced near-kernel sweep; each direction
/// is scanned over 64 scales between the level-set radius and the gain
/// bound. Margins are accepted down to `-1e-8` of the local term scale.
pub fn check_lyapunov(
    schedule: &GainSchedule,
    case: LyapunovCase,
    min_samples: usize,
    seed: u64,
) -> CheckResult {
    let (k, name) = match case {
        LyapunovCase::KernelLevel(k) => (k, format!("lyapunov-kernel-{k}")),
        LyapunovCase::Final => (schedule.n(), "lyapunov-final".to_string()),
    };
    let xi = schedule.params.xi;
    let (t0, horizon) = (schedule.params.t0, schedule.params.horizon);
    let mut rng = rng::substream(seed, &name);
    let mut worst = f64::INFINITY;
    let mut witness = None;
    let mut samples = 0usize;
    let scales = 64usize;
    let dbar_final = schedule.dbar_final.clone();
    while samples < min_samples {
        let t = rng::uniform_in(&mut rng, t0, horizon);
        let kd = knot_data(
            &schedule.sys,
            &schedule.env,
            &schedule.levels,
            schedule.params.big_l,
            k,
            t,
            17,
        );
        // direction: kernel for the level case; sphere or near-kernel sweep
        // for the final case
        let dirs: Vec<Vec<f64>> = match case {
            LyapunovCase::KernelLevel(_) => {
                let mut w = alloc::vec![0.0; k];
                let hat = rng::unit_sphere(&mut rng, k - 1);
                w[1..].copy_from_slice(&hat);
                alloc::vec![w]
            }
            LyapunovCase::Final => {
                let mut out = Vec::with_capacity(2);
                out.push(rng::unit_sphere(&mut rng, k));
                // near-kernel probe with log-uniform output component
                let mag = fmath::exp(rng::uniform_in(
                    &mut rng,
                    fmath::ln(OUTPUT_FLOOR),
                    0.0,
                ));
                let sign = if rng::uniform(&mut rng) < 0.5 { -1.0 } else { 1.0 };
                let hat = rng::unit_sphere(&mut rng, k - 1);
                let tail = fmath::sqrt((1.0 - mag * mag).max(0.0));
                let mut w = alloc::vec![sign * mag];
                w.extend(hat.into_iter().map(|h| h * tail));
                out.push(w);
                out
            }
        };
        for w in dirs {
            let wpw = kd.p.quad_form(&w);
            if !(wpw > 0.0) || !wpw.is_finite() {
                continue;
            }
            let rho = fmath::sqrt(kd.g / wpw);
            if rho > xi {
                continue;
            }
            for si in 0..scales {
                samples += 1;
                let u = si as f64 / (scales - 1) as f64;
                let sigma = rho * fmath::powf(xi / rho.max(1e-300), u);
                let (sup, scale) = numerator_sup(&kd, &w, sigma, 17);
                let (margin, scale_total) = match case {
                    LyapunovCase::KernelLevel(kk) => {
                        let d = schedule.level(kk).d.value(t);
                        let m = -d * wpw - sup;
                        (m, scale + fmath::abs(d) * wpw)
                    }
                    LyapunovCase::Final => {
                        let dbar = dbar_final.value(t);
                        let phi = schedule.phi_final.value(t);
                        let m = phi * w[0] * w[0] - dbar * wpw - sup;
                        (m, scale + fmath::abs(dbar) * wpw + phi * w[0] * w[0])
                    }
                };
                let norm = margin / scale_total.max(1e-300);
                if norm < worst {
                    worst = norm;
                    if margin < -1e-8 * scale_total && witness.is_none() {
                        witness = Some(Witness {
                            t,
                            detail: format!(
                                "direction {w:?}, scale {sigma:e}: margin {margin:e} \
                                 against term scale {scale_total:e}"
                            ),
                        });
                    }
                }
            }
        }
    }
    CheckResult::new(&name, worst, witness, samples)
}

/// Error-envelope inequalities on a recorded fixed-ball run: strict gain
/// bound at every sample, decaying envelope from `t0 + 1`.
pub fn check_envelopes(report: &OdpReport) -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut witness = None;
    let mut samples = 0;
    for row in &report.rows {
        samples += 1;
        let e_norm = fmath::norm2(&row.e);
        let m_bound = report.xi - e_norm;
        if m_bound < worst {
            worst = m_bound;
        }
        if m_bound <= 0.0 && witness.is_none() {
            witness = Some(Witness {
                t: row.t,
                detail: format!("|e| = {e_norm} reached the gain bound {}", report.xi),
            });
        }
        if row.t >= report.t0 + 1.0 {
            let env = error_envelope(report.xi, report.c1, report.t0, row.t, row.g);
            let m = env - e_norm;
            if m < worst {
                worst = m;
            }
            if m < 0.0 && witness.is_none() {
                witness = Some(Witness {
                    t: row.t,
                    detail: format!("|e| = {e_norm} above the envelope {env}"),
                });
            }
        }
    }
    CheckResult::new("error-envelopes", worst, witness, samples)
}

/// Switching-run checks: saturation must stay inactive and the error must
/// hold `|e_k| <= 1/k` on the trusted half for every window at or past the
/// initial-norm index.
pub fn check_switch(report: &SodpReport) -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut witness = None;
    let mut samples = 0;
    for seg in report.segments.iter().filter(|s| s.k >= report.k0) {
        if seg.saturation_active && witness.is_none() {
            witness = Some(Witness {
                t: seg.t_start,
                detail: format!("window {}: saturation engaged", seg.k),
            });
        }
        let inv_k = 1.0 / seg.k as f64;
        for row in seg.rows.iter().filter(|r| r.t >= seg.t_mid) {
            samples += 1;
            let e_norm = fmath::norm2(&row.e);
            let m = inv_k - e_norm;
            if m < worst {
                worst = m;
            }
            if m < 0.0 && witness.is_none() {
                witness = Some(Witness {
                    t: row.t,
                    detail: format!("window {}: |e| = {e_norm} above 1/k = {inv_k}", seg.k),
                });
            }
        }
    }
    CheckResult::new("switch-decay", worst, witness, samples)
}

/// Algebra of the divided-difference polynomials over random points:
/// telescoping, homogeneity, and nonnegativity of the part left after
/// removing the certified circle minimum.
pub fn check_b_algebra(powers: &[u32], samples_per_power: usize, seed: u64) -> CheckResult {
    check_b_algebra_with(powers, samples_per_power, seed, vartheta_table(powers))
}

fn vartheta_table(powers: &[u32]) -> Vec<f64> {
    powers.iter().map(|&m| vartheta(m, 100_000)).collect()
}

/// Same as [`check_b_algebra`] but with explicit circle minima — the
/// corrupted-fixture entry point.
pub fn check_b_algebra_with(
    powers: &[u32],
    samples_per_power: usize,
    seed: u64,
    varthetas: Vec<f64>,
) -> CheckResult {
    let mut rng = rng::substream(seed, "b-algebra");
    let mut worst = f64::INFINITY;
    let mut witness = None;
    let mut samples = 0;
    for (idx, &m) in powers.iter().enumerate() {
        let th = varthetas[idx];
        for _ in 0..samples_per_power {
            samples += 1;
            let x = rng::uniform_in(&mut rng, -10.0, 10.0);
            let z = rng::uniform_in(&mut rng, -10.0, 10.0);
            let tel_lhs = eval_b(m, x, x - z) * (x - z);
            let tel_rhs = fmath::powi(x, m) - fmath::powi(z, m);
            let tel_margin =
                1e-9 - fmath::abs(tel_lhs - tel_rhs) / (1.0 + fmath::abs(tel_rhs));
            let lam = rng::uniform_in(&mut rng, -3.0, 3.0);
            let hom_lhs = eval_b(m, lam * x, lam * z);
            let hom_rhs = fmath::powi(lam, m - 1) * eval_b(m, x, z);
            let hom_margin =
                1e-9 - fmath::abs(hom_lhs - hom_rhs) / (1.0 + fmath::abs(hom_rhs));
            let bbar = eval_b(m, x, z) - th * fmath::powi(z, m - 1);
            let bbar_margin = bbar + 1e-9;
            for (label, margin) in [
                ("telescoping", tel_margin),
                ("homogeneity", hom_margin),
                ("residual-nonnegative", bbar_margin),
            ] {
                if margin < worst {
                    worst = margin;
                }
                if margin < 0.0 && witness.is_none() {
                    witness = Some(Witness {
                        t: 0.0,
                        detail: format!("m = {m}, point ({x}, {z}): {label} violated by {margin:e}"),
                    });
                }
            }
        }
    }
    CheckResult::new("b-algebra", worst, witness, samples)
}

/// Decrease-rate conditions: `d_k(t) > n - k + 1` from `t0 + 1` on, and the
/// running integral of `d_k` over any subinterval of `[t0, t0 + 1]` above
/// `-k`. The integral uses trapezoid quadrature on a breakpoint-aware grid;
/// transient windows narrower than the grid (or than time resolution) are
/// added as their analytic contribution `-(3/4) M τ`.
pub fn check_d_integral(schedule: &GainSchedule) -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut witness = None;
    let mut samples = 0;
    let t0 = schedule.params.t0;
    let n = schedule.n();
    for k in 2..=n {
        let lvl = schedule.level(k);
        let floor = (n - k + 1) as f64;
        for t in linspace(t0 + 1.0, schedule.params.horizon.max(t0 + 1.0 + 1e-9), 200) {
            samples += 1;
            let margin = lvl.d.value(t) - floor;
            if margin < worst {
                worst = margin;
            }
            if margin <= 0.0 && witness.is_none() {
                witness = Some(Witness {
                    t,
                    detail: format!("level {k}: rate {} at or below {floor}", lvl.d.value(t)),
                });
            }
        }
        // trapezoid cumulative integral over [t0, t0+1] with breakpoints
        let mut grid: Vec<f64> = linspace(t0, t0 + 1.0, 1000);
        for bp in [t0 + lvl.tau / 2.0, t0 + lvl.tau] {
            if bp > t0 && bp < t0 + 1.0 {
                grid.push(bp);
            }
        }
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup();
        let resolvable = grid.windows(2).any(|w| w[1] - w[0] < lvl.tau / 4.0);
        let dip_mass = if resolvable { 0.0 } else { -0.75 * lvl.big_m * lvl.tau };
        let mut cumulative = alloc::vec![0.0f64];
        for w in grid.windows(2) {
            let (a, b) = (w[0], w[1]);
            let seg = 0.5 * (lvl.d.value(a) + lvl.d.value(b)) * (b - a);
            cumulative.push(cumulative.last().unwrap() + seg);
        }
        let mut running_max = f64::NEG_INFINITY;
        let mut min_interval = f64::INFINITY;
        for (j, &c) in cumulative.iter().enumerate() {
            let adjusted = c + if grid[j.min(grid.len() - 1)] > t0 { dip_mass } else { 0.0 };
            if running_max > f64::NEG_INFINITY {
                min_interval = min_interval.min(adjusted - running_max);
            }
            running_max = running_max.max(adjusted);
            samples += 1;
        }
        let margin = min_interval - (-(k as f64)) - 1e-6;
        if margin < worst {
            worst = margin;
        }
        if margin < 0.0 && witness.is_none() {
            witness = Some(Witness {
                t: t0,
                detail: format!(
                    "level {k}: integral of the rate dips to {min_interval} (must exceed {})",
                    -(k as f64)
                ),
            });
        }
    }
    CheckResult::new("decrease-rate-integral", worst, witness, samples)
}

// ---------------------------------------------------------------------------
// Negative-control fixtures: deliberately corrupted inputs that every check
// must reject.

/// Shift the border entries after `t0`, breaking the determinant identity
/// while keeping the matrix symmetric.
pub fn corrupt_border(schedule: &GainSchedule) -> GainSchedule {
    let mut out = schedule.clone();
    let t0 = out.params.t0;
    for lvl in &mut out.levels {
        let orig = lvl.border.clone();
        lvl.border = TimeFunction::new(move |t| {
            let base = orig.dual(t);
            let bump = crate::timefn::ramp01_dual(t0, t0 + 0.5, t);
            base - bump * 0.5 - Dual::constant(0.0)
        });
    }
    out
}

/// Pull the corner entries down until `P - I` goes indefinite.
pub fn corrupt_spd(schedule: &GainSchedule) -> GainSchedule {
    let mut out = schedule.clone();
    let big_l = out.params.big_l;
    for lvl in &mut out.levels {
        let orig = lvl.corner.clone();
        lvl.corner = TimeFunction::new(move |t| orig.dual(t) - Dual::constant(big_l + 0.5));
    }
    out
}

/// Halve the final injection weight; the sampled final inequality must catch
/// the deficit near the kernel directions.
pub fn corrupt_phi(schedule: &GainSchedule) -> GainSchedule {
    let mut out = schedule.clone();
    let orig = out.phi_final.clone();
    out.phi_final = TimeFunction::new(move |t| orig.dual(t) * 0.5);
    out
}

/// Replace the recorded error with a constant at half the gain bound; the
/// decaying envelope must eventually fall below it.
pub fn corrupt_odp_report(report: &OdpReport) -> OdpReport {
    let mut out = report.clone();
    let e_norm = out.xi / 2.0;
    for row in &mut out.rows {
        let n = row.e.len();
        row.e = alloc::vec![0.0; n];
        row.e[0] = e_norm;
    }
    out
}

/// Double the per-window error beyond its decay bound.
pub fn corrupt_sodp_report(report: &SodpReport) -> SodpReport {
    let mut out = report.clone();
    for seg in &mut out.segments {
        let target = 2.0 / seg.k as f64;
        for row in &mut seg.rows {
            let n = row.e.len();
            row.e = alloc::vec![0.0; n];
            row.e[0] = target;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelopes::build_envelopes;
    use crate::expr::ScalarField;
    use crate::synthesis::{synthesize, PhiOptions, SynthParams};
    use crate::system::test_fixtures::{linear_chain2, pure_chain2};
    use alloc::sync::Arc;
    use alloc::vec;

    fn default_g() -> ScalarField {
        ScalarField::parse("0.5*exp(-t)", &["t"], "g").unwrap()
    }

    fn quick_opts() -> PhiOptions {
        PhiOptions {
            knots: 33,
            hat_dirs: 12,
            w1_points: 18,
            sigma_points: 8,
            validation_factor: 4,
            ..PhiOptions::default()
        }
    }

    fn schedule(sys: &crate::system::TriangularSystem, horizon: f64) -> GainSchedule {
        let sys = Arc::new(sys.clone());
        let params = SynthParams {
            big_l: 2.0,
            c1: 1.0,
            c2: sys.dim() as f64,
            xi: 2.0,
            big_r: 1.0,
            t0: 0.0,
            horizon,
            knots: 33,
            seed: 9,
        };
        let env = build_envelopes(&sys, &default_g(), 1.0, 2.0, 0.0, horizon, 33, 11).unwrap();
        synthesize(&sys, env, params, &quick_opts()).unwrap()
    }

    #[test]
    fn det_identity_passes_in_checkable_regime() {
        // horizon short enough that the border entry stays far from the
        // f64 cancellation wall
        let sched = schedule(&pure_chain2(), 3.0);
        let res = check_det_identity(&sched);
        assert!(res.pass, "{:?}", res.witness);
    }

    #[test]
    fn det_identity_rejects_corrupted_border() {
        let sched = schedule(&pure_chain2(), 3.0);
        let res = check_det_identity(&corrupt_border(&sched));
        assert!(!res.pass);
        assert!(res.witness.is_some());
    }

    #[test]
    fn spd_passes_and_rejects_corruption() {
        let sched = schedule(&linear_chain2(), 6.0);
        assert!(check_spd(&sched).pass);
        let res = check_spd(&corrupt_spd(&sched));
        assert!(!res.pass);
        assert!(res.witness.is_some());
    }

    #[test]
    fn lyapunov_kernel_and_final_pass() {
        let sched = schedule(&linear_chain2(), 6.0);
        let kernel = check_lyapunov(&sched, LyapunovCase::KernelLevel(2), 3000, 5);
        assert!(kernel.pass, "{:?}", kernel.witness);
        let full = check_lyapunov(&sched, LyapunovCase::Final, 3000, 5);
        assert!(full.pass, "{:?}", full.witness);
    }

    #[test]
    fn lyapunov_rejects_halved_weight() {
        let sched = schedule(&linear_chain2(), 6.0);
        let res = check_lyapunov(&corrupt_phi(&sched), LyapunovCase::Final, 4000, 5);
        assert!(!res.pass, "halved weight must violate the final inequality");
    }

    #[test]
    fn b_algebra_passes_and_rejects_inflated_minimum() {
        let res = check_b_algebra(&[1, 3, 5, 7], 2000, 11);
        assert!(res.pass, "{:?}", res.witness);
        let inflated = vec![2.0, 2.0 * vartheta(3, 100_000), 2.0 * vartheta(5, 100_000), 2.0];
        let bad = check_b_algebra_with(&[1, 3, 5, 7], 2000, 11, inflated);
        assert!(!bad.pass);
    }

    #[test]
    fn d_integral_check_passes() {
        let sched = schedule(&pure_chain2(), 3.0);
        let res = check_d_integral(&sched);
        assert!(res.pass, "{:?}", res.witness);
    }

    #[test]
    fn check_results_carry_witnesses_on_failure() {
        let sched = schedule(&pure_chain2(), 3.0);
        let res = check_det_identity(&corrupt_border(&sched));
        let w = res.witness.expect("failing checks must carry a witness");
        assert!(w.detail.contains("level 2"));
    }
}
