//! End-to-end pipeline tests on the linear chain, where every synthesized
//! gain stays bounded in time and fixed-step integration is comfortable.

use std::sync::Arc;

use triobs_core::envelopes::validate_beta;
use triobs_core::expr::ScalarField;
use triobs_core::sim::{run_odp, run_sodp, RunSetup};
use triobs_core::synthesis::PhiOptions;
use triobs_core::system::TriangularSystem;
use triobs_core::verify;

fn linear_chain2() -> TriangularSystem {
    let f1 = ScalarField::parse("0", &["t", "x1"], "f1").unwrap();
    let f2 = ScalarField::parse("0", &["t", "x1", "x2"], "f2").unwrap();
    let a1 = ScalarField::parse("1", &["t", "x1"], "a1").unwrap();
    let beta = ScalarField::parse("s*(2+t)", &["t", "s"], "beta").unwrap();
    TriangularSystem::new(vec![1], vec![f1, f2], vec![a1], beta).unwrap()
}

fn setup(horizon: f64, step: f64) -> RunSetup {
    RunSetup {
        g_field: ScalarField::parse("0.5*exp(-t)", &["t"], "g").unwrap(),
        g_is_default: true,
        big_l: 2.0,
        c1: 1.0,
        c2: 2.0,
        t0: 0.0,
        horizon,
        step,
        env_knots: 48,
        box_grid: 15,
        phi: PhiOptions { knots: 48, ..PhiOptions::default() },
        seed: 2024,
    }
}

#[test]
fn odp_pipeline_converges_on_linear_chain() {
    let sys = Arc::new(linear_chain2());
    let s = setup(20.0, 2e-3);
    let rep = run_odp(&sys, &s, 1.0, &[0.6, -0.4]).unwrap();
    assert!(rep.pass, "verdicts: {:?}", (
        &rep.bound_verdict,
        &rep.envelope_verdict,
        &rep.v_cap_verdict,
        &rep.beta_verdict,
        &rep.v_consistency,
    ));
    // the decay profile pushes the terminal error under sqrt(g(20))
    let target = rep.g_end.sqrt() + 1e-4;
    assert!(
        rep.terminal_error <= target,
        "terminal error {} above {target}",
        rep.terminal_error
    );
    // envelope checks re-run from the recorded rows
    let check = verify::check_envelopes(&rep);
    assert!(check.pass, "{:?}", check.witness);
}

#[test]
fn odp_rest_plant_stays_at_zero_error() {
    let sys = Arc::new(linear_chain2());
    let s = setup(5.0, 2e-3);
    let rep = run_odp(&sys, &s, 1.0, &[0.0, 0.0]).unwrap();
    assert!(rep.pass);
    assert!(rep.terminal_error < 1e-9, "{}", rep.terminal_error);
}

#[test]
fn odp_rejects_initial_state_outside_ball() {
    let sys = Arc::new(linear_chain2());
    let s = setup(5.0, 2e-3);
    let err = run_odp(&sys, &s, 1.0, &[2.0, 0.0]).unwrap_err();
    assert!(format!("{err}").contains("design radius"));
}

#[test]
fn sodp_pipeline_switching_windows_decay() {
    let sys = Arc::new(linear_chain2());
    // |x0| = 1.5 puts the first trusted window at index 2
    let s = setup(30.0, 2e-3);
    let rep = run_sodp(&sys, &s, &[1.2, -0.9]).unwrap();
    assert_eq!(rep.k0, 2);
    assert!(rep.segments.len() >= 3, "got {} windows", rep.segments.len());
    for seg in rep.segments.iter().filter(|s| s.k >= rep.k0) {
        assert!(!seg.saturation_active, "window {} saturated", seg.k);
        if !seg.clipped {
            assert!(seg.decay_verdict.pass, "window {}: {:?}", seg.k, seg.decay_verdict);
        }
    }
    let check = verify::check_switch(&rep);
    assert!(check.pass, "{:?}", check.witness);
    // corrupted report must fail
    let bad = verify::check_switch(&verify::corrupt_sodp_report(&rep));
    assert!(!bad.pass);
}

#[test]
fn sodp_horizon_shorter_than_second_switch_is_partial() {
    let sys = Arc::new(linear_chain2());
    let s = setup(3.0, 2e-3);
    let rep = run_sodp(&sys, &s, &[0.5, 0.0]).unwrap();
    assert!(rep.partial);
    assert!(!rep.segments.is_empty());
}

#[test]
fn beta_validation_monte_carlo() {
    let sys = linear_chain2();
    let rep = validate_beta(&sys, 1.0, 0.0, 10.0, 100, 1e-2, 77).unwrap();
    assert!(rep.pass, "{:?}", rep.witness);
}

#[test]
fn envelope_negative_control() {
    let sys = Arc::new(linear_chain2());
    let s = setup(12.0, 2e-3);
    let rep = run_odp(&sys, &s, 1.0, &[0.5, 0.5]).unwrap();
    let bad = verify::check_envelopes(&verify::corrupt_odp_report(&rep));
    assert!(!bad.pass, "constant error at half the bound must fail the envelope");
}
