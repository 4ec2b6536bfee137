//! The verification suite at working scale, one test per check, each
//! printing its pass/fail line with the measured numbers. All tolerances
//! live in the library check bodies; this target runs them against the
//! default configuration with a fixed seed.

use mixforge::acceptance::{self, Check};
use mixforge::config::FullConfig;

const SEED: u64 = 0;

fn require(c: Check) {
    println!("{}: {} ({})", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
    assert!(c.passed, "{} failed: {}", c.name, c.detail);
}

#[test]
fn check_01_noise_basis() {
    require(acceptance::check_noise_basis(&FullConfig::default(), SEED));
}

#[test]
fn check_02_flow_solvers() {
    require(acceptance::check_flow_solvers(&FullConfig::default(), SEED));
}

#[test]
fn check_03_derivatives() {
    require(acceptance::check_derivatives(&FullConfig::default(), SEED));
}

#[test]
fn check_04_right_inverse() {
    require(acceptance::check_right_inverse(&FullConfig::default(), SEED));
}

#[test]
fn check_05_squeezing() {
    require(acceptance::check_squeezing(&FullConfig::default(), SEED));
}

#[test]
fn check_06_coupling_tv() {
    require(acceptance::check_coupling_tv(&FullConfig::default(), SEED));
}

#[test]
fn check_07_step_distance() {
    require(acceptance::check_step_distance(&FullConfig::default(), SEED));
}

#[test]
fn check_08_mixing_decay() {
    require(acceptance::check_mixing_decay(&FullConfig::default(), SEED));
}

#[test]
fn check_09_stationarity() {
    require(acceptance::check_stationarity(&FullConfig::default(), SEED));
}

#[test]
fn check_10_determinism() {
    require(acceptance::check_determinism(&FullConfig::default(), SEED));
}
