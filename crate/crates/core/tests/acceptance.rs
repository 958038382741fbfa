//! One test per acceptance criterion. Each prints its pass/fail line and
//! the measured values before asserting.

use std::io::Write;

use motnet::acceptance::{
    criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8, Criterion,
};

// Written through the handle rather than `eprintln!` so the lines survive
// libtest's output capture.
fn report(c: Criterion) {
    let verdict = if c.pass() { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = write!(err, "{verdict}: criterion {} {}\n{c}", c.id, c.name);
    drop(err);
    assert!(c.pass(), "criterion {} failed:\n{c}", c.id);
}

#[test]
fn criterion_1_figure1_ot_value() {
    report(criterion_1());
}

#[test]
fn criterion_2_figure2_ot_value() {
    report(criterion_2());
}

#[test]
fn criterion_3_figure3_gaussian_w2() {
    report(criterion_3());
}

#[test]
fn criterion_4_figure4_mot_value() {
    report(criterion_4());
}

#[test]
fn criterion_5_map_recovery() {
    report(criterion_5());
}

#[test]
fn criterion_6_baseline_pathologies() {
    report(criterion_6());
}

#[test]
fn criterion_7_anomaly_pipeline() {
    report(criterion_7());
}

#[test]
fn criterion_8_property_suite() {
    report(criterion_8());
}
