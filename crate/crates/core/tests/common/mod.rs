#![allow(dead_code)]

use std::io::Write;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Below this magnitude entries are compared as if they had this size, so
/// near-zero gradients are held to an absolute `REL_TOL · FLOOR`.
pub const FLOOR: f64 = 1e-4;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, FLOOR)` over all entries.
pub fn worst_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

/// Prints a verdict line that survives test output capture, then asserts.
pub fn verdict(criterion: u32, title: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] criterion {criterion:>2} {title}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {criterion} ({title}) failed: {detail}");
}
