use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Denominator floor of [`relative_error`]; gradients smaller than this on
/// both sides compare as absolute differences.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// One probed coordinate of a gradient audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub location: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// A scalar program evaluated at one point: its value, its analytic
/// gradient, and the branch signature of the graph that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub signature: u64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares analytic gradients with central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` at up to `n_probes` random
/// coordinates.
///
/// A coordinate is re-drawn when the program's branch signature at
/// `x +- 2h` differs from the one at `x`, i.e. when the stencil would
/// straddle a kink (bilinear cell boundary, rank swap, sign change).
/// Coordinates are drawn without replacement, so fewer reports come back
/// when too few kink-free coordinates exist.
pub fn finite_difference_check<F>(
    mut f: F,
    x: &[f64],
    h: f64,
    n_probes: usize,
    seed: u64,
) -> Result<Vec<GradientReport>>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if n_probes == 0 || x.is_empty() {
        return Err(Error::invalid("need at least one probe and one coordinate"));
    }
    let base = f(x)?;
    if base.gradient.len() != x.len() {
        return Err(Error::invalid("gradient length differs from the parameter count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = (0..x.len()).collect();
    let mut reports = Vec::with_capacity(n_probes);
    let mut point = x.to_vec();
    while reports.len() < n_probes && !candidates.is_empty() {
        let pick = (rng.next_u64() % candidates.len() as u64) as usize;
        let i = candidates.swap_remove(pick);
        let orig = point[i];
        let mut eval_at = |v: f64, point: &mut Vec<f64>| -> Result<Evaluation> {
            point[i] = v;
            let e = f(point);
            point[i] = orig;
            e
        };
        let far_plus = eval_at(orig + 2.0 * h, &mut point)?;
        let far_minus = eval_at(orig - 2.0 * h, &mut point)?;
        if far_plus.signature != base.signature || far_minus.signature != base.signature {
            continue;
        }
        let plus = eval_at(orig + h, &mut point)?;
        let minus = eval_at(orig - h, &mut point)?;
        let numeric = (plus.value - minus.value) / (2.0 * h);
        let analytic = base.gradient[i];
        reports.push(GradientReport {
            location: i,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        });
    }
    Ok(reports)
}
