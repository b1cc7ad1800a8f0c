//! Median-aligned depth metrics and per-pixel error maps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::imaging::ImageBuffer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3";

    pub fn csv(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3
        )
    }
}

/// Splits raw ground-truth samples into a buffer and a validity mask.
/// Non-finite or non-positive labels become invalid (stored as 0).
pub fn sanitize_ground_truth(height: usize, width: usize, raw: &[f64]) -> Result<(ImageBuffer, Vec<bool>)> {
    if raw.len() != height * width {
        return Err(Error::invalid("ground truth size does not match its grid"));
    }
    let valid: Vec<bool> = raw.iter().map(|v| v.is_finite() && *v > 0.0).collect();
    let data = raw.iter().zip(&valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
    Ok((ImageBuffer::new(height, width, 1, data)?, valid))
}

/// Pixels selected by `mask` (all if `None`) where `gt` is a positive label
/// and `pred` is positive.
fn usable(pred: &ImageBuffer, gt: &ImageBuffer, mask: Option<&[bool]>) -> Result<Vec<usize>> {
    if pred.channels() != 1 || gt.channels() != 1 || !pred.same_grid(gt) {
        return Err(Error::invalid("prediction and ground truth must be single-channel on one grid"));
    }
    if mask.is_some_and(|m| m.len() != gt.pixel_count()) {
        return Err(Error::invalid("mask size does not match the grid"));
    }
    let idx: Vec<usize> = (0..gt.pixel_count()).filter(|&i| mask.is_none_or(|m| m[i]) && gt.data()[i] > 0.0).collect();
    if idx.is_empty() {
        return Err(Error::degenerate("mask selects no pixels"));
    }
    Ok(idx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scales `pred` by `median(gt) / median(pred)` over the valid pixels.
pub fn align_median(pred: &ImageBuffer, gt: &ImageBuffer, mask: Option<&[bool]>) -> Result<ImageBuffer> {
    let idx = usable(pred, gt, mask)?;
    let mp = median(idx.iter().map(|&i| pred.data()[i]).collect());
    let mg = median(idx.iter().map(|&i| gt.data()[i]).collect());
    if mp == 0.0 {
        return Err(Error::degenerate("prediction has zero median"));
    }
    let k = mg / mp;
    pred.map(|v| v * k)
}

/// Metrics of an already aligned prediction.
pub fn depth_metrics(pred: &ImageBuffer, gt: &ImageBuffer, mask: Option<&[bool]>) -> Result<DepthMetrics> {
    let idx = usable(pred, gt, mask)?;
    if idx.iter().any(|&i| pred.data()[i] <= 0.0) {
        return Err(Error::invalid("prediction must be positive on the mask"));
    }
    let n = idx.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for &i in &idx {
        let (p, g) = (pred.data()[i], gt.data()[i]);
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let dl = libm::log(p) - libm::log(g);
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        for (k, h) in hits.iter_mut().enumerate() {
            if ratio < libm::pow(1.25, (k + 1) as f64) {
                *h += 1;
            }
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: libm::sqrt(sq / n),
        rmse_log: libm::sqrt(sq_log / n),
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
    })
}

/// Median alignment followed by [`depth_metrics`].
pub fn evaluate(pred: &ImageBuffer, gt: &ImageBuffer, mask: Option<&[bool]>) -> Result<DepthMetrics> {
    let aligned = align_median(pred, gt, mask)?;
    depth_metrics(&aligned, gt, mask)
}

/// Illumination level splitting dark from bright pixels.
pub const DARK_THRESHOLD: f64 = 0.5;

/// Metrics restricted to one illumination class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub pixels: usize,
    pub metrics: Option<DepthMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub dark: RegionMetrics,
    pub bright: RegionMetrics,
}

impl Breakdown {
    /// Dark minus bright Abs Rel, when both classes are populated.
    pub fn gap(&self) -> Option<f64> {
        Some(self.dark.metrics?.abs_rel - self.bright.metrics?.abs_rel)
    }
}

/// Aligns over the whole mask, then reports metrics separately for pixels
/// with `illumination < DARK_THRESHOLD` and the rest.
pub fn dark_bright_breakdown(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    illumination: &ImageBuffer,
    mask: Option<&[bool]>,
) -> Result<Breakdown> {
    if illumination.channels() != 1 || !illumination.same_grid(gt) {
        return Err(Error::invalid("illumination must be single-channel on the depth grid"));
    }
    let aligned = align_median(pred, gt, mask)?;
    let idx = usable(pred, gt, mask)?;
    let region = |dark: bool| -> Result<RegionMetrics> {
        let mut sel = alloc::vec![false; gt.pixel_count()];
        for &i in &idx {
            sel[i] = (illumination.data()[i] < DARK_THRESHOLD) == dark;
        }
        let pixels = sel.iter().filter(|&&b| b).count();
        let metrics = if pixels > 0 { Some(depth_metrics(&aligned, gt, Some(&sel))?) } else { None };
        Ok(RegionMetrics { pixels, metrics })
    };
    Ok(Breakdown { dark: region(true)?, bright: region(false)? })
}

/// Optional depth cap: ground truth beyond `cap` leaves the mask and the
/// prediction is clamped to `cap`.
pub fn apply_cap(pred: &ImageBuffer, gt: &ImageBuffer, mask: &[bool], cap: f64) -> Result<(ImageBuffer, Vec<bool>)> {
    if !(cap > 0.0) {
        return Err(Error::invalid("depth cap must be positive"));
    }
    let mask = mask.iter().zip(gt.data()).map(|(&m, &g)| m && g <= cap).collect();
    Ok((pred.map(|v| v.min(cap))?, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    /// `|p - g| / g` on valid pixels, 0 elsewhere.
    pub map: ImageBuffer,
    pub valid: Vec<bool>,
}

impl ErrorMap {
    pub fn mean(&self) -> f64 {
        let (sum, n) = self
            .map
            .data()
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
        sum / n as f64
    }
}

pub fn error_map(pred: &ImageBuffer, gt: &ImageBuffer, mask: Option<&[bool]>) -> Result<ErrorMap> {
    let idx = usable(pred, gt, mask)?;
    let mut valid = alloc::vec![false; gt.pixel_count()];
    let mut data = alloc::vec![0.0; gt.pixel_count()];
    for &i in &idx {
        valid[i] = true;
        data[i] = (pred.data()[i] - gt.data()[i]).abs() / gt.data()[i];
    }
    Ok(ErrorMap { map: ImageBuffer::new(gt.height(), gt.width(), 1, data)?, valid })
}

/// Colour stops of the heat ramp at 0, 1/4, 1/2, 3/4 and 1: black, purple,
/// red, orange, pale yellow.
pub const HEAT_STOPS: [[f64; 3]; 5] =
    [[0.0, 0.0, 0.0], [0.3, 0.0, 0.6], [0.85, 0.15, 0.3], [1.0, 0.6, 0.0], [1.0, 1.0, 0.85]];

/// Linear interpolation along [`HEAT_STOPS`]; `t` is clamped to `[0, 1]`.
pub fn heat_color(t: f64) -> [f64; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (HEAT_STOPS.len() - 1) as f64;
    let k = (libm::floor(pos) as usize).min(HEAT_STOPS.len() - 2);
    let f = pos - k as f64;
    core::array::from_fn(|c| HEAT_STOPS[k][c] * (1.0 - f) + HEAT_STOPS[k + 1][c] * f)
}

/// RGB heat rendering of an error map with `vmax` mapped to the top stop.
/// Invalid pixels are black.
pub fn heat_image(err: &ErrorMap, vmax: f64) -> Result<ImageBuffer> {
    if !(vmax > 0.0) {
        return Err(Error::invalid("heat scale must be positive"));
    }
    let (h, w) = (err.map.height(), err.map.width());
    ImageBuffer::from_fn(h, w, 3, |r, c, ch| {
        let i = r * w + c;
        if err.valid[i] {
            heat_color(err.map.data()[i] / vmax)[ch]
        } else {
            0.0
        }
    })
}
