//! Dense image grids and the sampling / differencing / statistics kernels
//! shared by every other module.
//!
//! Pixel `(row, col)` sits at continuous coordinate `(x = col, y = row)`, so
//! integer coordinates hit pixel centres exactly. Samples are stored
//! row-major with channels interleaved.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Wraps row-major interleaved samples. `channels` must be 1 or 3 and
    /// every sample finite.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("image channel count must be 1 or 3"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid("sample count does not match dimensions"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image samples must be finite"));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn same_grid(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Applies `f` to every sample; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Unweighted mean over channels, giving a single-channel image.
    pub fn channel_mean(&self) -> ImageBuffer {
        let data = channel_mean_kernel(&self.data, self.channels);
        Self { height: self.height, width: self.width, channels: 1, data }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Continuous pixel position; `x` runs along columns and `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleCoord {
    pub x: f64,
    pub y: f64,
}

impl SampleCoord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Result of [`bilinear_sample`]: the sampled image and, per output pixel,
/// whether the coordinate was inside the source grid (not clamped).
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub image: ImageBuffer,
    pub in_bounds: Vec<bool>,
}

/// The four taps and weights of one bilinear lookup with border clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BilinearTap {
    pub col0: usize,
    pub col1: usize,
    pub row0: usize,
    pub row1: usize,
    pub fx: f64,
    pub fy: f64,
    pub clamped_x: bool,
    pub clamped_y: bool,
}

impl BilinearTap {
    pub fn new(x: f64, y: f64, height: usize, width: usize) -> Self {
        let (col0, col1, fx, clamped_x) = axis_tap(x, width);
        let (row0, row1, fy, clamped_y) = axis_tap(y, height);
        Self { col0, col1, row0, row1, fx, fy, clamped_x, clamped_y }
    }

    pub fn in_bounds(&self) -> bool {
        !self.clamped_x && !self.clamped_y
    }

    #[inline]
    fn corner(&self, data: &[f64], width: usize, channels: usize, row: usize, col: usize, ch: usize) -> f64 {
        data[(row * width + col) * channels + ch]
    }

    pub fn sample(&self, data: &[f64], width: usize, channels: usize, ch: usize) -> f64 {
        let v00 = self.corner(data, width, channels, self.row0, self.col0, ch);
        let v01 = self.corner(data, width, channels, self.row0, self.col1, ch);
        let v10 = self.corner(data, width, channels, self.row1, self.col0, ch);
        let v11 = self.corner(data, width, channels, self.row1, self.col1, ch);
        let top = (1.0 - self.fx) * v00 + self.fx * v01;
        let bottom = (1.0 - self.fx) * v10 + self.fx * v11;
        (1.0 - self.fy) * top + self.fy * bottom
    }

    /// Partial derivatives of the sampled value w.r.t. `x` and `y`. Clamped
    /// axes have zero derivative.
    pub fn coord_partials(&self, data: &[f64], width: usize, channels: usize, ch: usize) -> (f64, f64) {
        let v00 = self.corner(data, width, channels, self.row0, self.col0, ch);
        let v01 = self.corner(data, width, channels, self.row0, self.col1, ch);
        let v10 = self.corner(data, width, channels, self.row1, self.col0, ch);
        let v11 = self.corner(data, width, channels, self.row1, self.col1, ch);
        let dx = if self.clamped_x || self.col0 == self.col1 {
            0.0
        } else {
            (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10)
        };
        let dy = if self.clamped_y || self.row0 == self.row1 {
            0.0
        } else {
            (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01)
        };
        (dx, dy)
    }

    /// Scatters `cot` into the source-image cotangent.
    pub fn scatter(&self, grad: &mut [f64], width: usize, channels: usize, ch: usize, cot: f64) {
        let w00 = (1.0 - self.fy) * (1.0 - self.fx);
        let w01 = (1.0 - self.fy) * self.fx;
        let w10 = self.fy * (1.0 - self.fx);
        let w11 = self.fy * self.fx;
        grad[(self.row0 * width + self.col0) * channels + ch] += w00 * cot;
        grad[(self.row0 * width + self.col1) * channels + ch] += w01 * cot;
        grad[(self.row1 * width + self.col0) * channels + ch] += w10 * cot;
        grad[(self.row1 * width + self.col1) * channels + ch] += w11 * cot;
    }
}

/// Lower index, upper index, fractional weight and clamp flag along one axis.
fn axis_tap(t: f64, len: usize) -> (usize, usize, f64, bool) {
    if len == 1 {
        return (0, 0, 0.0, t != 0.0);
    }
    let hi = (len - 1) as f64;
    let clamped = !(0.0..=hi).contains(&t);
    let t = t.clamp(0.0, hi);
    let i0 = (libm::floor(t) as usize).min(len - 2);
    (i0, i0 + 1, t - i0 as f64, clamped)
}

/// Bilinear interpolation of `img` at `coords` (row-major, `height x width`
/// of them). Out-of-range coordinates clamp to the border.
pub fn bilinear_sample(img: &ImageBuffer, coords: &[SampleCoord], height: usize, width: usize) -> Result<Sampled> {
    if coords.len() != height * width {
        return Err(Error::invalid("coordinate grid does not match output shape"));
    }
    if coords.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::invalid("sample coordinates must be finite"));
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(coords.len() * c);
    let mut in_bounds = Vec::with_capacity(coords.len());
    for p in coords {
        let tap = BilinearTap::new(p.x, p.y, img.height, img.width);
        in_bounds.push(tap.in_bounds());
        for ch in 0..c {
            data.push(tap.sample(&img.data, img.width, c, ch));
        }
    }
    Ok(Sampled { image: ImageBuffer::new(height, width, c, data)?, in_bounds })
}

/// Vector-Jacobian product of [`bilinear_sample`]: given the output
/// cotangent, returns the cotangents of the source image and of the
/// coordinates.
pub fn bilinear_sample_vjp(
    img: &ImageBuffer,
    coords: &[SampleCoord],
    out_cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<SampleCoord>)> {
    let c = img.channels;
    if out_cotangent.len() != coords.len() * c {
        return Err(Error::invalid("cotangent does not match sampled output"));
    }
    let mut d_img = vec![0.0; img.data.len()];
    let mut d_coords = Vec::with_capacity(coords.len());
    for (i, p) in coords.iter().enumerate() {
        let tap = BilinearTap::new(p.x, p.y, img.height, img.width);
        let (mut gx, mut gy) = (0.0, 0.0);
        for ch in 0..c {
            let cot = out_cotangent[i * c + ch];
            let (dx, dy) = tap.coord_partials(&img.data, img.width, c, ch);
            gx += cot * dx;
            gy += cot * dy;
            tap.scatter(&mut d_img, img.width, c, ch, cot);
        }
        d_coords.push(SampleCoord::new(gx, gy));
    }
    Ok((d_img, d_coords))
}

/// Forward differences along columns (`x`) and rows (`y`) of the channel
/// mean. The last column of `dx` and last row of `dy` repeat their
/// neighbours so both outputs keep the input shape.
pub fn spatial_gradient(img: &ImageBuffer) -> Result<(ImageBuffer, ImageBuffer)> {
    if img.height < 2 || img.width < 2 {
        return Err(Error::invalid("spatial gradient needs at least a 2x2 image"));
    }
    let mono = img.channel_mean();
    let dx = forward_diff_x(&mono.data, img.height, img.width, 1);
    let dy = forward_diff_y(&mono.data, img.height, img.width, 1);
    Ok((ImageBuffer::new(img.height, img.width, 1, dx)?, ImageBuffer::new(img.height, img.width, 1, dy)?))
}

pub(crate) fn forward_diff_x(data: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..h {
        for col in 0..w {
            let src = col.min(w - 2);
            for ch in 0..c {
                let a = data[(r * w + src) * c + ch];
                let b = data[(r * w + src + 1) * c + ch];
                out[(r * w + col) * c + ch] = b - a;
            }
        }
    }
    out
}

pub(crate) fn forward_diff_x_vjp(cot: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; cot.len()];
    for r in 0..h {
        for col in 0..w {
            let src = col.min(w - 2);
            for ch in 0..c {
                let g = cot[(r * w + col) * c + ch];
                out[(r * w + src) * c + ch] -= g;
                out[(r * w + src + 1) * c + ch] += g;
            }
        }
    }
    out
}

pub(crate) fn forward_diff_y(data: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..h {
        let src = r.min(h - 2);
        for col in 0..w {
            for ch in 0..c {
                let a = data[(src * w + col) * c + ch];
                let b = data[((src + 1) * w + col) * c + ch];
                out[(r * w + col) * c + ch] = b - a;
            }
        }
    }
    out
}

pub(crate) fn forward_diff_y_vjp(cot: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; cot.len()];
    for r in 0..h {
        let src = r.min(h - 2);
        for col in 0..w {
            for ch in 0..c {
                let g = cot[(r * w + col) * c + ch];
                out[(src * w + col) * c + ch] -= g;
                out[((src + 1) * w + col) * c + ch] += g;
            }
        }
    }
    out
}

pub(crate) fn channel_mean_kernel(data: &[f64], c: usize) -> Vec<f64> {
    if c == 1 {
        return data.to_vec();
    }
    data.chunks_exact(c).map(|px| px.iter().sum::<f64>() / c as f64).collect()
}

/// Position of a percentile between two order statistics: the result is
/// `sorted[lo] + frac * (sorted[hi] - sorted[lo])`, with `lo_index` and
/// `hi_index` pointing into the unsorted samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PercentileTap {
    pub lo_index: usize,
    pub hi_index: usize,
    pub frac: f64,
    pub value: f64,
}

pub(crate) fn percentile_tap(data: &[f64], q: f64) -> Result<PercentileTap> {
    if data.is_empty() {
        return Err(Error::invalid("percentile of an empty image"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid("percentile rank must lie in [0, 100]"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    // Stable on ties so the selected indices are deterministic.
    order.sort_by(|&a, &b| data[a].total_cmp(&data[b]));
    let rank = q * (data.len() - 1) as f64 / 100.0;
    let lo = libm::floor(rank) as usize;
    let hi = (libm::ceil(rank) as usize).min(data.len() - 1);
    let frac = rank - lo as f64;
    let (lo_index, hi_index) = (order[lo], order[hi]);
    let value = data[lo_index] + frac * (data[hi_index] - data[lo_index]);
    Ok(PercentileTap { lo_index, hi_index, frac, value })
}

/// Linear-interpolation percentile over all samples of `img`, with rank
/// `q * (n - 1) / 100` into the sorted values.
pub fn percentile(img: &ImageBuffer, q: f64) -> Result<f64> {
    percentile_tap(&img.data, q).map(|t| t.value)
}

/// Box-filter mean over a `(2 * radius + 1)^2` window with edge-replicated
/// borders.
pub fn window_mean(img: &ImageBuffer, radius: usize) -> Result<ImageBuffer> {
    if radius == 0 {
        return Err(Error::invalid("window radius must be at least 1"));
    }
    let data = box_mean(&img.data, img.height, img.width, img.channels, radius);
    ImageBuffer::new(img.height, img.width, img.channels, data)
}

pub(crate) fn box_mean(data: &[f64], h: usize, w: usize, c: usize, radius: usize) -> Vec<f64> {
    let horizontal = box_pass(data, h, w, c, radius, Axis::Cols, false);
    box_pass(&horizontal, h, w, c, radius, Axis::Rows, false)
}

pub(crate) fn box_mean_vjp(cot: &[f64], h: usize, w: usize, c: usize, radius: usize) -> Vec<f64> {
    let vertical = box_pass(cot, h, w, c, radius, Axis::Rows, true);
    box_pass(&vertical, h, w, c, radius, Axis::Cols, true)
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

/// One separable 1-D box pass with clamped taps. With `transpose` the
/// adjoint is applied (gather becomes scatter).
fn box_pass(data: &[f64], h: usize, w: usize, c: usize, radius: usize, axis: Axis, transpose: bool) -> Vec<f64> {
    let (outer, n, inner) = match axis {
        Axis::Cols => (h, w, c),
        Axis::Rows => (1, h, w * c),
    };
    let mut out = vec![0.0; data.len()];
    let norm = 1.0 / (2 * radius + 1) as f64;
    let r = radius as isize;
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            for k in -r..=r {
                let j = (i as isize + k).clamp(0, n as isize - 1) as usize;
                let (dst, src) = if transpose { (j, i) } else { (i, j) };
                let dst = &mut out[base + dst * inner..base + (dst + 1) * inner];
                let src = &data[base + src * inner..base + (src + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += norm * s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcg_image(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ImageBuffer::from_fn(h, w, c, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageBuffer::new(0, 2, 1, vec![]).is_err());
        assert!(ImageBuffer::new(1, 2, 2, vec![0.0; 4]).is_err());
        assert!(ImageBuffer::new(1, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn sample_at_integer_coordinate_is_exact() {
        let img = lcg_image(5, 6, 3, 7);
        let out = bilinear_sample(&img, &[SampleCoord::new(2.0, 3.0)], 1, 1).unwrap();
        for ch in 0..3 {
            assert_eq!(out.image.at(0, 0, ch), img.at(3, 2, ch));
        }
    }

    #[test]
    fn sample_cell_centre_is_mean_of_corners() {
        let img = ImageBuffer::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = bilinear_sample(&img, &[SampleCoord::new(0.5, 0.5)], 1, 1).unwrap();
        assert_eq!(out.image.at(0, 0, 0), 1.5);
    }

    #[test]
    fn sample_out_of_range_clamps_and_flags() {
        let img = lcg_image(4, 4, 1, 3);
        let out = bilinear_sample(&img, &[SampleCoord::new(-5.0, -5.0)], 1, 1).unwrap();
        assert_eq!(out.image.at(0, 0, 0), img.at(0, 0, 0));
        assert!(!out.in_bounds[0]);
        let inside = bilinear_sample(&img, &[SampleCoord::new(3.0, 0.0)], 1, 1).unwrap();
        assert!(inside.in_bounds[0]);
    }

    #[test]
    fn sample_grid_shape_is_checked() {
        let img = lcg_image(4, 4, 1, 3);
        assert!(bilinear_sample(&img, &[SampleCoord::new(0.0, 0.0)], 2, 2).is_err());
    }

    #[test]
    fn sample_vjp_matches_finite_differences() {
        let img = lcg_image(4, 5, 3, 11);
        let coords = [SampleCoord::new(1.3, 2.6), SampleCoord::new(3.7, 0.2)];
        let cot = [0.3, -0.2, 0.9, 1.1, 0.4, -0.7];
        let loss = |img: &ImageBuffer, coords: &[SampleCoord]| -> f64 {
            let s = bilinear_sample(img, coords, 1, 2).unwrap();
            s.image.data().iter().zip(cot.iter()).map(|(a, b)| a * b).sum()
        };
        let (d_img, d_coords) = bilinear_sample_vjp(&img, &coords, &cot).unwrap();
        let h = 1e-6;
        for (i, dc) in d_coords.iter().enumerate() {
            let mut plus = coords;
            let mut minus = coords;
            plus[i].x += h;
            minus[i].x -= h;
            let fd = (loss(&img, &plus) - loss(&img, &minus)) / (2.0 * h);
            assert!((fd - dc.x).abs() < 1e-8);
            let mut plus = coords;
            let mut minus = coords;
            plus[i].y += h;
            minus[i].y -= h;
            let fd = (loss(&img, &plus) - loss(&img, &minus)) / (2.0 * h);
            assert!((fd - dc.y).abs() < 1e-8);
        }
        for (k, dk) in d_img.iter().enumerate() {
            let mut plus = img.clone();
            plus.data[k] += h;
            let mut minus = img.clone();
            minus.data[k] -= h;
            let fd = (loss(&plus, &coords) - loss(&minus, &coords)) / (2.0 * h);
            assert!((fd - dk).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let img = ImageBuffer::filled(4, 5, 3, 0.4).unwrap();
        let (dx, dy) = spatial_gradient(&img).unwrap();
        assert!(dx.data().iter().chain(dy.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_column_ramp() {
        let img = ImageBuffer::from_fn(4, 6, 1, |_, c, _| c as f64).unwrap();
        let (dx, dy) = spatial_gradient(&img).unwrap();
        assert!(dx.data().iter().all(|&v| v == 1.0));
        assert!(dy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_rejects_degenerate_images() {
        assert!(spatial_gradient(&ImageBuffer::filled(1, 5, 1, 0.0).unwrap()).is_err());
        assert!(spatial_gradient(&ImageBuffer::filled(5, 1, 1, 0.0).unwrap()).is_err());
    }

    #[test]
    fn gradient_matches_double_loop_oracle() {
        let img = lcg_image(5, 5, 1, 42);
        let (dx, dy) = spatial_gradient(&img).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let cx = if c == 4 { 3 } else { c };
                let ry = if r == 4 { 3 } else { r };
                assert_eq!(dx.at(r, c, 0), img.at(r, cx + 1, 0) - img.at(r, cx, 0));
                assert_eq!(dy.at(r, c, 0), img.at(ry + 1, c, 0) - img.at(ry, c, 0));
            }
        }
    }

    #[test]
    fn gradient_vjps_are_adjoint() {
        let (h, w, c) = (4, 5, 3);
        let x = lcg_image(h, w, c, 1).into_data();
        let y = lcg_image(h, w, c, 2).into_data();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&forward_diff_x(&x, h, w, c), &y);
        let rhs = dot(&x, &forward_diff_x_vjp(&y, h, w, c));
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = dot(&forward_diff_y(&x, h, w, c), &y);
        let rhs = dot(&x, &forward_diff_y_vjp(&y, h, w, c));
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = dot(&box_mean(&x, h, w, c, 2), &y);
        let rhs = dot(&x, &box_mean_vjp(&y, h, w, c, 2));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn percentile_examples() {
        let constant = ImageBuffer::filled(3, 3, 1, 0.7).unwrap();
        assert_eq!(percentile(&constant, 37.0).unwrap(), 0.7);
        let three = ImageBuffer::new(1, 3, 1, vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(percentile(&three, 50.0).unwrap(), 2.0);
        assert!(percentile(&three, 100.5).is_err());
        assert!(percentile(&three, -0.1).is_err());
    }

    #[test]
    fn percentile_of_one_to_hundred() {
        // rank = 95 * 99 / 100 = 94.05 -> sorted[94] + 0.05 * (sorted[95] - sorted[94])
        let img = ImageBuffer::from_fn(10, 10, 1, |r, c, _| (100 - (r * 10 + c)) as f64).unwrap();
        let mut sorted: Vec<f64> = img.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = 95.0 * 99.0 / 100.0;
        let lo = libm::floor(rank) as usize;
        let oracle = sorted[lo] + (rank - lo as f64) * (sorted[lo + 1] - sorted[lo]);
        let got = percentile(&img, 95.0).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 95.05).abs() < 1e-12);
    }

    #[test]
    fn window_mean_examples() {
        let constant = ImageBuffer::filled(4, 4, 3, 0.25).unwrap();
        let out = window_mean(&constant, 2).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let impulse = ImageBuffer::from_fn(5, 5, 1, |r, c, _| if r == 2 && c == 2 { 1.0 } else { 0.0 }).unwrap();
        let out = window_mean(&impulse, 1).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let expected = if (1..=3).contains(&r) && (1..=3).contains(&c) { 1.0 / 9.0 } else { 0.0 };
                assert!((out.at(r, c, 0) - expected).abs() < 1e-15);
            }
        }
        assert!(window_mean(&impulse, 0).is_err());
    }

    #[test]
    fn window_mean_matches_naive_oracle() {
        let img = lcg_image(7, 7, 1, 99);
        let out = window_mean(&img, 2).unwrap();
        for r in 0..7isize {
            for c in 0..7isize {
                let mut acc = 0.0;
                for dr in -2..=2 {
                    for dc in -2..=2 {
                        let rr = (r + dr).clamp(0, 6) as usize;
                        let cc = (c + dc).clamp(0, 6) as usize;
                        acc += img.at(rr, cc, 0);
                    }
                }
                assert!((out.at(r as usize, c as usize, 0) - acc / 25.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn integer_samples_reproduce_pixels(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
            let img = lcg_image(h, w, 3, seed);
            let coords: Vec<SampleCoord> = (0..h)
                .flat_map(|r| (0..w).map(move |c| SampleCoord::new(c as f64, r as f64)))
                .collect();
            let out = bilinear_sample(&img, &coords, h, w).unwrap();
            prop_assert_eq!(out.image, img);
        }

        #[test]
        fn samples_stay_within_image_range(seed in any::<u64>(), x in -3.0f64..8.0, y in -3.0f64..8.0) {
            let img = lcg_image(5, 5, 1, seed);
            let out = bilinear_sample(&img, &[SampleCoord::new(x, y)], 1, 1).unwrap();
            let v = out.image.at(0, 0, 0);
            prop_assert!(v >= img.min() - 1e-12 && v <= img.max() + 1e-12);
        }

        #[test]
        fn percentile_extremes_are_min_and_max(seed in any::<u64>(), n in 1usize..40) {
            let img = lcg_image(1, n, 1, seed);
            prop_assert_eq!(percentile(&img, 0.0).unwrap(), img.min());
            prop_assert_eq!(percentile(&img, 100.0).unwrap(), img.max());
        }

        #[test]
        fn gradient_ignores_offsets(seed in any::<u64>(), offset in -10.0f64..10.0) {
            // Dyadic offsets keep the shifted differences exact.
            let offset = libm::round(offset * 8.0) / 8.0;
            let img = lcg_image(4, 4, 1, seed).map(|v| libm::round(v * 1024.0) / 1024.0).unwrap();
            let shifted = img.map(|v| v + offset).unwrap();
            prop_assert_eq!(spatial_gradient(&img).unwrap(), spatial_gradient(&shifted).unwrap());
        }
    }
}
