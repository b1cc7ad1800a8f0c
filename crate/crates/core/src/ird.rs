//! Illumination-reflectance-depth image formation.
//!
//! An image is modelled as `R * L * exp(-beta * D)`: reflectance times a
//! single-source illumination field times a depth attenuation term. The
//! illumination field is `(1 / (1 + |p - c|))^theta` over positions scaled
//! so the image diagonal has length 2; the light centre `(x0, y0)` is given
//! in image fractions, `(0.5, 0.5)` being the image centre.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::imaging::ImageBuffer;
use crate::{Error, Result};

/// Upper bound of the angular decay factor.
pub const THETA_MAX: f64 = 10.0;
/// Allowed range of each light-centre coordinate.
pub const CENTER_RANGE: (f64, f64) = (-0.5, 1.5);
pub const DEFAULT_BETA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightParams {
    pub x0: f64,
    pub y0: f64,
    pub theta: f64,
}

impl LightParams {
    pub fn new(x0: f64, y0: f64, theta: f64) -> Result<Self> {
        let p = Self { x0, y0, theta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = CENTER_RANGE;
        if !(0.0..=THETA_MAX).contains(&self.theta) {
            return Err(Error::invalid("theta must lie in [0, THETA_MAX]"));
        }
        if !(lo..=hi).contains(&self.x0) || !(lo..=hi).contains(&self.y0) {
            return Err(Error::invalid("light centre outside [-0.5, 1.5]^2"));
        }
        Ok(())
    }

    /// Maps an unconstrained 3-vector onto valid parameters through
    /// sigmoids: centre coordinates onto `[-0.5, 1.5]`, theta onto
    /// `[0, THETA_MAX]`.
    pub fn from_raw(raw: [f64; 3]) -> Self {
        let (lo, hi) = CENTER_RANGE;
        Self {
            x0: lo + (hi - lo) * sigmoid(raw[0]),
            y0: lo + (hi - lo) * sigmoid(raw[1]),
            theta: THETA_MAX * sigmoid(raw[2]),
        }
    }

    /// Inverse of [`LightParams::from_raw`] for parameters strictly inside
    /// their ranges.
    pub fn to_raw(&self) -> [f64; 3] {
        let (lo, hi) = CENTER_RANGE;
        [logit((self.x0 - lo) / (hi - lo)), logit((self.y0 - lo) / (hi - lo)), logit(self.theta / THETA_MAX)]
    }

    /// Jacobian diagonal of [`LightParams::from_raw`].
    pub(crate) fn raw_derivative(raw: [f64; 3]) -> [f64; 3] {
        let (lo, hi) = CENTER_RANGE;
        let ds = |v: f64| {
            let s = sigmoid(v);
            s * (1.0 - s)
        };
        [(hi - lo) * ds(raw[0]), (hi - lo) * ds(raw[1]), THETA_MAX * ds(raw[2])]
    }
}

/// The depth attenuation factor `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthScale(f64);

impl DepthScale {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::invalid("beta must be positive"));
        }
        Ok(Self(beta))
    }

    pub fn beta(&self) -> f64 {
        self.0
    }
}

impl Default for DepthScale {
    fn default() -> Self {
        Self(DEFAULT_BETA)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    libm::log(p / (1.0 - p))
}

/// Scale from pixel units to normalized units (image diagonal = 2).
pub(crate) fn position_scale(height: usize, width: usize) -> f64 {
    let diag = libm::hypot((width - 1) as f64, (height - 1) as f64);
    if diag > 0.0 {
        2.0 / diag
    } else {
        1.0
    }
}

/// Normalized distance of pixel `(row, col)` from the light centre, plus the
/// normalized offsets `(dx, dy)` pointing from the centre to the pixel.
pub(crate) fn light_offset(
    params: &LightParams,
    row: usize,
    col: usize,
    height: usize,
    width: usize,
) -> (f64, f64, f64) {
    let s = position_scale(height, width);
    let dx = (col as f64 - params.x0 * (width - 1) as f64) * s;
    let dy = (row as f64 - params.y0 * (height - 1) as f64) * s;
    (libm::hypot(dx, dy), dx, dy)
}

/// Normalized distance from the light centre for every pixel.
pub fn light_distance_map(params: &LightParams, height: usize, width: usize) -> Result<ImageBuffer> {
    ImageBuffer::from_fn(height, width, 1, |r, c, _| light_offset(params, r, c, height, width).0)
}

/// Single-channel illumination field `(1 / (1 + |p - c|))^theta`.
pub fn illumination_map(params: &LightParams, height: usize, width: usize) -> Result<ImageBuffer> {
    params.validate()?;
    ImageBuffer::from_fn(height, width, 1, |r, c, _| {
        let (d, _, _) = light_offset(params, r, c, height, width);
        libm::exp(-params.theta * libm::log1p(d))
    })
}

/// Cotangent of `[x0, y0, theta]` given a cotangent on the illumination map.
pub fn illumination_map_vjp(params: &LightParams, height: usize, width: usize, cot: &[f64]) -> Result<[f64; 3]> {
    if cot.len() != height * width {
        return Err(Error::invalid("cotangent does not match illumination grid"));
    }
    let s = position_scale(height, width);
    let mut g = [0.0; 3];
    for r in 0..height {
        for c in 0..width {
            let ct = cot[r * width + c];
            if ct == 0.0 {
                continue;
            }
            let (d, dx, dy) = light_offset(params, r, c, height, width);
            let l = libm::exp(-params.theta * libm::log1p(d));
            g[2] -= ct * libm::log1p(d) * l;
            if d > 0.0 {
                // dL/dd * dd/dx0 with dd/dx0 = -(dx / d) * (W - 1) * s.
                let dl_dd = -params.theta * l / (1.0 + d);
                g[0] += ct * dl_dd * (-dx / d) * (width - 1) as f64 * s;
                g[1] += ct * dl_dd * (-dy / d) * (height - 1) as f64 * s;
            }
        }
    }
    Ok(g)
}

fn check_fields(r: &ImageBuffer, l: &ImageBuffer, d: &ImageBuffer) -> Result<()> {
    if !r.same_grid(l) || !r.same_grid(d) {
        return Err(Error::invalid("reflectance, illumination and depth differ in shape"));
    }
    if l.channels() != 1 || d.channels() != 1 {
        return Err(Error::invalid("illumination and depth must be single-channel"));
    }
    Ok(())
}

fn attenuated_product(img: &ImageBuffer, l: &ImageBuffer, d: &ImageBuffer, beta: f64) -> Result<ImageBuffer> {
    let c = img.channels();
    let data = img
        .data()
        .chunks_exact(c)
        .zip(l.data().iter().zip(d.data()))
        .flat_map(|(px, (&lv, &dv))| {
            let gain = lv * libm::exp(-beta * dv);
            px.iter().map(move |&v| v * gain)
        })
        .collect();
    ImageBuffer::new(img.height(), img.width(), c, data)
}

/// `R * L * exp(-beta * D)`, with the single-channel `L` and `D` broadcast
/// over the channels of `R`.
pub fn ird_render(r: &ImageBuffer, l: &ImageBuffer, d: &ImageBuffer, scale: DepthScale) -> Result<ImageBuffer> {
    check_fields(r, l, d)?;
    attenuated_product(r, l, d, scale.beta())
}

/// Cotangents of [`ird_render`] inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderCotangent {
    pub reflectance: Vec<f64>,
    pub illumination: Vec<f64>,
    pub depth: Vec<f64>,
    pub beta: f64,
}

pub fn ird_render_vjp(
    r: &ImageBuffer,
    l: &ImageBuffer,
    d: &ImageBuffer,
    scale: DepthScale,
    cot: &[f64],
) -> Result<RenderCotangent> {
    check_fields(r, l, d)?;
    let c = r.channels();
    if cot.len() != r.data().len() {
        return Err(Error::invalid("cotangent does not match rendered image"));
    }
    let beta = scale.beta();
    let n = r.pixel_count();
    let mut out = RenderCotangent {
        reflectance: alloc::vec![0.0; r.data().len()],
        illumination: alloc::vec![0.0; n],
        depth: alloc::vec![0.0; n],
        beta: 0.0,
    };
    for i in 0..n {
        let (lv, dv) = (l.data()[i], d.data()[i]);
        let e = libm::exp(-beta * dv);
        for ch in 0..c {
            let k = i * c + ch;
            let rv = r.data()[k];
            let ct = cot[k];
            let value = rv * lv * e;
            out.reflectance[k] = ct * lv * e;
            out.illumination[i] += ct * rv * e;
            out.depth[i] -= ct * beta * value;
            out.beta -= ct * dv * value;
        }
    }
    Ok(out)
}

/// `I * L * exp(-beta * D)`: the darkened copy of a frame used as a fixed
/// input for degradation consistency. Plain values; nothing here is tracked
/// for differentiation.
pub fn degrade_image(i: &ImageBuffer, l: &ImageBuffer, d: &ImageBuffer, scale: DepthScale) -> Result<ImageBuffer> {
    check_fields(i, l, d)?;
    attenuated_product(i, l, d, scale.beta())
}

/// Depth-free Retinex product `R * L`.
pub fn retinex_render(r: &ImageBuffer, l: &ImageBuffer) -> Result<ImageBuffer> {
    if !r.same_grid(l) || l.channels() != 1 {
        return Err(Error::invalid("illumination must be single-channel on the reflectance grid"));
    }
    let c = r.channels();
    let data = r.data().chunks_exact(c).zip(l.data()).flat_map(|(px, &lv)| px.iter().map(move |&v| v * lv)).collect();
    ImageBuffer::new(r.height(), r.width(), c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;
    use proptest::prelude::*;

    fn noise(h: usize, w: usize, c: usize, seed: u64, lo: f64, hi: f64) -> ImageBuffer {
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        ImageBuffer::from_fn(h, w, c, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
        })
        .unwrap()
    }

    #[test]
    fn illumination_is_one_at_centre() {
        // 5x5 grid: fraction 0.5 lands on pixel (2, 2).
        let p = LightParams::new(0.5, 0.5, 3.7).unwrap();
        let l = illumination_map(&p, 5, 5).unwrap();
        assert_eq!(l.at(2, 2, 0), 1.0);
    }

    #[test]
    fn zero_theta_gives_uniform_field() {
        let p = LightParams::new(0.1, 0.9, 0.0).unwrap();
        let l = illumination_map(&p, 6, 9).unwrap();
        assert!(l.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unit_theta_at_unit_distance_is_half() {
        // Corner-centred light on a square grid: the opposite corner is at
        // normalized distance 2, the midpoint of the diagonal at distance 1.
        let p = LightParams::new(0.0, 0.0, 1.0).unwrap();
        let l = illumination_map(&p, 5, 5).unwrap();
        assert!((l.at(2, 2, 0) - 0.5).abs() < 1e-15);
        assert!((l.at(4, 4, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn light_params_are_validated() {
        assert!(LightParams::new(0.5, 0.5, 10.5).is_err());
        assert!(LightParams::new(1.6, 0.5, 1.0).is_err());
        assert!(DepthScale::new(0.0).is_err());
    }

    #[test]
    fn raw_mapping_round_trips() {
        let p = LightParams::new(0.3, 1.2, 2.5).unwrap();
        let q = LightParams::from_raw(p.to_raw());
        assert!((p.x0 - q.x0).abs() < 1e-12 && (p.y0 - q.y0).abs() < 1e-12 && (p.theta - q.theta).abs() < 1e-12);
        let init = LightParams::from_raw([0.0, 0.0, logit(0.1)]);
        assert_eq!((init.x0, init.y0), (0.5, 0.5));
        assert!((init.theta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn neutral_fields_reproduce_reflectance() {
        let r = noise(4, 5, 3, 1, 0.0, 1.0);
        let one = ImageBuffer::filled(4, 5, 1, 1.0).unwrap();
        let zero = ImageBuffer::filled(4, 5, 1, 0.0).unwrap();
        assert_eq!(ird_render(&r, &one, &zero, DepthScale::default()).unwrap(), r);
        assert_eq!(degrade_image(&r, &one, &zero, DepthScale::default()).unwrap(), r);
        assert_eq!(retinex_render(&r, &one).unwrap(), r);
    }

    #[test]
    fn ln2_depth_halves_unit_reflectance() {
        let one3 = ImageBuffer::filled(3, 3, 3, 1.0).unwrap();
        let one = ImageBuffer::filled(3, 3, 1, 1.0).unwrap();
        let d = ImageBuffer::filled(3, 3, 1, LN_2).unwrap();
        let out = ird_render(&one3, &one, &d, DepthScale::new(1.0).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn retinex_with_zero_reflectance_is_black() {
        let r = ImageBuffer::filled(3, 3, 3, 0.0).unwrap();
        let l = noise(3, 3, 1, 2, 0.1, 1.0);
        assert!(retinex_render(&r, &l).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let r = ImageBuffer::filled(3, 3, 3, 0.5).unwrap();
        let l = ImageBuffer::filled(3, 4, 1, 1.0).unwrap();
        let d = ImageBuffer::filled(3, 3, 1, 1.0).unwrap();
        assert!(ird_render(&r, &l, &d, DepthScale::default()).is_err());
        assert!(degrade_image(&r, &l, &d, DepthScale::default()).is_err());
        assert!(retinex_render(&r, &l).is_err());
        let l3 = ImageBuffer::filled(3, 3, 3, 1.0).unwrap();
        assert!(ird_render(&r, &l3, &d, DepthScale::default()).is_err());
    }

    #[test]
    fn illumination_vjp_matches_finite_differences() {
        let (h, w) = (8, 8);
        let p = LightParams::new(0.37, 0.61, 2.3).unwrap();
        let cot = noise(h, w, 1, 5, -1.0, 1.0).into_data();
        let f = |p: &LightParams| -> f64 {
            let l = illumination_map(p, h, w).unwrap();
            l.data().iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let g = illumination_map_vjp(&p, h, w, &cot).unwrap();
        let step = 1e-4;
        let probes = [
            (LightParams { x0: p.x0 + step, ..p }, LightParams { x0: p.x0 - step, ..p }),
            (LightParams { y0: p.y0 + step, ..p }, LightParams { y0: p.y0 - step, ..p }),
            (LightParams { theta: p.theta + step, ..p }, LightParams { theta: p.theta - step, ..p }),
        ];
        for (k, (plus, minus)) in probes.iter().enumerate() {
            let fd = (f(plus) - f(minus)) / (2.0 * step);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-12);
            assert!(rel < 1e-3, "param {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn render_vjp_matches_finite_differences() {
        let (h, w) = (8, 8);
        let r = noise(h, w, 3, 7, 0.1, 0.9);
        let l = noise(h, w, 1, 8, 0.2, 1.0);
        let d = noise(h, w, 1, 9, 0.5, 1.5);
        let beta = DepthScale::new(0.3).unwrap();
        let cot = noise(h, w, 3, 10, -1.0, 1.0).into_data();
        let f = |r: &ImageBuffer, l: &ImageBuffer, d: &ImageBuffer, b: f64| -> f64 {
            let out = ird_render(r, l, d, DepthScale::new(b).unwrap()).unwrap();
            out.data().iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let g = ird_render_vjp(&r, &l, &d, beta, &cot).unwrap();
        let step = 1e-4;
        let bump = |img: &ImageBuffer, k: usize, s: f64| {
            let mut data = img.clone().into_data();
            data[k] += s;
            ImageBuffer::new(img.height(), img.width(), img.channels(), data).unwrap()
        };
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        for k in [0, 17, 100, 191] {
            let fd = (f(&bump(&r, k, step), &l, &d, 0.3) - f(&bump(&r, k, -step), &l, &d, 0.3)) / (2.0 * step);
            assert!(rel(fd, g.reflectance[k]) < 1e-3);
        }
        for k in [0, 21, 63] {
            let fd = (f(&r, &bump(&l, k, step), &d, 0.3) - f(&r, &bump(&l, k, -step), &d, 0.3)) / (2.0 * step);
            assert!(rel(fd, g.illumination[k]) < 1e-3);
            let fd = (f(&r, &l, &bump(&d, k, step), 0.3) - f(&r, &l, &bump(&d, k, -step), 0.3)) / (2.0 * step);
            assert!(rel(fd, g.depth[k]) < 1e-3);
        }
        let fd = (f(&r, &l, &d, 0.3 + step) - f(&r, &l, &d, 0.3 - step)) / (2.0 * step);
        assert!(rel(fd, g.beta) < 1e-3);
    }

    proptest! {
        #[test]
        fn illumination_decays_along_rays(x0 in 0.0f64..1.0, y0 in 0.0f64..1.0, theta in 0.01f64..10.0,
                                          angle in 0.0f64..core::f64::consts::TAU) {
            let p = LightParams::new(x0, y0, theta).unwrap();
            let (h, w) = (33, 33);
            let l = illumination_map(&p, h, w).unwrap();
            let (cx, cy) = (x0 * (w - 1) as f64, y0 * (h - 1) as f64);
            let (ux, uy) = (libm::cos(angle), libm::sin(angle));
            // Walk outward from the centre, reading the nearest pixel each step.
            let mut prev: Option<(f64, f64)> = None;
            for step in 0..64 {
                let (x, y) = (cx + ux * step as f64 * 0.5, cy + uy * step as f64 * 0.5);
                if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                    break;
                }
                let (col, row) = (libm::round(x) as usize, libm::round(y) as usize);
                let (dist, _, _) = light_offset(&p, row, col, h, w);
                let v = l.at(row, col, 0);
                if let Some((pd, pv)) = prev {
                    if dist > pd {
                        prop_assert!(v <= pv);
                    }
                }
                prev = Some((dist, v));
            }
        }

        #[test]
        fn render_never_brightens_with_depth(seed in any::<u64>(), k in 0usize..16, bump in 0.0f64..3.0) {
            let r = noise(4, 4, 3, seed, 0.0, 1.0);
            let l = noise(4, 4, 1, seed ^ 1, 0.0, 1.0);
            let d = noise(4, 4, 1, seed ^ 2, 0.0, 2.0);
            let mut deeper = d.clone().into_data();
            deeper[k] += bump;
            let deeper = ImageBuffer::new(4, 4, 1, deeper).unwrap();
            let a = ird_render(&r, &l, &d, DepthScale::default()).unwrap();
            let b = ird_render(&r, &l, &deeper, DepthScale::default()).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(y <= x);
            }
        }

        #[test]
        fn degrade_is_a_contraction(seed in any::<u64>(), theta in 0.0f64..10.0) {
            let i = noise(6, 6, 3, seed, 0.0, 1.0);
            let l = illumination_map(&LightParams::new(0.4, 0.6, theta).unwrap(), 6, 6).unwrap();
            let d = noise(6, 6, 1, seed ^ 3, 0.0, 2.0);
            let out = degrade_image(&i, &l, &d, DepthScale::default()).unwrap();
            for (a, b) in out.data().iter().zip(i.data()) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn retinex_is_render_at_zero_depth(seed in any::<u64>()) {
            let r = noise(5, 4, 3, seed, 0.0, 1.0);
            let l = noise(5, 4, 1, seed ^ 9, 0.0, 1.0);
            let zero = ImageBuffer::filled(5, 4, 1, 0.0).unwrap();
            prop_assert_eq!(retinex_render(&r, &l).unwrap(), ird_render(&r, &l, &zero, DepthScale::default()).unwrap());
        }
    }
}
