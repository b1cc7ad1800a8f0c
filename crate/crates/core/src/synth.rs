//! Procedural endoscopic-like scenes with planted ground truth.
//!
//! Depth and reflectance are analytic functions of continuous target pixel
//! coordinates. The target frame is rendered with the IRD model directly;
//! each source frame is rendered per source pixel by inverting the
//! ground-truth correspondence (Newton iteration) to find the target
//! surface point it sees, then applying the source frame's light and depth
//! attenuation. Reflectance is therefore exactly consistent between views,
//! while shading is not.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{project_correspondence, Intrinsics, RigidTransform, Vec3, Z_MIN};
use crate::imaging::{ImageBuffer, SampleCoord};
use crate::ird::{illumination_map, ird_render, position_scale, DepthScale, LightParams, CENTER_RANGE, THETA_MAX};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Bowl,
    Tube,
    Bumps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    Checker,
    SmoothNoise,
    Blobs,
}

/// Closed interval `[lo, hi]` to draw from.
pub type Range = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub geometry: GeometryKind,
    pub texture: TextureKind,
    /// Shape strength: bowl curvature `a`, tube bulge, or bump amplitude.
    pub curvature: Range,
    /// Range for each of the light-centre coordinates `x0`, `y0`.
    pub light_center: Range,
    pub light_theta: Range,
    /// Rotation angle magnitude (radians) of each source pose.
    pub rotation: Range,
    /// Translation magnitude (scene units) of each source pose.
    pub translation: Range,
    pub sources: usize,
    /// Focal length as a multiple of the image width.
    pub focal: f64,
    pub beta: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            geometry: GeometryKind::Bowl,
            texture: TextureKind::Checker,
            curvature: [0.3, 1.0],
            light_center: [0.3, 0.7],
            light_theta: [1.0, 3.0],
            rotation: [0.0, 0.02],
            translation: [0.02, 0.05],
            sources: 2,
            focal: 0.8,
            beta: crate::ird::DEFAULT_BETA,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: Range, lo: f64, hi: f64| {
            r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi
        };
        if self.height < 2 || self.width < 2 {
            return Err(Error::invalid("scene must be at least 2x2"));
        }
        if self.sources == 0 {
            return Err(Error::invalid("scene needs at least one source frame"));
        }
        if !ordered(self.curvature, 0.0, 2.0) {
            return Err(Error::invalid("curvature range must lie in [0, 2]"));
        }
        if !ordered(self.light_center, CENTER_RANGE.0, CENTER_RANGE.1) {
            return Err(Error::invalid("light centre range must lie in [-0.5, 1.5]"));
        }
        if !ordered(self.light_theta, 0.0, THETA_MAX) {
            return Err(Error::invalid("theta range must lie in [0, 10]"));
        }
        if !ordered(self.rotation, 0.0, 0.5) || !ordered(self.translation, 0.0, 0.5) {
            return Err(Error::invalid("pose magnitude ranges must lie in [0, 0.5]"));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::invalid("focal multiple must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and non-negative"));
        }
        DepthScale::new(self.beta)?;
        Ok(())
    }
}

/// A planar sinusoid `weight * sin(freq * dir . p + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub dir: [f64; 2],
    pub freq: f64,
    pub phase: f64,
    pub weight: f64,
}

impl Wave {
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.weight * libm::sin(self.freq * (self.dir[0] * x + self.dir[1] * y) + self.phase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amp: f64,
}

/// Unnormalized depth surface over diagonal-normalized image positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    /// `1 + a |p - p0|^2`.
    Bowl { a: f64, center: [f64; 2] },
    /// Cylinder section of radius 1.5 across direction `dir`.
    Tube { a: f64, center: [f64; 2], dir: [f64; 2] },
    /// `1 + a/4 * sum of waves`, weights summing to 1.
    Bumps { a: f64, waves: Vec<Wave> },
}

impl Surface {
    fn eval(&self, px: f64, py: f64) -> f64 {
        match self {
            Surface::Bowl { a, center } => {
                let (dx, dy) = (px - center[0], py - center[1]);
                1.0 + a * (dx * dx + dy * dy)
            }
            Surface::Tube { a, center, dir } => {
                let u = ((px - center[0]) * dir[0] + (py - center[1]) * dir[1]) / 1.5;
                1.0 + a * (1.0 - libm::sqrt((1.0 - u * u).max(0.0)))
            }
            Surface::Bumps { a, waves } => 1.0 + 0.25 * a * waves.iter().map(|w| w.eval(px, py)).sum::<f64>(),
        }
    }
}

/// Reflectance pattern over pixel coordinates, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Texture {
    /// Checkerboard with smoothed edges.
    Checker {
        period: f64,
        phase: [f64; 2],
        sharpness: f64,
    },
    SmoothNoise {
        waves: Vec<Wave>,
    },
    Blobs {
        blobs: Vec<Blob>,
    },
}

impl Texture {
    fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Texture::Checker { period, phase, sharpness } => {
                let pi = core::f64::consts::PI;
                let s = libm::sin(pi * (x + phase[0]) / period) * libm::sin(pi * (y + phase[1]) / period);
                0.5 + 0.5 * libm::tanh(sharpness * s)
            }
            Texture::SmoothNoise { waves } => 0.5 + 0.5 * waves.iter().map(|w| w.eval(x, y)).sum::<f64>(),
            Texture::Blobs { blobs } => {
                let s: f64 = blobs
                    .iter()
                    .map(|b| {
                        let (dx, dy) = (x - b.center[0], y - b.center[1]);
                        b.amp * libm::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma))
                    })
                    .sum();
                libm::tanh(s)
            }
        }
    }
}

/// Analytic scene content: everything needed to evaluate depth and
/// reflectance at continuous target coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub surface: Surface,
    pub texture: Texture,
    /// Per-channel reflectance `lo + span * pattern`.
    pub tint_lo: [f64; 3],
    pub tint_span: [f64; 3],
    /// Divisor making the mean of the depth grid exactly 1.
    pub depth_norm: f64,
    pub height: usize,
    pub width: usize,
}

impl SceneModel {
    fn position(&self, x: f64, y: f64) -> (f64, f64) {
        let s = position_scale(self.height, self.width);
        (s * (x - 0.5 * (self.width - 1) as f64), s * (y - 0.5 * (self.height - 1) as f64))
    }

    /// Depth at continuous target pixel `(x, y)` = (col, row).
    pub fn depth_at(&self, x: f64, y: f64) -> f64 {
        let (px, py) = self.position(x, y);
        self.surface.eval(px, py) / self.depth_norm
    }

    pub fn reflectance_at(&self, x: f64, y: f64) -> [f64; 3] {
        let t = self.texture.eval(x, y).clamp(0.0, 1.0);
        core::array::from_fn(|c| self.tint_lo[c] + self.tint_span[c] * t)
    }
}

/// Planted ground truth of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub model: SceneModel,
    /// Target depth, mean 1.
    pub depth: ImageBuffer,
    pub reflectance: ImageBuffer,
    /// Target-frame light.
    pub light: LightParams,
    /// `T_{t->s}` per source frame.
    pub poses: Vec<RigidTransform>,
    pub source_lights: Vec<LightParams>,
    pub intrinsics: Intrinsics,
    pub beta: DepthScale,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn draw(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec3 = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = libm::sqrt(v.iter().map(|a| a * a).sum());
        if len > 1e-9 {
            return v.map(|a| a / len);
        }
    }
}

fn direction2(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let a = rng.random_range(0.0..core::f64::consts::TAU);
    [libm::cos(a), libm::sin(a)]
}

fn waves(rng: &mut ChaCha8Rng, n: usize, freq: Range) -> Vec<Wave> {
    (0..n)
        .map(|_| Wave {
            dir: direction2(rng),
            freq: draw(rng, freq),
            phase: rng.random_range(0.0..core::f64::consts::TAU),
            weight: 1.0 / n as f64,
        })
        .collect()
}

/// Draws a scene from `spec`; deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let a = draw(&mut rng, spec.curvature);
    let near = |rng: &mut ChaCha8Rng| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    let surface = match spec.geometry {
        GeometryKind::Bowl => Surface::Bowl { a, center: near(&mut rng) },
        GeometryKind::Tube => Surface::Tube { a, center: near(&mut rng), dir: direction2(&mut rng) },
        GeometryKind::Bumps => Surface::Bumps { a, waves: waves(&mut rng, 4, [2.0, 5.0]) },
    };
    let two_pi = core::f64::consts::TAU;
    let texture = match spec.texture {
        TextureKind::Checker => Texture::Checker {
            period: rng.random_range(10.0..16.0),
            phase: [rng.random_range(0.0..16.0), rng.random_range(0.0..16.0)],
            sharpness: 3.0,
        },
        TextureKind::SmoothNoise => Texture::SmoothNoise { waves: waves(&mut rng, 6, [two_pi / 24.0, two_pi / 8.0]) },
        TextureKind::Blobs => Texture::Blobs {
            blobs: (0..10)
                .map(|_| Blob {
                    center: [rng.random_range(-4.0..w as f64 + 4.0), rng.random_range(-4.0..h as f64 + 4.0)],
                    sigma: rng.random_range(3.0..8.0),
                    amp: rng.random_range(0.5..1.5),
                })
                .collect(),
        },
    };
    let tint_lo = core::array::from_fn(|_| rng.random_range(0.15..0.35));
    let tint_span = core::array::from_fn(|_| rng.random_range(0.4..0.55));

    let mut model = SceneModel { surface, texture, tint_lo, tint_span, depth_norm: 1.0, height: h, width: w };
    let raw = ImageBuffer::from_fn(h, w, 1, |r, c, _| model.depth_at(c as f64, r as f64))?;
    model.depth_norm = raw.mean();
    let depth = ImageBuffer::from_fn(h, w, 1, |r, c, _| model.depth_at(c as f64, r as f64))?;
    let reflectance = ImageBuffer::from_fn(h, w, 3, |r, c, ch| model.reflectance_at(c as f64, r as f64)[ch])?;

    let light = LightParams::new(
        draw(&mut rng, spec.light_center),
        draw(&mut rng, spec.light_center),
        draw(&mut rng, spec.light_theta),
    )?;
    let fx = spec.focal * w as f64;
    let intrinsics = Intrinsics::new(fx, fx, 0.5 * (w - 1) as f64, 0.5 * (h - 1) as f64)?;
    let mut poses = Vec::with_capacity(spec.sources);
    let mut source_lights = Vec::with_capacity(spec.sources);
    for _ in 0..spec.sources {
        let angle = draw(&mut rng, spec.rotation);
        let dist = draw(&mut rng, spec.translation);
        let tf =
            RigidTransform::new(unit_vector(&mut rng).map(|v| v * angle), unit_vector(&mut rng).map(|v| v * dist))?;
        source_lights.push(shifted_light(&light, &tf, &intrinsics, h, w));
        poses.push(tf);
    }
    Ok(SceneTruth {
        model,
        depth,
        reflectance,
        light,
        poses,
        source_lights,
        intrinsics,
        beta: DepthScale::new(spec.beta)?,
        noise_sigma: spec.noise_sigma,
        seed: spec.seed,
    })
}

/// Moves the light centre by the image-plane shift a unit-depth point
/// undergoes under `tf`'s translation.
fn shifted_light(light: &LightParams, tf: &RigidTransform, k: &Intrinsics, h: usize, w: usize) -> LightParams {
    let (lo, hi) = CENTER_RANGE;
    let margin = 1e-3;
    LightParams {
        x0: (light.x0 + k.fx * tf.trans[0] / (w - 1) as f64).clamp(lo + margin, hi - margin),
        y0: (light.y0 + k.fy * tf.trans[1] / (h - 1) as f64).clamp(lo + margin, hi - margin),
        theta: light.theta,
    }
}

/// Rendered frames of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Views {
    pub target: ImageBuffer,
    pub sources: Vec<ImageBuffer>,
    /// Target pixels seen by at least one source frame.
    pub mask: Vec<bool>,
}

/// Target point seen by source pixel `q`, and its depth in the source frame.
fn invert_correspondence(truth: &SceneTruth, tf: &RigidTransform, q: SampleCoord) -> Option<(f64, f64, f64)> {
    let k = &truth.intrinsics;
    let forward = |x: f64, y: f64| -> Option<(SampleCoord, f64)> {
        let p = tf.apply(k.backproject(SampleCoord::new(x, y), truth.model.depth_at(x, y)));
        (p[2] > Z_MIN).then(|| (k.project(p), p[2]))
    };
    let (mut x, mut y) = (q.x, q.y);
    let eps = 1e-5;
    for _ in 0..30 {
        let (s, z) = forward(x, y)?;
        let (rx, ry) = (s.x - q.x, s.y - q.y);
        if rx.abs() < 1e-10 && ry.abs() < 1e-10 {
            return Some((x, y, z));
        }
        let (sx1, _) = forward(x + eps, y)?;
        let (sx0, _) = forward(x - eps, y)?;
        let (sy1, _) = forward(x, y + eps)?;
        let (sy0, _) = forward(x, y - eps)?;
        let j = [
            [(sx1.x - sx0.x) / (2.0 * eps), (sy1.x - sy0.x) / (2.0 * eps)],
            [(sx1.y - sx0.y) / (2.0 * eps), (sy1.y - sy0.y) / (2.0 * eps)],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-12 {
            return None;
        }
        x -= (j[1][1] * rx - j[0][1] * ry) / det;
        y -= (-j[1][0] * rx + j[0][0] * ry) / det;
    }
    let (s, z) = forward(x, y)?;
    ((s.x - q.x).abs() < 1e-6 && (s.y - q.y).abs() < 1e-6).then_some((x, y, z))
}

/// Renders the target and source frames with additive Gaussian noise,
/// clipped to `[0, 1]`.
pub fn render_views(truth: &SceneTruth, noise_sigma: f64) -> Result<Views> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be finite and non-negative"));
    }
    let (h, w) = (truth.depth.height(), truth.depth.width());
    let lt = illumination_map(&truth.light, h, w)?;
    let mut target = ird_render(&truth.reflectance, &lt, &truth.depth, truth.beta)?;
    let beta = truth.beta.beta();

    let mut sources = Vec::with_capacity(truth.poses.len());
    let mut mask = vec![false; h * w];
    for (tf, light) in truth.poses.iter().zip(&truth.source_lights) {
        let ls = illumination_map(light, h, w)?;
        let mut data = vec![0.0; h * w * 3];
        for r in 0..h {
            for c in 0..w {
                if let Some((x, y, z)) = invert_correspondence(truth, tf, SampleCoord::new(c as f64, r as f64)) {
                    let refl = truth.model.reflectance_at(x, y);
                    let shade = ls.at(r, c, 0) * libm::exp(-beta * z);
                    for ch in 0..3 {
                        data[(r * w + c) * 3 + ch] = refl[ch] * shade;
                    }
                }
            }
        }
        sources.push(ImageBuffer::new(h, w, 3, data)?);
        let field = project_correspondence(&truth.intrinsics, tf, &truth.depth)?;
        for (m, v) in mask.iter_mut().zip(&field.valid) {
            *m |= *v;
        }
    }

    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(truth.seed ^ 0x6E6F_6973_6521);
        let normal = Normal::new(0.0, noise_sigma).map_err(|_| Error::invalid("noise sigma"))?;
        let mut noisy = |img: &ImageBuffer| {
            let data = img.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            ImageBuffer::new(img.height(), img.width(), img.channels(), data)
        };
        target = noisy(&target)?;
        for s in &mut sources {
            *s = noisy(s)?;
        }
    }
    let clip = |img: &ImageBuffer| img.map(|v| v.clamp(0.0, 1.0));
    target = clip(&target)?;
    for s in &mut sources {
        *s = clip(s)?;
    }
    Ok(Views { target, sources, mask })
}
