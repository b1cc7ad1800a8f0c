//! Training losses as graph builders.
//!
//! Every function here appends nodes to a [`Graph`] and returns the node of
//! its scalar (or per-pixel) result, so gradients reach whatever leaves the
//! caller wired in. Which parameters each loss may update is decided by the
//! caller through detached inputs; [`assemble`] then sums everything into a
//! single node whose gradient, per parameter group, equals the gradient of
//! that group's routed total.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId, Tensor};
use crate::imaging::{spatial_gradient, ImageBuffer};
use crate::{Error, Result};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Floor on the low percentile in the intensity-ratio loss.
pub const RATIO_EPS: f64 = 1e-4;
/// Fill value for invalid pixels before the per-pixel minimum over sources.
const INVALID_ERROR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// SSIM share of the SSIM/L1 mixture.
    pub gamma: f64,
    pub edge_weight: f64,
    pub pe_i: f64,
    pub pe_r: f64,
    pub dg: f64,
    pub rec: f64,
    pub ratio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 0.85, edge_weight: 1e-3, pe_i: 1.0, pe_r: 1.0, dg: 1.0, rec: 1.0, ratio: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma must lie in [0, 1]"));
        }
        let scales = [self.edge_weight, self.pe_i, self.pe_r, self.dg, self.rec, self.ratio];
        if scales.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-pixel SSIM over 3x3 box windows, one value per channel.
pub fn ssim_node(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::invalid("SSIM inputs differ in shape"));
    }
    let mu_a = g.box_mean(a, 1);
    let mu_b = g.box_mean(b, 1);
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.box_mean(aa, 1);
    let e_bb = g.box_mean(bb, 1);
    let e_ab = g.box_mean(ab, 1);
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let lum_num = g.scale(mu_ab, 2.0);
    let lum_num = g.offset(lum_num, SSIM_C1);
    let cs_num = g.scale(cov, 2.0);
    let cs_num = g.offset(cs_num, SSIM_C2);
    let lum_den = g.add(mu_aa, mu_bb)?;
    let lum_den = g.offset(lum_den, SSIM_C1);
    let cs_den = g.add(var_a, var_b)?;
    let cs_den = g.offset(cs_den, SSIM_C2);
    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    g.div(num, den)
}

/// Plain-value SSIM map.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<ImageBuffer> {
    if !a.same_grid(b) || a.channels() != b.channels() {
        return Err(Error::invalid("SSIM inputs differ in shape"));
    }
    let mut g = Graph::new();
    let (na, nb) = (g.constant(a), g.constant(b));
    let s = ssim_node(&mut g, na, nb)?;
    g.value(s).to_image()
}

/// Per-pixel photometric error `gamma * (1 - SSIM) / 2 + (1 - gamma) * |a - b|`,
/// averaged over channels (`[h, w, 1]`).
pub fn photometric_map(g: &mut Graph, a: NodeId, b: NodeId, gamma: f64) -> Result<NodeId> {
    let s = ssim_node(g, a, b)?;
    let dissim = g.scale(s, -0.5 * gamma);
    let dissim = g.offset(dissim, 0.5 * gamma);
    let diff = g.sub(a, b)?;
    let l1 = g.abs(diff);
    let l1 = g.scale(l1, 1.0 - gamma);
    let mix = g.add(dissim, l1)?;
    Ok(g.channel_mean(mix))
}

/// Plain-value photometric error map.
pub fn photometric_map_values(a: &ImageBuffer, b: &ImageBuffer, gamma: f64) -> Result<ImageBuffer> {
    let mut g = Graph::new();
    let (na, nb) = (g.constant(a), g.constant(b));
    let m = photometric_map(&mut g, na, nb, gamma)?;
    g.value(m).to_image()
}

/// Photometric loss: mean of the error map over valid pixels.
pub fn photometric(g: &mut Graph, a: NodeId, b: NodeId, mask: &[bool], w: &LossWeights) -> Result<NodeId> {
    let map = photometric_map(g, a, b, w.gamma)?;
    g.masked_mean(map, mask)
}

/// One synthesized view: its per-pixel error map and validity mask.
#[derive(Debug, Clone)]
pub struct ViewError {
    pub map: NodeId,
    pub valid: Vec<bool>,
}

/// Reduces per-source error maps to one loss.
///
/// With `min_reprojection` the per-pixel minimum over valid sources is
/// averaged over pixels valid in at least one source; otherwise each source
/// contributes its own masked mean and the results are averaged. `keep`, if
/// given, further restricts the pixels (auto-masking).
pub fn combine_views(
    g: &mut Graph,
    views: &[ViewError],
    min_reprojection: bool,
    keep: Option<&[bool]>,
) -> Result<NodeId> {
    if views.is_empty() {
        return Err(Error::invalid("no source views"));
    }
    let n = views[0].valid.len();
    let keep_at = |i: usize| keep.is_none_or(|k| k[i]);
    if min_reprojection {
        let mut acc: Option<NodeId> = None;
        let mut any_valid = alloc::vec![false; n];
        for v in views {
            let filled = g.fill(v.map, &v.valid, INVALID_ERROR)?;
            for (a, &b) in any_valid.iter_mut().zip(&v.valid) {
                *a |= b;
            }
            acc = Some(match acc {
                None => filled,
                Some(prev) => g.minimum(prev, filled)?,
            });
        }
        let mask: Vec<bool> = (0..n).map(|i| any_valid[i] && keep_at(i)).collect();
        g.masked_mean(acc.expect("non-empty views"), &mask)
    } else {
        let mut terms = Vec::with_capacity(views.len());
        for v in views {
            let mask: Vec<bool> = (0..n).map(|i| v.valid[i] && keep_at(i)).collect();
            terms.push(g.masked_mean(v.map, &mask)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok(g.scale(total, 1.0 / terms.len() as f64))
    }
}

/// Auto-mask: keeps pixels whose best warped error does not exceed the best
/// error of the unwarped source frames. Ties are kept, so an identity warp
/// keeps every pixel.
pub fn auto_mask(warped_errors: &[ImageBuffer], identity_errors: &[ImageBuffer]) -> Vec<bool> {
    let best = |maps: &[ImageBuffer], i: usize| maps.iter().map(|m| m.data()[i]).fold(f64::INFINITY, f64::min);
    let n = warped_errors.first().map_or(0, ImageBuffer::pixel_count);
    (0..n).map(|i| best(warped_errors, i) <= best(identity_errors, i)).collect()
}

/// Edge-aware smoothness of the mean-normalized depth, weighted by
/// `exp(-|grad I|)` of the channel-mean image.
pub fn edge_smoothness(g: &mut Graph, depth: NodeId, image: &ImageBuffer) -> Result<NodeId> {
    let [h, w, c] = g.value(depth).shape();
    if c != 1 || h != image.height() || w != image.width() {
        return Err(Error::invalid("edge smoothness needs single-channel depth on the image grid"));
    }
    let mean = g.mean(depth);
    if g.value(mean).item() == 0.0 {
        return Err(Error::degenerate("depth has zero mean"));
    }
    let (ix, iy) = spatial_gradient(image)?;
    let wx = g.constant(ix.map(|v| libm::exp(-v.abs()))?);
    let wy = g.constant(iy.map(|v| libm::exp(-v.abs()))?);
    let d = g.div(depth, mean)?;
    let dx = g.diff_x(d)?;
    let dy = g.diff_y(d)?;
    let ax = g.abs(dx);
    let ay = g.abs(dy);
    let tx = g.mul(ax, wx)?;
    let ty = g.mul(ay, wy)?;
    let t = g.add(tx, ty)?;
    Ok(g.mean(t))
}

/// SSIM/L1 mixture between a re-rendered frame and the frame, over all
/// pixels. Callers feed depth into the render through a detached edge.
pub fn reconstruction(g: &mut Graph, rendered: NodeId, image: NodeId, w: &LossWeights) -> Result<NodeId> {
    let [h, wd, _] = g.value(image).shape();
    photometric(g, rendered, image, &alloc::vec![true; h * wd], w)
}

/// `p95 / max(p20, eps)` of a node's samples.
fn high_low_ratio(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let hi = g.percentile(x, 95.0)?;
    let lo = g.percentile(x, 20.0)?;
    let lo = g.clamp_min(lo, RATIO_EPS);
    g.div(hi, lo)
}

/// `| p95(I)/p20(I) - p95(L)/p20(L) |` with `I` reduced to its channel mean.
pub fn intensity_ratio(g: &mut Graph, image: NodeId, illumination: NodeId) -> Result<NodeId> {
    let lum = g.channel_mean(image);
    let ri = high_low_ratio(g, lum)?;
    let rl = high_low_ratio(g, illumination)?;
    let d = g.sub(ri, rl)?;
    Ok(g.abs(d))
}

/// Mean absolute difference between the depth predicted from a frame and
/// from its degraded copy. `one_sided` treats the clean prediction as a
/// fixed target.
pub fn degradation_consistency(g: &mut Graph, clean: NodeId, degraded: NodeId, one_sided: bool) -> Result<NodeId> {
    if g.value(clean).shape() != g.value(degraded).shape() {
        return Err(Error::invalid("depth maps differ in shape"));
    }
    let clean = if one_sided { g.detach(clean) } else { clean };
    let d = g.sub(clean, degraded)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// A constituent loss as handed to [`assemble`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Term {
    /// Not supplied; assembling fails.
    #[default]
    Missing,
    /// Switched off by configuration; contributes zero.
    Disabled,
    Active(NodeId),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub pe_i: Term,
    pub pe_r: Term,
    pub edge: Term,
    pub rec: Term,
    pub ratio: Term,
    pub dg: Term,
}

/// Loss values of one step. Constituents are stored after weighting, so
/// each routed total is exactly the sum of its constituents.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub pe_i: f64,
    pub pe_r: f64,
    pub edge: f64,
    pub rec: f64,
    pub ratio: f64,
    pub dg: f64,
    /// Depth predictor: `pe_i + pe_r + dg + edge`.
    pub phi_d: f64,
    /// Pose: `pe_i + pe_r`.
    pub phi_p: f64,
    /// Reflectance: `rec`.
    pub phi_r: f64,
    /// Illumination: `rec + ratio`.
    pub phi_l: f64,
}

impl LossBundle {
    pub fn from_constituents(pe_i: f64, pe_r: f64, edge: f64, rec: f64, ratio: f64, dg: f64) -> Self {
        Self {
            pe_i,
            pe_r,
            edge,
            rec,
            ratio,
            dg,
            phi_d: pe_i + pe_r + dg + edge,
            phi_p: pe_i + pe_r,
            phi_r: rec,
            phi_l: rec + ratio,
        }
    }

    /// Sum of all constituents; the quantity one backward pass differentiates.
    pub fn total(&self) -> f64 {
        self.pe_i + self.pe_r + self.edge + self.rec + self.ratio + self.dg
    }

    pub fn is_finite(&self) -> bool {
        [self.pe_i, self.pe_r, self.edge, self.rec, self.ratio, self.dg].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Assembled {
    /// Sum of every weighted constituent.
    pub total: NodeId,
    /// Weighted constituents in the order pe_I, pe_R, edge, rec, ratio, dg;
    /// `None` when disabled.
    pub weighted: [Option<NodeId>; 6],
    pub bundle: LossBundle,
}

/// Weights the constituents and sums them into one node.
///
/// The per-group routing lives in the graph itself (detached edges), so the
/// gradient of `total` restricted to a parameter group equals the gradient
/// of that group's routed total.
pub fn assemble(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<Assembled> {
    w.validate()?;
    let entries = [
        (terms.pe_i, w.pe_i, "pe_I"),
        (terms.pe_r, w.pe_r, "pe_R"),
        (terms.edge, w.edge_weight, "edge"),
        (terms.rec, w.rec, "rec"),
        (terms.ratio, w.ratio, "ratio"),
        (terms.dg, w.dg, "dg"),
    ];
    let mut values = [0.0; 6];
    let mut weighted = [None; 6];
    let mut total: Option<NodeId> = None;
    for (k, (term, weight, name)) in entries.into_iter().enumerate() {
        let id = match term {
            Term::Missing => return Err(Error::InvalidInput(alloc::format!("loss constituent {name} missing"))),
            Term::Disabled => continue,
            Term::Active(id) => id,
        };
        if !g.value(id).is_scalar() {
            return Err(Error::InvalidInput(alloc::format!("loss constituent {name} is not scalar")));
        }
        let scaled = g.scale(id, weight);
        values[k] = g.value(scaled).item();
        weighted[k] = Some(scaled);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let [pe_i, pe_r, edge, rec, ratio, dg] = values;
    Ok(Assembled { total, weighted, bundle: LossBundle::from_constituents(pe_i, pe_r, edge, rec, ratio, dg) })
}
