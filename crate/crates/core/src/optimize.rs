//! Joint optimization of depth, pose, reflectance and illumination.
//!
//! Each step builds one graph holding every loss, runs one backward pass
//! from the sum of all weighted constituents, clips the global gradient
//! norm and applies one Adam update per parameter group. Detached edges in
//! the graph make the gradient reaching each group equal to the gradient of
//! that group's routed total (see [`RoutingTable`]).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId, Tensor};
use crate::geometry::Intrinsics;
use crate::imaging::ImageBuffer;
use crate::ird::{degrade_image, DepthScale, DEFAULT_BETA};
use crate::losses::{
    assemble, auto_mask, combine_views, degradation_consistency, edge_smoothness, intensity_ratio, photometric_map,
    photometric_map_values, reconstruction, LossBundle, LossTerms, LossWeights, Term, ViewError,
};
use crate::predictors::{DepthModel, DirectLight, DirectReflectanceField, PoseParams, PredictorKind};
use crate::synth::SceneTruth;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { first_moment: vec![0.0; len], second_moment: vec![0.0; len], step_count: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::invalid("Adam state, parameters and gradients differ in length"));
        }
        if !(lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
        let c2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            let m = ADAM_BETA1 * self.first_moment[i] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= lr * (m / c1) / (libm::sqrt(v / c2) + ADAM_EPSILON);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

/// Step decay: `initial_lr * decay^floor(epoch / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub initial_lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { initial_lr: 1e-4, decay: 0.3, decay_every: 10, epochs: 30, steps_per_epoch: 100 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("learning rate must be positive and decay in (0, 1]"));
        }
        if self.decay_every == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid("decay interval and epoch length must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let epoch = step / self.steps_per_epoch;
        self.initial_lr * libm::pow(self.decay, (epoch / self.decay_every) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Depth,
    Pose,
    Reflectance,
    Light,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Depth, Group::Pose, Group::Reflectance, Group::Light];

    pub fn name(self) -> &'static str {
        match self {
            Group::Depth => "depth",
            Group::Pose => "pose",
            Group::Reflectance => "reflectance",
            Group::Light => "light",
        }
    }
}

/// One named loss term, indexing [`crate::losses::Assembled::weighted`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constituent {
    PeI,
    PeR,
    Edge,
    Rec,
    Ratio,
    Dg,
}

impl Constituent {
    pub const ALL: [Constituent; 6] =
        [Constituent::PeI, Constituent::PeR, Constituent::Edge, Constituent::Rec, Constituent::Ratio, Constituent::Dg];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn value(self, b: &LossBundle) -> f64 {
        [b.pe_i, b.pe_r, b.edge, b.rec, b.ratio, b.dg][self.index()]
    }
}

/// Which loss terms each parameter group is trained by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingTable;

impl RoutingTable {
    pub fn constituents(group: Group) -> &'static [Constituent] {
        use Constituent::*;
        match group {
            Group::Depth => &[PeI, PeR, Dg, Edge],
            Group::Pose => &[PeI, PeR],
            Group::Reflectance => &[Rec],
            Group::Light => &[Rec, Ratio],
        }
    }

    pub fn total(group: Group, b: &LossBundle) -> f64 {
        Self::constituents(group).iter().map(|c| c.value(b)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DgMode {
    /// Both depth predictions are trained towards each other.
    #[default]
    Symmetric,
    /// The clean-image prediction is a fixed target.
    OneSided,
    Off,
}

/// Learning-rate multipliers on top of the schedule, per group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupScales {
    pub depth: f64,
    pub pose: f64,
    pub reflectance: f64,
    pub light: f64,
}

impl GroupScales {
    pub const UNIT: GroupScales = GroupScales { depth: 1.0, pose: 1.0, reflectance: 1.0, light: 1.0 };

    /// Defaults for a predictor kind: pixel fields take far larger steps
    /// than network weights would.
    pub fn for_kind(kind: PredictorKind) -> Self {
        match kind {
            PredictorKind::Direct => GroupScales { depth: 100.0, pose: 10.0, reflectance: 100.0, light: 100.0 },
            PredictorKind::Conv => GroupScales { depth: 10.0, pose: 10.0, reflectance: 100.0, light: 100.0 },
        }
    }

    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Depth => self.depth,
            Group::Pose => self.pose,
            Group::Reflectance => self.reflectance,
            Group::Light => self.light,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub predictor: PredictorKind,
    pub weights: LossWeights,
    pub schedule: Schedule,
    /// `None` selects [`GroupScales::for_kind`].
    pub lr_scales: Option<GroupScales>,
    pub min_reprojection: bool,
    pub auto_mask: bool,
    pub edge_smoothness: bool,
    pub dg_mode: DgMode,
    /// Every frame is lit by the target light; source light fields stay idle.
    pub shared_light: bool,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorKind::Direct,
            weights: LossWeights::default(),
            schedule: Schedule::default(),
            lr_scales: None,
            min_reprojection: true,
            auto_mask: true,
            edge_smoothness: true,
            dg_mode: DgMode::Symmetric,
            shared_light: false,
            clip_norm: 10.0,
            beta: DEFAULT_BETA,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.schedule.validate()?;
        DepthScale::new(self.beta)?;
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::invalid("clip norm must be finite and non-negative"));
        }
        let scales = self.scales();
        if Group::ALL.iter().any(|&g| !(scales.get(g) > 0.0 && scales.get(g).is_finite())) {
            return Err(Error::invalid("learning-rate multipliers must be positive"));
        }
        Ok(())
    }

    pub fn scales(&self) -> GroupScales {
        self.lr_scales.unwrap_or_else(|| GroupScales::for_kind(self.predictor))
    }

    /// Whether the degradation consistency term exists for this predictor.
    pub fn dg_active(&self) -> bool {
        self.predictor == PredictorKind::Conv && self.dg_mode != DgMode::Off && self.weights.dg > 0.0
    }
}

/// Observed frames of one sequence: the target and its source frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub target: ImageBuffer,
    pub sources: Vec<ImageBuffer>,
    pub intrinsics: Intrinsics,
}

impl Frames {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.sources.is_empty() {
            return Err(Error::invalid("need at least one source frame"));
        }
        if self.target.channels() != 3 {
            return Err(Error::invalid("frames must be 3-channel"));
        }
        if self.sources.iter().any(|s| !s.same_grid(&self.target) || s.channels() != 3) {
            return Err(Error::invalid("source frames must match the target grid"));
        }
        Ok(())
    }

    /// Target first, then sources.
    pub fn all(&self) -> impl Iterator<Item = &ImageBuffer> {
        core::iter::once(&self.target).chain(&self.sources)
    }
}

/// Every optimized quantity. Reflectance and light have one entry per
/// frame (target first); poses one per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub depth: DepthModel,
    pub reflectance: Vec<DirectReflectanceField>,
    pub light: Vec<DirectLight>,
    pub poses: Vec<PoseParams>,
}

impl Parameters {
    /// Neutral start: unit depth (or a seeded network), `R = 0.5`, centred
    /// light with `theta = 1`, identity poses.
    pub fn init(kind: PredictorKind, frames: &Frames, seed: u64) -> Result<Self> {
        let (h, w) = (frames.target.height(), frames.target.width());
        let n = frames.sources.len() + 1;
        Ok(Self {
            depth: DepthModel::init(kind, h, w, seed)?,
            reflectance: (0..n).map(|_| DirectReflectanceField::new(h, w)).collect::<Result<_>>()?,
            light: vec![DirectLight::default(); n],
            poses: vec![PoseParams::default(); n - 1],
        })
    }

    /// Direct fields at the planted truth of `truth`. Source-frame
    /// reflectance is the target reflectance, the closest grid analogue.
    pub fn from_truth(truth: &SceneTruth) -> Result<Self> {
        let logits = truth.reflectance.map(crate::ird::logit)?;
        let refl = DirectReflectanceField { r: logits.into() };
        Ok(Self {
            depth: DepthModel::Direct(crate::predictors::DirectDepthField::from_depth(&truth.depth)?),
            reflectance: vec![refl; truth.poses.len() + 1],
            light: core::iter::once(&truth.light).chain(&truth.source_lights).map(DirectLight::from_params).collect(),
            poses: truth.poses.iter().map(PoseParams::from_transform).collect(),
        })
    }

    fn check_frames(&self, frames: &Frames) -> Result<()> {
        let n = frames.sources.len();
        if self.reflectance.len() != n + 1 || self.light.len() != n + 1 || self.poses.len() != n {
            return Err(Error::invalid("parameter set does not match the frame count"));
        }
        let (h, w) = (frames.target.height(), frames.target.width());
        if self.reflectance.iter().any(|r| r.r.shape() != [h, w, 3]) {
            return Err(Error::invalid("reflectance fields do not match the frame grid"));
        }
        if let DepthModel::Direct(f) = &self.depth {
            if f.z.shape() != [h, w, 1] {
                return Err(Error::invalid("depth field does not match the frame grid"));
            }
        }
        Ok(())
    }

    /// Parameter blocks in the canonical order used by [`StepGraph::leaves`].
    pub fn blocks_mut(&mut self) -> Vec<(Group, &mut [f64])> {
        let mut out: Vec<(Group, &mut [f64])> = Vec::new();
        for t in self.depth.tensors_mut() {
            out.push((Group::Depth, t.data_mut()));
        }
        for p in &mut self.poses {
            out.push((Group::Pose, &mut p.raw[..]));
        }
        for r in &mut self.reflectance {
            out.push((Group::Reflectance, r.r.data_mut()));
        }
        for l in &mut self.light {
            out.push((Group::Light, &mut l.raw[..]));
        }
        out
    }

    /// All parameters flattened in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut c = self.clone();
        c.blocks_mut().into_iter().flat_map(|(_, b)| b.to_vec()).collect()
    }
}

/// Plain values of the target-frame decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub depth: ImageBuffer,
    pub reflectance: ImageBuffer,
    pub illumination: ImageBuffer,
    /// `R * L * exp(-beta * D)`.
    pub rendered: ImageBuffer,
}

/// The graph of one optimization step.
#[derive(Debug)]
pub struct StepGraph {
    pub graph: Graph,
    pub total: NodeId,
    /// Weighted constituents, indexed by [`Constituent::index`].
    pub weighted: [Option<NodeId>; 6],
    pub bundle: LossBundle,
    /// Parameter leaves in the order of [`Parameters::blocks_mut`].
    pub leaves: Vec<(Group, NodeId)>,
    pub depth: NodeId,
    pub reflectance: NodeId,
    pub illumination: NodeId,
    pub rendered: NodeId,
    /// Degraded target fed to the depth predictor, when `dg` is active.
    pub degraded: Option<ImageBuffer>,
    /// Detached clean depth compared against, when `dg` is one-sided.
    pub clean_depth: Option<ImageBuffer>,
}

impl StepGraph {
    /// Per-leaf gradients of `root`, zeros where no gradient arrives.
    pub fn leaf_gradients(&self, root: NodeId) -> Result<Vec<Vec<f64>>> {
        let grads = self.graph.backward(root)?;
        Ok(self.leaves.iter().map(|&(_, id)| grads.get_or_zeros(id, self.graph.value(id).len())).collect())
    }

    /// Per-leaf gradients of the sum of the given constituents, from a
    /// separate backward pass. Disabled constituents contribute nothing.
    pub fn constituent_gradients(&mut self, parts: &[Constituent]) -> Result<Vec<Vec<f64>>> {
        let ids: Vec<NodeId> = parts.iter().filter_map(|c| self.weighted[c.index()]).collect();
        let root = match ids.split_first() {
            None => self.graph.constant(Tensor::scalar(0.0)),
            Some((&first, rest)) => {
                let mut acc = first;
                for &id in rest {
                    acc = self.graph.add(acc, id)?;
                }
                acc
            }
        };
        self.leaf_gradients(root)
    }

    pub fn decomposition(&self) -> Result<Decomposition> {
        Ok(Decomposition {
            depth: self.graph.value(self.depth).to_image()?,
            reflectance: self.graph.value(self.reflectance).to_image()?,
            illumination: self.graph.value(self.illumination).to_image()?,
            rendered: self.graph.value(self.rendered).to_image()?,
        })
    }
}

/// `R * L * exp(-beta * D)` on graph nodes.
fn render_node(g: &mut Graph, r: NodeId, l: NodeId, d: NodeId, beta: f64) -> Result<NodeId> {
    let att = g.scale(d, -beta);
    let att = g.exp(att);
    let rl = g.mul(r, l)?;
    g.mul(rl, att)
}

fn mean_of(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(g.scale(acc, 1.0 / nodes.len() as f64))
}

/// Builds every loss of one step for the current parameters.
///
/// A failure after a non-finite value entered the graph is reported as
/// [`Error::NonFinite`] naming the first such node.
pub fn build_step(frames: &Frames, params: &Parameters, cfg: &FitConfig) -> Result<StepGraph> {
    build_step_with(frames, params, cfg, StepInputs::default())
}

/// Starting state of a step graph.
#[derive(Debug, Default)]
pub struct StepInputs {
    pub graph: Graph,
    /// Replaces the degraded target, which is otherwise derived from the
    /// current depth and illumination values.
    pub degraded: Option<ImageBuffer>,
    /// Replaces the detached clean depth of one-sided `dg`.
    pub clean_depth: Option<ImageBuffer>,
}

/// [`build_step`] on a caller-supplied graph, optionally with pinned
/// detached inputs (finite-difference audits hold them fixed).
pub fn build_step_with(frames: &Frames, params: &Parameters, cfg: &FitConfig, inputs: StepInputs) -> Result<StepGraph> {
    frames.validate()?;
    params.check_frames(frames)?;
    let StepInputs { graph: mut g, degraded, clean_depth } = inputs;
    match build_into(&mut g, frames, params, cfg, degraded, clean_depth) {
        Ok(parts) => Ok(parts.finish(g)),
        Err(e) => Err(g.check_finite().err().unwrap_or(e)),
    }
}

struct StepParts {
    total: NodeId,
    weighted: [Option<NodeId>; 6],
    bundle: LossBundle,
    leaves: Vec<(Group, NodeId)>,
    depth: NodeId,
    reflectance: NodeId,
    illumination: NodeId,
    rendered: NodeId,
    degraded: Option<ImageBuffer>,
    clean_depth: Option<ImageBuffer>,
}

impl StepParts {
    fn finish(self, graph: Graph) -> StepGraph {
        StepGraph {
            graph,
            total: self.total,
            weighted: self.weighted,
            bundle: self.bundle,
            leaves: self.leaves,
            depth: self.depth,
            reflectance: self.reflectance,
            illumination: self.illumination,
            rendered: self.rendered,
            degraded: self.degraded,
            clean_depth: self.clean_depth,
        }
    }
}

fn build_into(
    g: &mut Graph,
    frames: &Frames,
    params: &Parameters,
    cfg: &FitConfig,
    pinned: Option<ImageBuffer>,
    pinned_clean: Option<ImageBuffer>,
) -> Result<StepParts> {
    let (h, w) = (frames.target.height(), frames.target.width());
    let beta = cfg.beta;
    let wts = &cfg.weights;

    let images: Vec<NodeId> = frames.all().map(|f| g.constant(f)).collect();
    let it = images[0];

    let mut leaves = Vec::new();
    let depth_leaves = params.depth.register(g);
    leaves.extend(depth_leaves.iter().map(|&id| (Group::Depth, id)));
    let depth = params.depth.build(g, &depth_leaves, it)?;
    let pose_leaves: Vec<NodeId> = params.poses.iter().map(|p| g.leaf(Tensor::vector(p.raw.to_vec()))).collect();
    leaves.extend(pose_leaves.iter().map(|&id| (Group::Pose, id)));
    let mut refl = Vec::new();
    for r in &params.reflectance {
        let (leaf, node) = r.build(g);
        leaves.push((Group::Reflectance, leaf));
        refl.push(node);
    }
    let mut illum = Vec::new();
    for l in &params.light {
        let (leaf, node) = l.build(g, h, w)?;
        leaves.push((Group::Light, leaf));
        illum.push(node);
    }

    // View synthesis: image warp for pe_I, reflectance warp for pe_R.
    let rt_fixed = g.detach(refl[0]);
    let mut image_views = Vec::new();
    let mut refl_views = Vec::new();
    for (s, &pose) in pose_leaves.iter().enumerate() {
        let (coords, valid) = g.correspondence(depth, pose, frames.intrinsics)?;
        let (warped, inside) = g.bilinear_sample(images[s + 1], coords)?;
        let valid: Vec<bool> = valid.iter().zip(&inside).map(|(a, b)| *a && *b).collect();
        let map = photometric_map(g, warped, it, wts.gamma)?;
        image_views.push(ViewError { map, valid: valid.clone() });
        if wts.pe_r > 0.0 {
            let rs_fixed = g.detach(refl[s + 1]);
            let (rwarp, _) = g.bilinear_sample(rs_fixed, coords)?;
            let rmap = photometric_map(g, rwarp, rt_fixed, wts.gamma)?;
            refl_views.push(ViewError { map: rmap, valid });
        }
    }
    let keep = if cfg.auto_mask {
        let warped_err: Vec<ImageBuffer> =
            image_views.iter().map(|v| g.value(v.map).to_image()).collect::<Result<_>>()?;
        let identity_err: Vec<ImageBuffer> = frames
            .sources
            .iter()
            .map(|s| photometric_map_values(s, &frames.target, wts.gamma))
            .collect::<Result<_>>()?;
        Some(auto_mask(&warped_err, &identity_err))
    } else {
        None
    };
    let mut terms =
        LossTerms { pe_i: Term::Disabled, pe_r: Term::Disabled, edge: Term::Disabled, ..Default::default() };
    if wts.pe_i > 0.0 {
        terms.pe_i = Term::Active(combine_views(g, &image_views, cfg.min_reprojection, keep.as_deref())?);
    }
    if wts.pe_r > 0.0 {
        terms.pe_r = Term::Active(combine_views(g, &refl_views, cfg.min_reprojection, keep.as_deref())?);
    }
    if cfg.edge_smoothness && wts.edge_weight > 0.0 {
        terms.edge = Term::Active(edge_smoothness(g, depth, &frames.target)?);
    }

    // Decomposition of every frame with detached depth.
    let depth_fixed = g.detach(depth);
    let mut rec_terms = Vec::new();
    let mut ratio_terms = Vec::new();
    let mut rendered_target = None;
    for (f, &image) in images.iter().enumerate() {
        let d = match (&params.depth, f) {
            (_, 0) | (DepthModel::Direct(_), _) => depth_fixed,
            (DepthModel::Conv(_), _) => {
                let ds = params.depth.build(g, &depth_leaves, image)?;
                g.detach(ds)
            }
        };
        let light = if cfg.shared_light { illum[0] } else { illum[f] };
        let rendered = render_node(g, refl[f], light, d, beta)?;
        if f == 0 {
            rendered_target = Some(rendered);
        }
        if wts.rec > 0.0 {
            rec_terms.push(reconstruction(g, rendered, image, wts)?);
        }
        if wts.ratio > 0.0 {
            ratio_terms.push(intensity_ratio(g, image, light)?);
        }
    }
    terms.rec = if rec_terms.is_empty() { Term::Disabled } else { Term::Active(mean_of(g, &rec_terms)?) };
    terms.ratio = if ratio_terms.is_empty() { Term::Disabled } else { Term::Active(mean_of(g, &ratio_terms)?) };

    let mut degraded = None;
    let mut clean_depth = None;
    terms.dg = if cfg.dg_active() {
        let image = match pinned {
            Some(img) if img.same_grid(&frames.target) && img.channels() == 3 => img,
            Some(_) => return Err(Error::invalid("pinned degraded image does not match the target")),
            None => {
                let l_t = g.value(illum[0]).to_image()?;
                let d_t = g.value(depth).to_image()?;
                degrade_image(&frames.target, &l_t, &d_t, DepthScale::new(beta)?)?
            }
        };
        let node = g.constant(image.clone());
        degraded = Some(image);
        let d_dg = params.depth.build(g, &depth_leaves, node)?;
        let one_sided = cfg.dg_mode == DgMode::OneSided;
        let clean = match pinned_clean {
            Some(img) if one_sided && img.same_grid(&frames.target) && img.channels() == 1 => g.constant(img),
            Some(_) => return Err(Error::invalid("pinned clean depth needs one-sided dg on the target grid")),
            None => depth,
        };
        if one_sided {
            clean_depth = Some(g.value(clean).to_image()?);
        }
        Term::Active(degradation_consistency(g, clean, d_dg, one_sided)?)
    } else {
        Term::Disabled
    };

    let assembled = assemble(g, &terms, wts)?;
    Ok(StepParts {
        total: assembled.total,
        weighted: assembled.weighted,
        bundle: assembled.bundle,
        leaves,
        depth,
        reflectance: refl[0],
        illumination: illum[0],
        rendered: rendered_target.expect("target frame rendered"),
        degraded,
        clean_depth,
    })
}

/// Plain values of the target decomposition under `params`.
pub fn decompose(frames: &Frames, params: &Parameters, cfg: &FitConfig) -> Result<Decomposition> {
    build_step(frames, params, cfg)?.decomposition()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBundle,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,lr,pe_I,pe_R,edge,rec,ratio,dg,phi_D,phi_P,phi_R,phi_L,total,grad_norm";

    pub fn csv(&self) -> String {
        let b = &self.losses;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.lr,
            b.pe_i,
            b.pe_r,
            b.edge,
            b.rec,
            b.ratio,
            b.dg,
            b.phi_d,
            b.phi_p,
            b.phi_r,
            b.phi_l,
            b.total(),
            self.grad_norm
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Parameters,
    pub trace: Vec<TraceRow>,
}

/// Runs `steps` optimization steps (the full schedule if `None`), calling
/// `observe` after each.
pub fn joint_optimize_with(
    frames: &Frames,
    mut params: Parameters,
    cfg: &FitConfig,
    steps: Option<usize>,
    observe: &mut dyn FnMut(&TraceRow),
) -> Result<FitResult> {
    cfg.validate()?;
    let steps = steps.unwrap_or_else(|| cfg.schedule.total_steps());
    let scales = cfg.scales();
    let mut states: Vec<AdamState> = params.blocks_mut().iter().map(|(_, b)| AdamState::new(b.len())).collect();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let lr = cfg.schedule.lr_at(step);
        let sg = build_step(frames, &params, cfg)?;
        sg.graph.check_finite()?;
        let mut grads = sg.leaf_gradients(sg.total)?;
        let sq: f64 = grads.iter().flatten().map(|g| g * g).sum();
        let norm = libm::sqrt(sq);
        if !norm.is_finite() {
            return Err(Error::NonFinite { node: sg.total.index(), op: "backward" });
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            let k = cfg.clip_norm / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= k);
        }
        for (((group, block), state), grad) in params.blocks_mut().into_iter().zip(&mut states).zip(&grads) {
            state.step(block, grad, lr * scales.get(group))?;
        }
        let row = TraceRow { step, lr, losses: sg.bundle, grad_norm: norm };
        observe(&row);
        trace.push(row);
    }
    Ok(FitResult { params, trace })
}

pub fn joint_optimize(frames: &Frames, params: Parameters, cfg: &FitConfig) -> Result<FitResult> {
    joint_optimize_with(frames, params, cfg, None, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, render_views, SceneSpec};

    fn scene(size: usize, seed: u64) -> (SceneTruth, Frames) {
        let truth = generate_scene(&SceneSpec { height: size, width: size, seed, ..Default::default() }).unwrap();
        let v = render_views(&truth, 0.0).unwrap();
        let frames = Frames { target: v.target, sources: v.sources, intrinsics: truth.intrinsics };
        (truth, frames)
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let mut s = AdamState { first_moment: vec![0.5, -0.2], second_moment: vec![0.3, 0.1], step_count: 3 };
        let mut p = vec![1.0, 2.0];
        s.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert!((s.first_moment[0] - 0.45).abs() < 1e-15);
        assert!((s.second_moment[1] - 0.099).abs() < 1e-15);
        assert!(p[0] < 1.0 && p[1] > 2.0, "residual momentum still moves: {p:?}");
        let mut fresh = AdamState::new(2);
        let mut q = vec![1.0, 2.0];
        fresh.step(&mut q, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(3);
        let mut p = vec![0.0; 3];
        s.step(&mut p, &[3.0, -0.01, 250.0], 1e-3).unwrap();
        for (v, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 1e-3).abs() < 1e-9);
        }
        assert!(s.step(&mut p, &[1.0], 1e-3).is_err());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut s = AdamState::new(1);
        let mut x = vec![0.0];
        for _ in 0..100 {
            let grad = 2.0 * (x[0] - 0.5);
            s.step(&mut x, &[grad], 0.1).unwrap();
        }
        assert!((x[0] - 0.5).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn schedule_decays_every_ten_epochs() {
        let s = Schedule::default();
        assert_eq!(s.total_steps(), 3000);
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(999), 1e-4);
        assert!((s.lr_at(1000) - 3e-5).abs() < 1e-18);
        assert!((s.lr_at(2999) - 9e-6).abs() < 1e-18);
    }

    #[test]
    fn routing_table_matches_bundle_totals() {
        let b = LossBundle::from_constituents(0.1, 0.2, 0.3, 0.4, 0.5, 0.6);
        assert_eq!(RoutingTable::total(Group::Depth, &b), b.phi_d);
        assert_eq!(RoutingTable::total(Group::Pose, &b), b.phi_p);
        assert_eq!(RoutingTable::total(Group::Reflectance, &b), b.phi_r);
        assert_eq!(RoutingTable::total(Group::Light, &b), b.phi_l);
    }

    fn assert_routed(frames: &Frames, params: &Parameters, cfg: &FitConfig) {
        let mut sg = build_step(frames, params, cfg).unwrap();
        let joint = sg.leaf_gradients(sg.total).unwrap();
        for group in Group::ALL {
            let separate = sg.constituent_gradients(RoutingTable::constituents(group)).unwrap();
            for (k, &(g, _)) in sg.leaves.iter().enumerate() {
                if g != group {
                    continue;
                }
                for (a, b) in joint[k].iter().zip(&separate[k]) {
                    assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0), "{group:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn single_backward_matches_routed_totals() {
        let (_, frames) = scene(12, 1);
        let direct = FitConfig::default();
        let mut params = Parameters::init(PredictorKind::Direct, &frames, 0).unwrap();
        params.poses[0].raw = [0.01, -0.02, 0.0, 0.03, 0.0, -0.01];
        assert_routed(&frames, &params, &direct);
        let conv = FitConfig { predictor: PredictorKind::Conv, ..Default::default() };
        let params = Parameters::init(PredictorKind::Conv, &frames, 3).unwrap();
        assert_routed(&frames, &params, &conv);
    }

    #[test]
    fn dropping_reconstruction_leaves_depth_gradient_bitwise_unchanged() {
        let (_, frames) = scene(12, 2);
        let params = Parameters::init(PredictorKind::Conv, &frames, 5).unwrap();
        let full = FitConfig { predictor: PredictorKind::Conv, ..Default::default() };
        let no_rec = FitConfig { weights: LossWeights { rec: 0.0, ..full.weights }, ..full.clone() };
        let depth_grads = |cfg: &FitConfig| {
            let sg = build_step(&frames, &params, cfg).unwrap();
            let grads = sg.leaf_gradients(sg.total).unwrap();
            sg.leaves.iter().zip(grads).filter(|((g, _), _)| *g == Group::Depth).map(|(_, v)| v).collect::<Vec<_>>()
        };
        assert_eq!(depth_grads(&full), depth_grads(&no_rec));
    }

    #[test]
    fn direct_fields_skip_degradation_consistency() {
        let (_, frames) = scene(8, 3);
        let params = Parameters::init(PredictorKind::Direct, &frames, 0).unwrap();
        let sg = build_step(&frames, &params, &FitConfig::default()).unwrap();
        assert!(sg.weighted[Constituent::Dg.index()].is_none());
        assert_eq!(sg.bundle.dg, 0.0);
        assert!(sg.bundle.is_finite());
    }

    #[test]
    fn exported_render_matches_ird_render() {
        let (_, frames) = scene(10, 4);
        let params = Parameters::init(PredictorKind::Conv, &frames, 1).unwrap();
        let cfg = FitConfig { predictor: PredictorKind::Conv, ..Default::default() };
        let d = decompose(&frames, &params, &cfg).unwrap();
        let re = crate::ird::ird_render(&d.reflectance, &d.illumination, &d.depth, DepthScale::new(cfg.beta).unwrap())
            .unwrap();
        for (a, b) in re.data().iter().zip(d.rendered.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn optimization_is_deterministic() {
        let (_, frames) = scene(10, 5);
        let cfg = FitConfig { predictor: PredictorKind::Conv, ..Default::default() };
        let run = || {
            let p = Parameters::init(PredictorKind::Conv, &frames, 2).unwrap();
            joint_optimize_with(&frames, p, &cfg, Some(5), &mut |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace.len(), 5);
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let (truth, frames) = scene(16, 6);
        let params = Parameters::from_truth(&truth).unwrap();
        let cfg = FitConfig { lr_scales: Some(GroupScales::UNIT), ..Default::default() };
        let start = params.flatten();
        let fit = joint_optimize_with(&frames, params, &cfg, Some(10), &mut |_| {}).unwrap();
        let moved = fit.params.flatten().iter().zip(&start).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // Adam moves every parameter with a nonzero gradient by about lr per
        // step, so ten steps at lr = 1e-4 sit right at 1e-3.
        assert!(moved < 1.05e-3, "moved {moved}");
        let first = fit.trace[0].losses;
        assert!(first.pe_i < 2e-3 && first.pe_r < 5e-3 && first.rec < 2e-3 && first.edge < 1e-4, "{first:?}");
        let last = fit.trace[9].losses;
        assert!(last.phi_d <= first.phi_d * 1.05, "{first:?} -> {last:?}");
    }

    #[test]
    fn non_finite_forward_names_the_node() {
        let (_, frames) = scene(8, 7);
        let mut params = Parameters::init(PredictorKind::Direct, &frames, 0).unwrap();
        if let DepthModel::Direct(f) = &mut params.depth {
            f.z.data_mut()[3] = 800.0;
        }
        let err = joint_optimize_with(&frames, params, &FitConfig::default(), Some(1), &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp", .. }), "{err:?}");
    }
}
