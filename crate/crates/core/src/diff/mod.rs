//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every builder method evaluates its
//! operation eagerly, records the node, and returns a [`NodeId`]. Inputs
//! always precede their consumers, so the tape is acyclic by construction
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! Each node also folds its discrete branch decisions (bilinear cells,
//! clamp flags, order statistics, signs) into a running hash. Two
//! evaluations with the same [`Graph::signature`] took the same smooth
//! branch, which is what [`finite_difference_check`] uses to avoid probing
//! across kinks.

mod gradcheck;

use alloc::vec;
use alloc::vec::Vec;

pub use gradcheck::{finite_difference_check, relative_error, Evaluation, GradientReport, RELATIVE_ERROR_FLOOR};

use crate::geometry::{correspondence_kernel, correspondence_vjp_kernel, Intrinsics, RigidTransform};
use crate::imaging::{
    box_mean, box_mean_vjp, channel_mean_kernel, forward_diff_x, forward_diff_x_vjp, forward_diff_y,
    forward_diff_y_vjp, percentile_tap, BilinearTap, ImageBuffer, PercentileTap, SampleCoord,
};
use crate::ird::{illumination_map, illumination_map_vjp, sigmoid, LightParams};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense `[rows, cols, channels]` array of reals. Scalars are `[1, 1, 1]`
/// and parameter vectors `[1, n, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr")]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct TensorRepr {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor::new(r.shape, r.data)
    }
}

impl Tensor {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || data.is_empty() {
            return Err(Error::invalid("tensor shape does not match its data"));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: [1, 1, 1], data: vec![v] }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Self { shape: [1, v.len(), 1], data: v }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_image(&self) -> Result<ImageBuffer> {
        ImageBuffer::new(self.shape[0], self.shape[1], self.shape[2], self.data.clone())
    }
}

impl From<ImageBuffer> for Tensor {
    fn from(img: ImageBuffer) -> Self {
        let shape = [img.height(), img.width(), img.channels()];
        Self { shape, data: img.into_data() }
    }
}

impl From<&ImageBuffer> for Tensor {
    fn from(img: &ImageBuffer) -> Self {
        Self { shape: [img.height(), img.width(), img.channels()], data: img.data().to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary op lines up with the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// Single-channel operand spread over every channel of the first.
    Pixel(usize),
}

impl Broadcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Pixel(c) => i / c,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach,
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Div(NodeId, NodeId, Broadcast),
    Scale(NodeId, f64),
    Offset(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    ClampMin(NodeId, f64),
    Minimum(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MaskedMean(NodeId, Vec<bool>, usize),
    ChannelMean(NodeId),
    Fill(NodeId, Vec<bool>),
    BoxMean(NodeId, usize),
    DiffX(NodeId),
    DiffY(NodeId),
    Sample(NodeId, NodeId),
    Correspondence { depth: NodeId, pose: NodeId, k: Intrinsics },
    Illumination { params: NodeId, height: usize, width: usize },
    LightSquash(NodeId),
    Percentile(NodeId, PercentileTap),
    Conv3x3 { input: NodeId, weight: NodeId, bias: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach => "detach",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::ClampMin(..) => "clamp_min",
            Op::Minimum(..) => "minimum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MaskedMean(..) => "masked_mean",
            Op::ChannelMean(..) => "channel_mean",
            Op::Fill(..) => "fill",
            Op::BoxMean(..) => "box_mean",
            Op::DiffX(..) => "diff_x",
            Op::DiffY(..) => "diff_y",
            Op::Sample(..) => "bilinear_sample",
            Op::Correspondence { .. } => "correspondence",
            Op::Illumination { .. } => "illumination",
            Op::LightSquash(..) => "light_squash",
            Op::Percentile(..) => "percentile",
            Op::Conv3x3 { .. } => "conv3x3",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Detach => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Div(a, b, _) | Op::Minimum(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Abs(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaskedMean(a, ..)
            | Op::ChannelMean(a)
            | Op::Fill(a, _)
            | Op::BoxMean(a, _)
            | Op::DiffX(a)
            | Op::DiffY(a)
            | Op::LightSquash(a)
            | Op::Percentile(a, _) => vec![*a],
            Op::Sample(a, b) => vec![*a, *b],
            Op::Correspondence { depth, pose, .. } => vec![*depth, *pose],
            Op::Illumination { params, .. } => vec![*params],
            Op::Conv3x3 { input, weight, bias } => vec![*input, *weight, *bias],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Accumulated cotangent of a node, or `None` when no gradient reached
    /// it (detached, constant, or not an ancestor of the loss).
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializes zeros of length `len`.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    signature: u64,
    corrupt_illumination_vjp: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), signature: FNV_OFFSET, corrupt_illumination_vjp: false }
    }

    /// Test hook: scales the illumination VJP by 1.5 so gradient audits can
    /// be shown to fail on a wrong derivative.
    pub fn corrupt_illumination_vjp_for_testing(&mut self) {
        self.corrupt_illumination_vjp = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every discrete branch decision taken so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    fn mix_mask(&mut self, mask: &[bool]) {
        for chunk in mask.chunks(64) {
            let word = chunk.iter().enumerate().fold(0u64, |acc, (i, &m)| acc | (u64::from(m) << i));
            self.mix(word);
        }
    }

    fn mix(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.signature ^= u64::from(b);
            self.signature = self.signature.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: impl Into<Tensor>) -> NodeId {
        self.nodes.push(Node { value: value.into(), op: Op::Leaf, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: impl Into<Tensor>) -> NodeId {
        self.nodes.push(Node { value: value.into(), op: Op::Leaf, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Same value as `a`; gradients stop at this edge.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.nodes.push(Node { value, op: Op::Detach, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    fn broadcast(&self, a: NodeId, b: NodeId) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape, self.value(b).shape);
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).is_scalar() {
            Ok(Broadcast::Scalar)
        } else if sb[2] == 1 && sa[0] == sb[0] && sa[1] == sb[1] {
            Ok(Broadcast::Pixel(sa[2]))
        } else {
            Err(Error::invalid("operand shapes cannot be broadcast"))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: fn(NodeId, NodeId, Broadcast) -> Op,
    ) -> Result<NodeId> {
        let bc = self.broadcast(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().enumerate().map(|(i, &x)| f(x, vb.data[bc.index(i)])).collect();
        let value = Tensor { shape: va.shape, data };
        Ok(self.push(value, op(a, b, bc)))
    }

    /// `a + b`; `b` may be a scalar or a single-channel map over `a`'s grid.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let va = self.value(a);
        let value = Tensor { shape: va.shape, data: va.data.iter().map(|&x| f(x)).collect() };
        self.push(value, op)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, libm::log, Op::Ln(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let signs = self.value(a).data.iter().fold(0u64, |h, &x| {
            (h.rotate_left(5) ^ u64::from(x > 0.0) ^ (u64::from(x < 0.0) << 1)).wrapping_mul(FNV_PRIME)
        });
        self.mix(signs);
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, libm::tanh, Op::Tanh(a))
    }

    /// `max(a, floor)` elementwise.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let pattern = self
            .value(a)
            .data
            .iter()
            .fold(0u64, |h, &x| (h.rotate_left(3) ^ u64::from(x > floor)).wrapping_mul(FNV_PRIME));
        self.mix(pattern);
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Elementwise minimum of two same-shape tensors; ties pick `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::invalid("minimum needs equal shapes"));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<f64> = va.data.iter().zip(&vb.data).map(|(&x, &y)| if x <= y { x } else { y }).collect();
        let pattern = va
            .data
            .iter()
            .zip(&vb.data)
            .fold(0u64, |h, (x, y)| (h.rotate_left(3) ^ u64::from(x <= y)).wrapping_mul(FNV_PRIME));
        let shape = va.shape;
        self.mix(pattern);
        Ok(self.push(Tensor { shape, data }, Op::Minimum(a, b)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over the samples of pixels whose mask entry is set.
    pub fn masked_mean(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let v = self.value(a);
        let c = v.shape[2];
        if mask.len() * c != v.len() {
            return Err(Error::invalid("mask does not match tensor grid"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::degenerate("mask selects no pixels"));
        }
        let s: f64 = v.data.chunks_exact(c).zip(mask).filter(|(_, &m)| m).flat_map(|(px, _)| px.iter()).sum();
        let n = count * c;
        self.mix_mask(mask);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::MaskedMean(a, mask.to_vec(), n)))
    }

    /// Unweighted mean across channels.
    pub fn channel_mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let shape = [v.shape[0], v.shape[1], 1];
        let data = channel_mean_kernel(&v.data, v.shape[2]);
        self.push(Tensor { shape, data }, Op::ChannelMean(a))
    }

    /// Keeps pixels where `keep` is set and replaces the rest by `value`
    /// (with zero gradient).
    pub fn fill(&mut self, a: NodeId, keep: &[bool], value: f64) -> Result<NodeId> {
        let v = self.value(a);
        let c = v.shape[2];
        if keep.len() * c != v.len() {
            return Err(Error::invalid("mask does not match tensor grid"));
        }
        let data = v.data.iter().enumerate().map(|(i, &x)| if keep[i / c] { x } else { value }).collect();
        let shape = v.shape;
        self.mix_mask(keep);
        Ok(self.push(Tensor { shape, data }, Op::Fill(a, keep.to_vec())))
    }

    /// Edge-replicated box mean over a `(2r + 1)^2` window.
    pub fn box_mean(&mut self, a: NodeId, radius: usize) -> NodeId {
        let v = self.value(a);
        let [h, w, c] = v.shape;
        let data = box_mean(&v.data, h, w, c, radius);
        self.push(Tensor { shape: v.shape, data }, Op::BoxMean(a, radius))
    }

    /// Forward difference along columns, last column repeated.
    pub fn diff_x(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let [h, w, c] = v.shape;
        if w < 2 || h < 2 {
            return Err(Error::invalid("differences need at least a 2x2 grid"));
        }
        let data = forward_diff_x(&v.data, h, w, c);
        Ok(self.push(Tensor { shape: v.shape, data }, Op::DiffX(a)))
    }

    /// Forward difference along rows, last row repeated.
    pub fn diff_y(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let [h, w, c] = v.shape;
        if w < 2 || h < 2 {
            return Err(Error::invalid("differences need at least a 2x2 grid"));
        }
        let data = forward_diff_y(&v.data, h, w, c);
        Ok(self.push(Tensor { shape: v.shape, data }, Op::DiffY(a)))
    }

    /// Bilinear sampling of `img` at `coords` (`[h, w, 2]`, interleaved
    /// `x, y`). Returns the sampled node and the per-pixel in-bounds flags.
    pub fn bilinear_sample(&mut self, img: NodeId, coords: NodeId) -> Result<(NodeId, Vec<bool>)> {
        let (vi, vc) = (self.value(img), self.value(coords));
        let [ih, iw, c] = vi.shape;
        let [h, w, two] = vc.shape;
        if two != 2 {
            return Err(Error::invalid("coordinates must have two channels"));
        }
        let mut data = Vec::with_capacity(h * w * c);
        let mut in_bounds = Vec::with_capacity(h * w);
        let mut pattern = 0u64;
        for xy in vc.data.chunks_exact(2) {
            if !xy[0].is_finite() || !xy[1].is_finite() {
                return Err(Error::invalid("sample coordinates must be finite"));
            }
            let tap = BilinearTap::new(xy[0], xy[1], ih, iw);
            in_bounds.push(tap.in_bounds());
            pattern = (pattern.rotate_left(7)
                ^ (tap.col0 as u64)
                ^ ((tap.row0 as u64) << 20)
                ^ (u64::from(tap.clamped_x) << 40)
                ^ (u64::from(tap.clamped_y) << 41))
                .wrapping_mul(FNV_PRIME);
            for ch in 0..c {
                data.push(tap.sample(&vi.data, iw, c, ch));
            }
        }
        self.mix(pattern);
        let id = self.push(Tensor { shape: [h, w, c], data }, Op::Sample(img, coords));
        Ok((id, in_bounds))
    }

    /// Source-frame sampling coordinates (`[h, w, 2]`) for a depth map
    /// (`[h, w, 1]`) and pose vector `[rot, trans]`. Also returns the
    /// per-pixel validity flags of the correspondence.
    pub fn correspondence(&mut self, depth: NodeId, pose: NodeId, k: Intrinsics) -> Result<(NodeId, Vec<bool>)> {
        let (vd, vp) = (self.value(depth), self.value(pose));
        let [h, w, c] = vd.shape;
        if c != 1 || vp.len() != 6 {
            return Err(Error::invalid("correspondence needs a single-channel depth and a 6-vector pose"));
        }
        let tf = RigidTransform::from_params(&vp.data);
        let field = correspondence_kernel(&k, &tf, &vd.data, h, w)?;
        let data = field.coords.iter().flat_map(|p| [p.x, p.y]).collect();
        let pattern =
            field.valid.iter().fold(0u64, |acc, &v| (acc.rotate_left(1) ^ u64::from(v)).wrapping_mul(FNV_PRIME));
        self.mix(pattern);
        let id = self.push(Tensor { shape: [h, w, 2], data }, Op::Correspondence { depth, pose, k });
        Ok((id, field.valid))
    }

    /// `[raw] -> [x0, y0, theta]` through the sigmoid squashing of
    /// [`LightParams::from_raw`].
    pub fn light_squash(&mut self, raw: NodeId) -> Result<NodeId> {
        let v = self.value(raw);
        if v.len() != 3 {
            return Err(Error::invalid("light parameters are a 3-vector"));
        }
        let p = LightParams::from_raw([v.data[0], v.data[1], v.data[2]]);
        Ok(self.push(Tensor::vector(vec![p.x0, p.y0, p.theta]), Op::LightSquash(raw)))
    }

    /// Illumination field from `[x0, y0, theta]`.
    pub fn illumination(&mut self, params: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let v = self.value(params);
        if v.len() != 3 {
            return Err(Error::invalid("light parameters are a 3-vector"));
        }
        let p = LightParams { x0: v.data[0], y0: v.data[1], theta: v.data[2] };
        let map = illumination_map(&p, height, width)?;
        Ok(self.push(Tensor::from(map), Op::Illumination { params, height, width }))
    }

    /// Linear-interpolation percentile of all samples.
    pub fn percentile(&mut self, a: NodeId, q: f64) -> Result<NodeId> {
        let tap = percentile_tap(&self.value(a).data, q)?;
        self.mix(((tap.lo_index as u64) << 32) ^ tap.hi_index as u64);
        Ok(self.push(Tensor::scalar(tap.value), Op::Percentile(a, tap)))
    }

    /// 3x3 convolution, stride 1, edge padding. `weight` is
    /// `[c_out, c_in, 9]` (row-major kernel taps), `bias` is `[c_out, 1, 1]`.
    pub fn conv3x3(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vi, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        let [h, w, cin] = vi.shape;
        let [cout, wcin, taps] = vw.shape;
        if wcin != cin || taps != 9 || vb.len() != cout {
            return Err(Error::invalid("convolution weight/bias shapes do not match the input"));
        }
        let data = conv3x3_forward(&vi.data, h, w, cin, &vw.data, &vb.data, cout);
        Ok(self.push(Tensor { shape: [h, w, cout], data }, Op::Conv3x3 { input, weight, bias }))
    }

    /// Reports the first node holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| n.value.data.iter().any(|v| !v.is_finite())) {
            Some(i) => Err(Error::NonFinite { node: i, op: self.nodes[i].op.name() }),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar node. Only nodes that require gradients
    /// receive one; accumulation order is fixed by the tape order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("unknown loss node"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(cot) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(Error::Internal(alloc::format!("node #{idx} consumes later node #{}", input.0)));
                }
            }
            self.propagate(node, &cot, &mut grads)?;
            grads[idx] = Some(cot);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let len = self.nodes[id.0].value.len();
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn elementwise(&self, grads: &mut [Option<Vec<f64>>], a: NodeId, cot: &[f64], df: impl Fn(usize) -> f64) {
        self.accumulate(grads, a, |g| {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += cot[i] * df(i);
            }
        });
    }

    fn broadcast_grad(
        &self,
        grads: &mut [Option<Vec<f64>>],
        b: NodeId,
        bc: Broadcast,
        cot: &[f64],
        df: impl Fn(usize) -> f64,
    ) {
        self.accumulate(grads, b, |g| {
            for (i, &c) in cot.iter().enumerate() {
                g[bc.index(i)] += c * df(i);
            }
        });
    }

    fn propagate(&self, node: &Node, cot: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &node.value.data;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b, bc) => {
                self.elementwise(grads, *a, cot, |_| 1.0);
                self.broadcast_grad(grads, *b, *bc, cot, |_| 1.0);
            }
            Op::Sub(a, b, bc) => {
                self.elementwise(grads, *a, cot, |_| 1.0);
                self.broadcast_grad(grads, *b, *bc, cot, |_| -1.0);
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.elementwise(grads, *a, cot, |i| vb[bc.index(i)]);
                self.broadcast_grad(grads, *b, *bc, cot, |i| va[i]);
            }
            Op::Div(a, b, bc) => {
                let vb = &self.value(*b).data;
                self.elementwise(grads, *a, cot, |i| 1.0 / vb[bc.index(i)]);
                self.broadcast_grad(grads, *b, *bc, cot, |i| -out[i] / vb[bc.index(i)]);
            }
            Op::Scale(a, k) => self.elementwise(grads, *a, cot, |_| *k),
            Op::Offset(a) => self.elementwise(grads, *a, cot, |_| 1.0),
            Op::Exp(a) => self.elementwise(grads, *a, cot, |i| out[i]),
            Op::Ln(a) => {
                let va = &self.value(*a).data;
                self.elementwise(grads, *a, cot, |i| 1.0 / va[i]);
            }
            Op::Abs(a) => {
                let va = &self.value(*a).data;
                self.elementwise(grads, *a, cot, |i| {
                    if va[i] > 0.0 {
                        1.0
                    } else if va[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Sigmoid(a) => self.elementwise(grads, *a, cot, |i| out[i] * (1.0 - out[i])),
            Op::Tanh(a) => self.elementwise(grads, *a, cot, |i| 1.0 - out[i] * out[i]),
            Op::ClampMin(a, floor) => {
                let va = &self.value(*a).data;
                self.elementwise(grads, *a, cot, |i| if va[i] > *floor { 1.0 } else { 0.0 });
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.elementwise(grads, *a, cot, |i| if va[i] <= vb[i] { 1.0 } else { 0.0 });
                self.elementwise(grads, *b, cot, |i| if va[i] <= vb[i] { 0.0 } else { 1.0 });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |g| g.iter_mut().for_each(|x| *x += cot[0])),
            Op::Mean(a) => {
                let n = g_len(self, *a) as f64;
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|x| *x += cot[0] / n));
            }
            Op::MaskedMean(a, mask, n) => {
                let c = self.value(*a).shape[2];
                let share = cot[0] / *n as f64;
                self.accumulate(grads, *a, |g| {
                    for (i, x) in g.iter_mut().enumerate() {
                        if mask[i / c] {
                            *x += share;
                        }
                    }
                });
            }
            Op::ChannelMean(a) => {
                let c = self.value(*a).shape[2];
                self.accumulate(grads, *a, |g| {
                    for (i, x) in g.iter_mut().enumerate() {
                        *x += cot[i / c] / c as f64;
                    }
                });
            }
            Op::Fill(a, keep) => {
                let c = self.value(*a).shape[2];
                self.elementwise(grads, *a, cot, |i| if keep[i / c] { 1.0 } else { 0.0 });
            }
            Op::BoxMean(a, radius) => {
                let [h, w, c] = self.value(*a).shape;
                let back = box_mean_vjp(cot, h, w, c, *radius);
                self.accumulate(grads, *a, |g| add_into(g, &back));
            }
            Op::DiffX(a) => {
                let [h, w, c] = self.value(*a).shape;
                let back = forward_diff_x_vjp(cot, h, w, c);
                self.accumulate(grads, *a, |g| add_into(g, &back));
            }
            Op::DiffY(a) => {
                let [h, w, c] = self.value(*a).shape;
                let back = forward_diff_y_vjp(cot, h, w, c);
                self.accumulate(grads, *a, |g| add_into(g, &back));
            }
            Op::Sample(img, coords) => {
                let (vi, vc) = (self.value(*img), self.value(*coords));
                let [ih, iw, c] = vi.shape;
                let want_img = self.nodes[img.0].requires_grad;
                let want_coords = self.nodes[coords.0].requires_grad;
                let mut d_img = if want_img { vec![0.0; vi.len()] } else { Vec::new() };
                let mut d_coords = if want_coords { vec![0.0; vc.len()] } else { Vec::new() };
                for (p, xy) in vc.data.chunks_exact(2).enumerate() {
                    let tap = BilinearTap::new(xy[0], xy[1], ih, iw);
                    for ch in 0..c {
                        let ct = cot[p * c + ch];
                        if want_coords {
                            let (dx, dy) = tap.coord_partials(&vi.data, iw, c, ch);
                            d_coords[2 * p] += ct * dx;
                            d_coords[2 * p + 1] += ct * dy;
                        }
                        if want_img {
                            tap.scatter(&mut d_img, iw, c, ch, ct);
                        }
                    }
                }
                if want_img {
                    self.accumulate(grads, *img, |g| add_into(g, &d_img));
                }
                if want_coords {
                    self.accumulate(grads, *coords, |g| add_into(g, &d_coords));
                }
            }
            Op::Correspondence { depth, pose, k } => {
                let vd = self.value(*depth);
                let tf = RigidTransform::from_params(&self.value(*pose).data);
                let cot_xy: Vec<SampleCoord> = cot.chunks_exact(2).map(|c| SampleCoord::new(c[0], c[1])).collect();
                let (d_depth, d_pose) = correspondence_vjp_kernel(k, &tf, &vd.data, vd.shape[1], &cot_xy);
                self.accumulate(grads, *depth, |g| add_into(g, &d_depth));
                self.accumulate(grads, *pose, |g| add_into(g, &d_pose));
            }
            Op::LightSquash(raw) => {
                let v = &self.value(*raw).data;
                let d = LightParams::raw_derivative([v[0], v[1], v[2]]);
                self.elementwise(grads, *raw, cot, |i| d[i]);
            }
            Op::Illumination { params, height, width } => {
                let v = &self.value(*params).data;
                let p = LightParams { x0: v[0], y0: v[1], theta: v[2] };
                let mut d = illumination_map_vjp(&p, *height, *width, cot)?;
                if self.corrupt_illumination_vjp {
                    d.iter_mut().for_each(|x| *x *= 1.5);
                }
                self.accumulate(grads, *params, |g| add_into(g, &d));
            }
            Op::Percentile(a, tap) => {
                let tap = *tap;
                self.accumulate(grads, *a, |g| {
                    g[tap.lo_index] += cot[0] * (1.0 - tap.frac);
                    g[tap.hi_index] += cot[0] * tap.frac;
                });
            }
            Op::Conv3x3 { input, weight, bias } => {
                let (vi, vw) = (self.value(*input), self.value(*weight));
                let [h, w, cin] = vi.shape;
                let cout = vw.shape[0];
                let (d_in, d_w, d_b) = conv3x3_vjp(&vi.data, h, w, cin, &vw.data, cout, cot);
                self.accumulate(grads, *input, |g| add_into(g, &d_in));
                self.accumulate(grads, *weight, |g| add_into(g, &d_w));
                self.accumulate(grads, *bias, |g| add_into(g, &d_b));
            }
        }
        Ok(())
    }
}

fn g_len(g: &Graph, id: NodeId) -> usize {
    g.value(id).len()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn clamp_index(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

pub(crate) fn conv3x3_forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for r in 0..h {
        for c in 0..w {
            let dst = (r * w + c) * cout;
            out[dst..dst + cout].copy_from_slice(bias);
            for ky in 0..3 {
                let rr = clamp_index(r as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let cc = clamp_index(c as isize + kx as isize - 1, w);
                    let src = (rr * w + cc) * cin;
                    for o in 0..cout {
                        let wbase = o * cin * 9 + ky * 3 + kx;
                        let mut acc = 0.0;
                        for i in 0..cin {
                            acc += weight[wbase + i * 9] * input[src + i];
                        }
                        out[dst + o] += acc;
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_vjp(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    cout: usize,
    cot: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_in = vec![0.0; input.len()];
    let mut d_w = vec![0.0; weight.len()];
    let mut d_b = vec![0.0; cout];
    for r in 0..h {
        for c in 0..w {
            let dst = (r * w + c) * cout;
            for o in 0..cout {
                d_b[o] += cot[dst + o];
            }
            for ky in 0..3 {
                let rr = clamp_index(r as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let cc = clamp_index(c as isize + kx as isize - 1, w);
                    let src = (rr * w + cc) * cin;
                    for o in 0..cout {
                        let g = cot[dst + o];
                        if g == 0.0 {
                            continue;
                        }
                        let wbase = o * cin * 9 + ky * 3 + kx;
                        for i in 0..cin {
                            d_w[wbase + i * 9] += g * input[src + i];
                            d_in[src + i] += g * weight[wbase + i * 9];
                        }
                    }
                }
            }
        }
    }
    (d_in, d_w, d_b)
}

#[cfg(test)]
mod tests;
