//! Parameter containers for depth, reflectance, illumination and pose.
//!
//! Direct fields hold one unconstrained value per output sample and map it
//! through a total function (`exp`, `sigmoid`, the light squashing), so every
//! raw value yields a valid output. [`TinyConvPredictor`] is the only
//! input-dependent model; with a direct depth field the degradation
//! consistency term is identically zero and is skipped.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::diff::{conv3x3_forward, Graph, NodeId, Tensor};
use crate::geometry::RigidTransform;
use crate::imaging::ImageBuffer;
use crate::ird::{sigmoid, LightParams};
use crate::{Error, Result};

const CONV_CHANNELS: [usize; 4] = [3, 8, 8, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    Direct,
    Conv,
}

/// Log-depth per pixel: `D = exp(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectDepthField {
    pub z: Tensor,
}

impl DirectDepthField {
    /// `z = 0`, i.e. unit depth.
    pub fn new(height: usize, width: usize) -> Result<Self> {
        Ok(Self { z: Tensor::new([height, width, 1], vec![0.0; height * width])? })
    }

    pub fn from_depth(depth: &ImageBuffer) -> Result<Self> {
        if depth.channels() != 1 || depth.data().iter().any(|&d| d <= 0.0) {
            return Err(Error::invalid("depth must be single-channel and positive"));
        }
        Ok(Self { z: depth.map(libm::log)?.into() })
    }

    pub fn depth(&self) -> ImageBuffer {
        let [h, w, _] = self.z.shape();
        ImageBuffer::new(h, w, 1, self.z.data().iter().map(|&v| libm::exp(v)).collect())
            .expect("exp of finite parameters")
    }
}

/// Reflectance logits: `R = sigmoid(r)`, three channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectReflectanceField {
    pub r: Tensor,
}

impl DirectReflectanceField {
    /// `r = 0`, i.e. `R = 0.5`.
    pub fn new(height: usize, width: usize) -> Result<Self> {
        Ok(Self { r: Tensor::new([height, width, 3], vec![0.0; height * width * 3])? })
    }

    pub fn reflectance(&self) -> ImageBuffer {
        let [h, w, c] = self.r.shape();
        ImageBuffer::new(h, w, c, self.r.data().iter().map(|&v| sigmoid(v)).collect()).expect("sigmoid is finite")
    }

    /// Registers the logits as a leaf and returns `(leaf, R)`.
    pub fn build(&self, g: &mut Graph) -> (NodeId, NodeId) {
        let leaf = g.leaf(self.r.clone());
        (leaf, g.sigmoid(leaf))
    }
}

/// Raw light parameters, squashed onto the [`LightParams`] ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectLight {
    pub raw: [f64; 3],
}

impl Default for DirectLight {
    /// Centre of the image, `theta = 1`.
    fn default() -> Self {
        Self::from_params(&LightParams { x0: 0.5, y0: 0.5, theta: 1.0 })
    }
}

impl DirectLight {
    pub fn from_params(p: &LightParams) -> Self {
        Self { raw: p.to_raw() }
    }

    pub fn params(&self) -> LightParams {
        LightParams::from_raw(self.raw)
    }

    /// Registers the raw vector as a leaf and returns `(leaf, L)`.
    pub fn build(&self, g: &mut Graph, height: usize, width: usize) -> Result<(NodeId, NodeId)> {
        let leaf = g.leaf(Tensor::vector(self.raw.to_vec()));
        let params = g.light_squash(leaf)?;
        Ok((leaf, g.illumination(params, height, width)?))
    }
}

/// Pose of one source frame relative to the target, as six raw values
/// (axis-angle rotation, then translation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PoseParams {
    pub raw: [f64; 6],
}

impl PoseParams {
    pub fn from_transform(tf: &RigidTransform) -> Self {
        Self { raw: tf.to_params() }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_params(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `[cout, cin, 9]`, taps in row-major 3x3 order.
    pub weight: Tensor,
    /// `[cout, 1, 1]`.
    pub bias: Tensor,
}

/// Three 3x3 convolutions (3 -> 8 -> 8 -> 1) with `tanh` between layers and
/// `exp` on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyConvPredictor {
    pub layers: Vec<ConvLayer>,
}

impl TinyConvPredictor {
    /// Weights uniform in `+-1/sqrt(fan_in)`, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = CONV_CHANNELS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let bound = 1.0 / libm::sqrt((cin * 9) as f64);
                let weight = (0..cout * cin * 9)
                    .map(|_| {
                        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                        bound * (2.0 * u - 1.0)
                    })
                    .collect();
                ConvLayer {
                    weight: Tensor::new([cout, cin, 9], weight).expect("sized"),
                    bias: Tensor::new([cout, 1, 1], vec![0.0; cout]).expect("sized"),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros() -> Self {
        let mut p = Self::init(0);
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn validate(&self) -> Result<()> {
        let ok = self.layers.len() == 3
            && self
                .layers
                .iter()
                .zip(CONV_CHANNELS.windows(2))
                .all(|(l, io)| l.weight.shape() == [io[1], io[0], 9] && l.bias.shape() == [io[1], 1, 1]);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("convolution predictor has malformed layers"))
        }
    }

    /// Plain forward pass.
    pub fn forward(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        self.validate()?;
        if image.channels() != 3 {
            return Err(Error::invalid("convolution predictor needs a 3-channel image"));
        }
        let (h, w) = (image.height(), image.width());
        let mut x = image.data().to_vec();
        for (k, l) in self.layers.iter().enumerate() {
            let [cout, cin, _] = l.weight.shape();
            x = conv3x3_forward(&x, h, w, cin, l.weight.data(), l.bias.data(), cout);
            let last = k + 1 == self.layers.len();
            for v in &mut x {
                *v = if last { libm::exp(*v) } else { libm::tanh(*v) };
            }
        }
        ImageBuffer::new(h, w, 1, x)
    }
}

/// Depth predictor of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthModel {
    Direct(DirectDepthField),
    Conv(TinyConvPredictor),
}

impl DepthModel {
    pub fn init(kind: PredictorKind, height: usize, width: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            PredictorKind::Direct => Self::Direct(DirectDepthField::new(height, width)?),
            PredictorKind::Conv => Self::Conv(TinyConvPredictor::init(seed)),
        })
    }

    pub fn kind(&self) -> PredictorKind {
        match self {
            Self::Direct(_) => PredictorKind::Direct,
            Self::Conv(_) => PredictorKind::Conv,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Self::Direct(f) => vec![&f.z],
            Self::Conv(c) => c.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Direct(f) => vec![&mut f.z],
            Self::Conv(c) => c.tensors_mut(),
        }
    }

    /// Registers the parameters as graph leaves.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors().into_iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Builds the depth map for `image` from previously registered leaves.
    /// A direct field ignores the image.
    pub fn build(&self, g: &mut Graph, leaves: &[NodeId], image: NodeId) -> Result<NodeId> {
        match self {
            Self::Direct(_) => Ok(g.exp(leaves[0])),
            Self::Conv(_) => {
                if g.value(image).shape()[2] != 3 {
                    return Err(Error::invalid("convolution predictor needs a 3-channel image"));
                }
                let mut x = image;
                for (k, pair) in leaves.chunks(2).enumerate() {
                    let y = g.conv3x3(x, pair[0], pair[1])?;
                    x = if k + 1 == leaves.len() / 2 { g.exp(y) } else { g.tanh(y) };
                }
                Ok(x)
            }
        }
    }

    /// Plain-value depth prediction.
    pub fn predict(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        match self {
            Self::Direct(f) => Ok(f.depth()),
            Self::Conv(c) => c.forward(image),
        }
    }
}

pub fn predict_depth(model: &DepthModel, image: &ImageBuffer) -> Result<ImageBuffer> {
    model.predict(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference_check, Evaluation};
    use proptest::prelude::*;

    fn image(h: usize, w: usize, seed: u64) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, 3, |r, c, ch| {
            0.5 + 0.4 * libm::sin(0.7 * r as f64 + 1.3 * c as f64 + 2.1 * ch as f64 + seed as f64)
        })
        .unwrap()
    }

    /// Direct nested-loop convolution with edge padding.
    fn naive_conv(x: &ImageBuffer, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
        let [cout, cin, _] = weight.shape();
        let (h, w) = (x.height() as isize, x.width() as isize);
        let mut out = vec![0.0; (h * w) as usize * cout];
        for r in 0..h {
            for c in 0..w {
                for o in 0..cout {
                    let mut acc = bias.data()[o];
                    for i in 0..cin {
                        for dr in -1..=1isize {
                            for dc in -1..=1isize {
                                let rr = (r + dr).clamp(0, h - 1) as usize;
                                let cc = (c + dc).clamp(0, w - 1) as usize;
                                let tap = ((dr + 1) * 3 + dc + 1) as usize;
                                acc += weight.data()[(o * cin + i) * 9 + tap] * x.at(rr, cc, i);
                            }
                        }
                    }
                    out[((r * w + c) as usize) * cout + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn neutral_parameters_predict_unit_depth() {
        let img = image(8, 8, 1);
        let direct = DepthModel::init(PredictorKind::Direct, 8, 8, 0).unwrap();
        assert!(direct.predict(&img).unwrap().data().iter().all(|&d| d == 1.0));
        let conv = DepthModel::Conv(TinyConvPredictor::zeros());
        assert!(conv.predict(&img).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn conv_layer_matches_naive_oracle() {
        let img = image(8, 8, 3);
        let p = TinyConvPredictor::init(11);
        let l = &p.layers[0];
        let fast = conv3x3_forward(img.data(), 8, 8, 3, l.weight.data(), l.bias.data(), 8);
        let slow = naive_conv(&img, &l.weight, &l.bias);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_graph_matches_plain_forward() {
        let img = image(8, 8, 5);
        let model = DepthModel::init(PredictorKind::Conv, 8, 8, 4).unwrap();
        let mut g = Graph::new();
        let leaves = model.register(&mut g);
        let input = g.constant(&img);
        let d = model.build(&mut g, &leaves, input).unwrap();
        assert_eq!(g.value(d).data(), model.predict(&img).unwrap().data());
        assert!(model.predict(&image(8, 8, 1).channel_mean()).is_err());
    }

    #[test]
    fn initialization_is_deterministic_and_bounded() {
        let a = TinyConvPredictor::init(42);
        assert_eq!(a, TinyConvPredictor::init(42));
        assert_ne!(a, TinyConvPredictor::init(43));
        assert_eq!(a.parameter_count(), 881);
        for l in &a.layers {
            let bound = 1.0 / libm::sqrt((l.weight.shape()[1] * 9) as f64);
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn default_light_is_centred() {
        let p = DirectLight::default().params();
        assert!((p.x0 - 0.5).abs() < 1e-12 && (p.y0 - 0.5).abs() < 1e-12);
        assert!((p.theta - 1.0).abs() < 1e-12);
        let r = DirectReflectanceField::new(2, 2).unwrap().reflectance();
        assert!(r.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_gradients_pass_finite_differences() {
        let img = image(8, 8, 2);
        let model = TinyConvPredictor::init(7);
        let x: Vec<f64> = model.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let f = |x: &[f64]| {
            let mut m = model.clone();
            let mut at = 0;
            for t in m.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&x[at..at + n]);
                at += n;
            }
            let m = DepthModel::Conv(m);
            let mut g = Graph::new();
            let leaves = m.register(&mut g);
            let input = g.constant(&img);
            let d = m.build(&mut g, &leaves, input)?;
            let loss = g.mean(d);
            let grads = g.backward(loss)?;
            let gradient = leaves.iter().flat_map(|&l| grads.get_or_zeros(l, g.value(l).len())).collect();
            Ok(Evaluation { value: g.value(loss).item(), gradient, signature: g.signature() })
        };
        let reports = finite_difference_check(f, &x, 1e-4, 60, 3).unwrap();
        assert_eq!(reports.len(), 60);
        assert!(reports.iter().all(|r| r.relative_error < 1e-3), "{reports:?}");
    }

    #[test]
    fn checkpoints_round_trip_through_json() {
        let m = DepthModel::init(PredictorKind::Conv, 4, 4, 9).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<DepthModel>(&s).unwrap(), m);
        let bad = r#"{"z":{"shape":[2,2,1],"data":[0.0]}}"#;
        assert!(serde_json::from_str::<DirectDepthField>(bad).is_err());
    }

    proptest! {
        #[test]
        fn exposures_respect_ranges(raw in prop::collection::vec(-40.0f64..40.0, 12)) {
            let f = DirectDepthField { z: Tensor::new([3, 4, 1], raw.clone()).unwrap() };
            prop_assert!(f.depth().data().iter().all(|&d| d > 0.0));
            let r = DirectReflectanceField { r: Tensor::new([2, 2, 3], raw.clone()).unwrap() }.reflectance();
            prop_assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let l = DirectLight { raw: [raw[0], raw[1], raw[2]] }.params();
            prop_assert!(l.validate().is_ok());
        }
    }
}
