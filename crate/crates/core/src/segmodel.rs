//! Four-block convolutional encoder with a multi-scale 1x1 decoder head.
//!
//! Block `l` halves the resolution (2x2 mean), then applies
//! `a = relu(conv3x3(x) + b)` and `f_l = relu(conv3x3(a) + b' + a)`. The head
//! projects every `f_l` to class logits with a 1x1 convolution, upsamples it back
//! to input resolution and sums. `f_1..f_4` are the alignment taps.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Stream};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub const NUM_BLOCKS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input {height}x{width} is not divisible by 16")]
    InputSize { height: usize, width: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter set does not match the model: {0}")]
    Params(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub widths: [usize; NUM_BLOCKS],
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { in_channels: 3, widths: [16, 32, 64, 128], num_classes: crate::scenegen::NUM_CLASSES }
    }
}

impl ModelConfig {
    pub fn with_widths(widths: [usize; NUM_BLOCKS]) -> Self {
        Self { widths, ..Self::default() }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.num_classes < 2 || self.widths.contains(&0) {
            return Err(ModelError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    /// Expected `(name, shape)` of every parameter, in name order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut prev = self.in_channels;
        for (l, &c) in self.widths.iter().enumerate() {
            let b = l + 1;
            shapes.push((format!("enc{b}.conv_a.w"), vec![c, prev, 3, 3]));
            shapes.push((format!("enc{b}.conv_a.b"), vec![c, 1, 1]));
            shapes.push((format!("enc{b}.conv_b.w"), vec![c, c, 3, 3]));
            shapes.push((format!("enc{b}.conv_b.b"), vec![c, 1, 1]));
            shapes.push((format!("head{b}.w"), vec![self.num_classes, c, 1, 1]));
            prev = c;
        }
        shapes.push(("head.b".into(), vec![self.num_classes, 1, 1]));
        shapes.sort();
        shapes
    }

    /// Recovers the config from a parameter set (e.g. a loaded checkpoint).
    pub fn infer(params: &BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        let shape = |name: &str| {
            params.get(name).map(|t| t.shape().to_vec()).ok_or_else(|| ModelError::Params(format!("missing `{name}`")))
        };
        let first = shape("enc1.conv_a.w")?;
        let mut widths = [0; NUM_BLOCKS];
        for (l, w) in widths.iter_mut().enumerate() {
            *w = shape(&format!("enc{}.conv_a.w", l + 1))?[0];
        }
        let config = Self { in_channels: first[1], widths, num_classes: shape("head.b")?[0] };
        config.validate()?;
        Ok(config)
    }
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        let config = ModelConfig::infer(&tensors)?;
        let expected = config.param_shapes();
        if expected.len() != tensors.len() {
            return Err(ModelError::Params(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
        }
        for (name, shape) in expected {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(ModelError::Params(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()))),
                None => return Err(ModelError::Params(format!("missing `{name}`"))),
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a graph leaf; `trainable` decides whether
    /// they receive gradients.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<ParamNodes, ModelError> {
        self.register_prefixed(g, "", trainable)
    }

    /// Like [`ModelParams::register`] with leaf names `{prefix}{name}`.
    pub fn register_prefixed(&self, g: &mut Graph, prefix: &str, trainable: bool) -> Result<ParamNodes, ModelError> {
        let mut nodes = BTreeMap::new();
        for (name, t) in &self.tensors {
            let leaf = format!("{prefix}{name}");
            let id = if trainable { g.param(leaf, t.clone())? } else { g.input(leaf, t.clone())? };
            nodes.insert(name.clone(), id);
        }
        Ok(ParamNodes { config: self.config.clone(), nodes })
    }
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`
/// for kernels (capped below 1) and zero biases.
pub fn init_params(seed: u64, config: &ModelConfig) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for (k, (name, shape)) in config.param_shapes().into_iter().enumerate() {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with(".b") {
            vec![0.0; numel]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt().min(0.95);
            let mut rng = stream(Stream::ParamInit, &[seed, k as u64]);
            (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?.requires_grad(true));
    }
    Ok(ModelParams { config: config.clone(), tensors })
}

/// Graph handles for a registered parameter set.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub config: ModelConfig,
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    fn get(&self, name: &str) -> NodeId {
        self.nodes[name]
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PyramidNodes {
    pub features: [NodeId; NUM_BLOCKS],
    pub logits: NodeId,
}

/// Materialized features `f_1..f_4` and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub features: Vec<Tensor>,
    pub logits: Tensor,
}

impl FeaturePyramid {
    pub fn from_graph(g: &Graph, nodes: &PyramidNodes) -> Self {
        Self {
            features: nodes.features.iter().map(|&id| g.value(id).clone()).collect(),
            logits: g.value(nodes.logits).clone(),
        }
    }
}

/// Records a forward pass of `image` (`[c, h, w]`) on `g`.
pub fn forward_nodes(g: &mut Graph, params: &ParamNodes, image: NodeId) -> Result<PyramidNodes, ModelError> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != params.config.in_channels {
        return Err(ModelError::Config(format!(
            "expected a [{}, h, w] image, got {shape:?}",
            params.config.in_channels
        )));
    }
    let (height, width) = (shape[1], shape[2]);
    if height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0 {
        return Err(ModelError::InputSize { height, width });
    }
    let mut x = g.offset(image, -0.5)?;
    let mut features = [x; NUM_BLOCKS];
    let mut logits: Option<NodeId> = None;
    for (l, feature) in features.iter_mut().enumerate() {
        let b = l + 1;
        let pooled = g.downsample(x)?;
        let a = g.conv2d(pooled, params.get(&format!("enc{b}.conv_a.w")))?;
        let a = g.add(a, params.get(&format!("enc{b}.conv_a.b")))?;
        let a = g.relu(a)?;
        let y = g.conv2d(a, params.get(&format!("enc{b}.conv_b.w")))?;
        let y = g.add(y, params.get(&format!("enc{b}.conv_b.b")))?;
        let y = g.add(y, a)?;
        let f = g.relu(y)?;
        *feature = f;
        x = f;

        let proj = g.conv2d(f, params.get(&format!("head{b}.w")))?;
        let up = g.upsample(proj, 1 << b)?;
        logits = Some(match logits {
            Some(acc) => g.add(acc, up)?,
            None => up,
        });
    }
    let logits = g.add(logits.expect("four blocks"), params.get("head.b"))?;
    Ok(PyramidNodes { features, logits })
}

/// Pure forward pass without gradient tracking.
pub fn forward(params: &ModelParams, image: &Tensor) -> Result<FeaturePyramid, ModelError> {
    let mut g = Graph::new();
    let nodes = params.register(&mut g, false)?;
    let x = g.input("image", image.clone())?;
    let pyr = forward_nodes(&mut g, &nodes, x)?;
    Ok(FeaturePyramid::from_graph(&g, &pyr))
}

/// Per-pixel argmax over the class axis of `[k, h, w]` logits.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let (k, hw) = (logits.shape()[0], logits.shape()[1] * logits.shape()[2]);
    let d = logits.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Converts interleaved 8-bit RGB to a `[3, h, w]` tensor in `[0, 1]`.
pub fn image_tensor(rgb: &[u8], width: usize, height: usize) -> Tensor {
    let hw = width * height;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            data[c * hw + p] = rgb[p * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data).expect("rgb buffer size")
}

/// Converts interleaved float RGB to a `[3, h, w]` tensor.
pub fn image_tensor_f64(rgb: &[f64], width: usize, height: usize) -> Tensor {
    let hw = width * height;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            data[c * hw + p] = rgb[p * 3 + c];
        }
    }
    Tensor::new(vec![3, height, width], data).expect("rgb buffer size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = stream(Stream::Split, &[seed]);
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::default();
        let a = init_params(1, &cfg).unwrap();
        assert_eq!(a, init_params(1, &cfg).unwrap());
        assert_ne!(a, init_params(2, &cfg).unwrap());
        for t in a.tensors.values() {
            assert!(t.data().iter().all(|v| v.is_finite() && v.abs() < 1.0));
        }
    }

    #[test]
    fn pyramid_shapes_follow_block_halving() {
        let params = init_params(3, &ModelConfig::default()).unwrap();
        let pyr = forward(&params, &image(128, 96, 0)).unwrap();
        let shapes: Vec<_> = pyr.features.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 64, 48], vec![32, 32, 24], vec![64, 16, 12], vec![128, 8, 6]]);
        assert_eq!(pyr.logits.shape(), &[10, 128, 96]);
    }

    #[test]
    fn forward_is_pure() {
        let params = init_params(3, &ModelConfig::with_widths([4, 4, 8, 8])).unwrap();
        let x = image(32, 48, 1);
        let a = forward(&params, &x).unwrap();
        let b = forward(&params, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let params = init_params(3, &ModelConfig::with_widths([2, 2, 2, 2])).unwrap();
        assert!(matches!(forward(&params, &image(40, 32, 0)), Err(ModelError::InputSize { .. })));
    }

    #[test]
    fn config_is_recoverable_from_tensors() {
        let cfg = ModelConfig::with_widths([3, 5, 7, 9]);
        let params = init_params(0, &cfg).unwrap();
        assert_eq!(ModelParams::from_tensors(params.tensors.clone()).unwrap().config, cfg);
        let mut broken = params.tensors.clone();
        broken.remove("head3.w");
        assert!(ModelParams::from_tensors(broken).is_err());
    }

    #[test]
    fn image_conversion_is_planar() {
        let t = image_tensor(&[255, 0, 51, 0, 255, 0], 2, 1);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.0]);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let params = init_params(5, &ModelConfig::with_widths([3, 4, 4, 5])).unwrap();
        let mut g = Graph::new();
        let nodes = params.register(&mut g, true).unwrap();
        let x = g.input("image", image(16, 16, 2)).unwrap();
        let pyr = forward_nodes(&mut g, &nodes, x).unwrap();
        let mut rng = stream(Stream::Split, &[77]);
        let labels: Vec<u8> = (0..256).map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..10) }).collect();
        let loss = crate::losses::cross_entropy(&mut g, pyr.logits, &labels).unwrap();
        for name in params.tensors.keys() {
            let err = crate::tensor::finite_difference_check(&mut g, loss, name, crate::tensor::FdOptions::with_epsilon(1e-4)).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn shape_contract_holds_for_any_valid_size(h in 1usize..5, w in 1usize..5, widths in proptest::array::uniform4(1usize..6)) {
            let params = init_params(0, &ModelConfig::with_widths(widths)).unwrap();
            let pyr = forward(&params, &image(16 * h, 16 * w, 3)).unwrap();
            for (l, f) in pyr.features.iter().enumerate() {
                proptest::prop_assert_eq!(f.shape(), &[widths[l], 16 * h >> (l + 1), 16 * w >> (l + 1)]);
            }
            proptest::prop_assert_eq!(pyr.logits.shape(), &[10, 16 * h, 16 * w]);
        }
    }
}
