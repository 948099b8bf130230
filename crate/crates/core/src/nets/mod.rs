//! Network assembly: layer stacks, shape inference, initialization, and the
//! concrete architectures used by the experiment grid.
//!
//! A [`Model`] is a flat list of [`LayerSpec`]s plus the parameter tensors
//! that go with them. Shapes are validated once at build time, so the forward
//! paths can assume every layer fits. The same model runs in two modes:
//! [`Model::forward`] evaluates without recording anything, and
//! [`Model::forward_taped`] replays the stack onto a [`Tape`] for training.
//! Both modes call the same underlying kernels, so a checkpoint evaluated
//! off-tape reproduces the on-tape forward bit for bit.

mod weights;

pub use weights::{load_weights, save_weights};

use crate::tensor::{numel, Activation, Tape, Tensor, TensorError, ValueId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Errors from model construction, evaluation, or weight persistence.
#[derive(Debug, thiserror::Error)]
pub enum NetError {
    /// The layer stack cannot be realized for the given input shape.
    #[error("invalid layer stack: {0}")]
    InvalidSpec(String),
    /// A tensor-level operation failed while running the model.
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Reading or writing a weight file failed at the OS level.
    #[error("weight file io: {0}")]
    Io(#[from] std::io::Error),
    /// The file does not start with the weight container magic.
    #[error("not a weight container: bad magic bytes")]
    BadMagic,
    /// The container declares a version this build does not understand.
    #[error("unsupported weight container version {0}")]
    UnsupportedVersion(u32),
    /// The file ended before the declared contents were read.
    #[error("weight container truncated: {0}")]
    Truncated(String),
    /// The embedded model description could not be parsed or applied.
    #[error("weight container metadata: {0}")]
    Metadata(String),
    /// A tap-relative operation was requested on a model without a tap.
    #[error("model has no tap layer")]
    NoTap,
}

/// One layer in a feed-forward stack. Shapes below are per sample; the batch
/// dimension is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid (no padding) convolution over `[c, h, w]` input.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Transposed convolution over `[c, h, w]` input.
    Deconv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Fully connected layer over `[features]` input.
    Dense { units: usize },
    Relu,
    Sigmoid,
    /// Collapse any input shape to `[features]`.
    Flatten,
    /// Reinterpret `[features]` as the given shape with equal element count.
    Reshape { shape: Vec<usize> },
}

impl LayerSpec {
    fn describe(&self) -> String {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
            } => format!("conv({out_channels}, k{kernel}, s{stride})"),
            LayerSpec::Deconv {
                out_channels,
                kernel,
                stride,
            } => format!("deconv({out_channels}, k{kernel}, s{stride})"),
            LayerSpec::Dense { units } => format!("dense({units})"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Sigmoid => "sigmoid".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Reshape { shape } => format!("reshape({shape:?})"),
        }
    }
}

/// Computes the per-sample output shape of `spec` applied to `input`, or an
/// error naming the layer and the offending dimensions.
pub fn shape_after(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>, NetError> {
    let fail = |why: String| {
        Err(NetError::InvalidSpec(format!(
            "{} on input {:?}: {}",
            spec.describe(),
            input,
            why
        )))
    };
    match spec {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
        } => {
            if input.len() != 3 {
                return fail("expected [channels, height, width]".into());
            }
            let (h, w) = (input[1], input[2]);
            if *stride == 0 {
                return fail("stride must be positive".into());
            }
            if h < *kernel || w < *kernel {
                return fail(format!("kernel {kernel} does not fit in {h}x{w}"));
            }
            let oh = (h - kernel) / stride + 1;
            let ow = (w - kernel) / stride + 1;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerSpec::Deconv {
            out_channels,
            kernel,
            stride,
        } => {
            if input.len() != 3 {
                return fail("expected [channels, height, width]".into());
            }
            if *stride == 0 {
                return fail("stride must be positive".into());
            }
            let oh = (input[1] - 1) * stride + kernel;
            let ow = (input[2] - 1) * stride + kernel;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerSpec::Dense { units } => {
            if input.len() != 1 {
                return fail("expected flat [features] input".into());
            }
            if *units == 0 {
                return fail("units must be positive".into());
            }
            Ok(vec![*units])
        }
        LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
        LayerSpec::Flatten => Ok(vec![numel(input)]),
        LayerSpec::Reshape { shape } => {
            if numel(shape) != numel(input) {
                return fail(format!("element count mismatch with target {shape:?}"));
            }
            Ok(shape.clone())
        }
    }
}

/// Serializable description of a model: everything except parameter values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    /// Layer index whose output serves as the feature tap, if any.
    pub tap: Option<usize>,
}

/// A feed-forward network with validated shapes and owned parameters.
#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    /// Per-sample output shape of each layer, parallel to `spec.layers`.
    shapes: Vec<Vec<usize>>,
    params: Vec<Tensor>,
    /// Range into `params` used by each layer (empty for shape/activation ops).
    layer_params: Vec<std::ops::Range<usize>>,
}

fn uniform(rng: &mut ChaCha8Rng, limit: f64, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.gen_range(-limit..limit)).collect()
}

impl Model {
    /// Builds a model from layer specs, validating every shape transition and
    /// initializing parameters from `rng`.
    ///
    /// Weight layers that feed a relu get He-uniform init; everything else
    /// (sigmoid or linear outputs) gets Xavier-uniform. Biases start at zero.
    pub fn from_spec(spec: ModelSpec, rng: &mut ChaCha8Rng) -> Result<Model, NetError> {
        if let Some(tap) = spec.tap {
            if tap >= spec.layers.len() {
                return Err(NetError::InvalidSpec(format!(
                    "tap index {tap} out of range for {} layers",
                    spec.layers.len()
                )));
            }
        }
        let mut shapes = Vec::with_capacity(spec.layers.len());
        let mut params = Vec::new();
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        let mut current = spec.input_shape.clone();
        for (i, layer) in spec.layers.iter().enumerate() {
            let next = shape_after(layer, &current)
                .map_err(|e| NetError::InvalidSpec(format!("layer {i}: {e}")))?;
            let start = params.len();
            let he = feeds_relu(&spec.layers, i);
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let c_in = current[0];
                    let fan_in = (c_in * kernel * kernel) as f64;
                    let fan_out = (out_channels * kernel * kernel) as f64;
                    let limit = init_limit(he, fan_in, fan_out);
                    let count = out_channels * c_in * kernel * kernel;
                    params.push(tensor_from(
                        vec![*out_channels, c_in, *kernel, *kernel],
                        uniform(rng, limit, count),
                    ));
                    params.push(Tensor::zeros(&[*out_channels]).with_grad());
                }
                LayerSpec::Deconv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let c_in = current[0];
                    let fan_in = (c_in * kernel * kernel) as f64;
                    let fan_out = (out_channels * kernel * kernel) as f64;
                    let limit = init_limit(he, fan_in, fan_out);
                    let count = c_in * out_channels * kernel * kernel;
                    params.push(tensor_from(
                        vec![c_in, *out_channels, *kernel, *kernel],
                        uniform(rng, limit, count),
                    ));
                    params.push(Tensor::zeros(&[*out_channels]).with_grad());
                }
                LayerSpec::Dense { units } => {
                    let fan_in = current[0] as f64;
                    let fan_out = *units as f64;
                    let limit = init_limit(he, fan_in, fan_out);
                    let count = current[0] * units;
                    params.push(tensor_from(
                        vec![current[0], *units],
                        uniform(rng, limit, count),
                    ));
                    params.push(Tensor::zeros(&[*units]).with_grad());
                }
                _ => {}
            }
            layer_params.push(start..params.len());
            shapes.push(next.clone());
            current = next;
        }
        Ok(Model {
            spec,
            shapes,
            params,
            layer_params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    /// Per-sample output shape of the last layer.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap_or(&self.spec.input_shape)
    }

    /// Per-sample shape of the tap layer output.
    pub fn tap_shape(&self) -> Result<&[usize], NetError> {
        let tap = self.spec.tap.ok_or(NetError::NoTap)?;
        Ok(&self.shapes[tap])
    }

    /// Flattened element count of the tap output, per sample.
    pub fn feature_dim(&self) -> Result<usize, NetError> {
        Ok(numel(self.tap_shape()?))
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Copies all parameter values out, for best-epoch checkpointing.
    pub fn snapshot_params(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.data().to_vec()).collect()
    }

    /// Restores a snapshot taken from this same model.
    pub fn restore_params(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot layout mismatch");
        for (param, saved) in self.params.iter_mut().zip(snapshot) {
            param.data_mut().copy_from_slice(saved);
        }
    }

    fn check_batch_input(&self, input: &Tensor) -> Result<usize, NetError> {
        let shape = input.shape();
        if shape.len() != self.spec.input_shape.len() + 1
            || shape[1..] != self.spec.input_shape[..]
        {
            return Err(NetError::InvalidSpec(format!(
                "input shape {:?} does not match model input {:?} plus batch dimension",
                shape, self.spec.input_shape
            )));
        }
        Ok(shape[0])
    }

    /// Evaluates the stack without recording gradients, up to and including
    /// layer `upto`.
    fn forward_upto(&self, input: &Tensor, upto: usize) -> Result<Tensor, NetError> {
        let n = self.check_batch_input(input)?;
        let mut current = input.clone();
        for (i, layer) in self.spec.layers.iter().enumerate().take(upto + 1) {
            current = self.eval_layer(layer, i, &current, n)?;
        }
        Ok(current)
    }

    /// Evaluates the whole stack without a tape.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NetError> {
        if self.spec.layers.is_empty() {
            self.check_batch_input(input)?;
            return Ok(input.clone());
        }
        self.forward_upto(input, self.spec.layers.len() - 1)
    }

    /// Evaluates up to the tap layer without a tape.
    pub fn forward_to_tap(&self, input: &Tensor) -> Result<Tensor, NetError> {
        let tap = self.spec.tap.ok_or(NetError::NoTap)?;
        self.forward_upto(input, tap)
    }

    fn eval_layer(
        &self,
        layer: &LayerSpec,
        index: usize,
        input: &Tensor,
        n: usize,
    ) -> Result<Tensor, NetError> {
        let range = self.layer_params[index].clone();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&self.shapes[index]);
        let out = match layer {
            LayerSpec::Conv { stride, .. } => {
                let (k, b) = (&self.params[range.start], &self.params[range.start + 1]);
                crate::tensor::eval_conv2d(input, k, b, *stride)?
            }
            LayerSpec::Deconv { stride, .. } => {
                let (k, b) = (&self.params[range.start], &self.params[range.start + 1]);
                crate::tensor::eval_deconv2d(input, k, b, *stride)?
            }
            LayerSpec::Dense { .. } => {
                let (w, b) = (&self.params[range.start], &self.params[range.start + 1]);
                crate::tensor::eval_dense(input, w, b)?
            }
            LayerSpec::Relu => crate::tensor::eval_activation(input, Activation::Relu),
            LayerSpec::Sigmoid => crate::tensor::eval_activation(input, Activation::Sigmoid),
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => input.reshaped(&out_shape)?,
        };
        debug_assert_eq!(out.shape(), &out_shape[..]);
        Ok(out)
    }

    /// Records the stack onto `tape` starting from `input`, returning the
    /// output id and the ids of the parameter leaves in parameter order.
    ///
    /// With `frozen` set, parameters enter the tape as constants: activations
    /// still flow and upstream gradients pass through, but no parameter
    /// gradient is allocated. That is how the loss network participates in
    /// perceptual training without being updated.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        input: ValueId,
        frozen: bool,
    ) -> Result<(ValueId, Vec<ValueId>), NetError> {
        self.taped_upto(tape, input, self.spec.layers.len().wrapping_sub(1), frozen)
    }

    /// Records the stack up to the tap layer onto `tape`.
    pub fn forward_taped_to_tap(
        &self,
        tape: &mut Tape,
        input: ValueId,
        frozen: bool,
    ) -> Result<(ValueId, Vec<ValueId>), NetError> {
        let tap = self.spec.tap.ok_or(NetError::NoTap)?;
        self.taped_upto(tape, input, tap, frozen)
    }

    fn taped_upto(
        &self,
        tape: &mut Tape,
        input: ValueId,
        upto: usize,
        frozen: bool,
    ) -> Result<(ValueId, Vec<ValueId>), NetError> {
        let in_shape = tape.shape(input).to_vec();
        if in_shape.len() != self.spec.input_shape.len() + 1
            || in_shape[1..] != self.spec.input_shape[..]
        {
            return Err(NetError::InvalidSpec(format!(
                "taped input shape {:?} does not match model input {:?} plus batch dimension",
                in_shape, self.spec.input_shape
            )));
        }
        let n = in_shape[0];
        let mut param_ids = Vec::with_capacity(self.params.len());
        let mut current = input;
        if self.spec.layers.is_empty() {
            return Ok((current, param_ids));
        }
        for (i, layer) in self.spec.layers.iter().enumerate().take(upto + 1) {
            let range = self.layer_params[i].clone();
            let mut ids = [current; 2];
            for (slot, pi) in range.clone().enumerate() {
                ids[slot] = if frozen {
                    tape.constant(&self.params[pi])
                } else {
                    tape.leaf(&self.params[pi])
                };
                param_ids.push(ids[slot]);
            }
            current = match layer {
                LayerSpec::Conv { stride, .. } => tape.conv2d(current, ids[0], ids[1], *stride)?,
                LayerSpec::Deconv { stride, .. } => {
                    tape.deconv2d(current, ids[0], ids[1], *stride)?
                }
                LayerSpec::Dense { .. } => tape.dense(current, ids[0], ids[1])?,
                LayerSpec::Relu => tape.activation(current, Activation::Relu),
                LayerSpec::Sigmoid => tape.activation(current, Activation::Sigmoid),
                LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                    let mut target = vec![n];
                    target.extend_from_slice(&self.shapes[i]);
                    tape.reshape(current, &target)?
                }
            };
        }
        Ok((current, param_ids))
    }

    /// Applies gradients accumulated on `tape` back onto the model parameters,
    /// given the leaf ids returned by [`Model::forward_taped`].
    pub fn absorb_gradients(&mut self, tape: &Tape, param_ids: &[ValueId]) {
        assert_eq!(param_ids.len(), self.params.len(), "parameter id mismatch");
        for (param, &id) in self.params.iter_mut().zip(param_ids) {
            if let Some(g) = tape.grad(id) {
                param.accumulate_grad(g);
            }
        }
    }

    /// Human-readable one-line-per-layer summary, used by the CLI inspector.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "input: {:?}", self.spec.input_shape);
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let tap = if self.spec.tap == Some(i) { "  <- tap" } else { "" };
            let _ = writeln!(out, "{i:3}: {:<24} -> {:?}{tap}", layer.describe(), self.shapes[i]);
        }
        let _ = writeln!(out, "parameters: {}", self.parameter_count());
        out
    }
}

fn tensor_from(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(&shape, data)
        .expect("init data length matches shape")
        .with_grad()
}

fn init_limit(he: bool, fan_in: f64, fan_out: f64) -> f64 {
    if he {
        (6.0 / fan_in).sqrt()
    } else {
        (6.0 / (fan_in + fan_out)).sqrt()
    }
}

/// True when the first activation after layer `i` (looking through shape ops)
/// is a relu.
fn feeds_relu(layers: &[LayerSpec], i: usize) -> bool {
    for layer in &layers[i + 1..] {
        match layer {
            LayerSpec::Relu => return true,
            LayerSpec::Sigmoid => return false,
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => continue,
            _ => return false,
        }
    }
    false
}

const ENCODER_CHANNELS: [usize; 4] = [32, 64, 128, 256];
const MAX_ENCODER_BLOCKS: usize = 4;
const CODEC_HIDDEN: usize = 2048;

/// Spatial sizes produced by the stride-2 k4 conv chain, starting at
/// `image_size`, stopping before a block would not fit or after the block cap.
fn encoder_spatial_chain(image_size: usize) -> Vec<usize> {
    let mut chain = vec![image_size];
    let mut s = image_size;
    while chain.len() <= MAX_ENCODER_BLOCKS && s >= 4 {
        let next = (s - 4) / 2 + 1;
        chain.push(next);
        if next < 4 {
            break;
        }
        s = next;
    }
    chain
}

/// Builds the convolutional image encoder: stride-2 k4 conv+relu blocks with
/// channels 32, 64, 128, 256 (as many as fit, at most four), then a linear
/// dense layer to `z` units.
pub fn build_image_encoder(
    image_size: usize,
    channels: usize,
    z: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Model, NetError> {
    if image_size < 6 {
        return Err(NetError::InvalidSpec(format!(
            "image_size {image_size} unsupported: the encoder needs at least 6 pixels"
        )));
    }
    if channels == 0 || z == 0 {
        return Err(NetError::InvalidSpec(
            "channels and z must be positive".into(),
        ));
    }
    let chain = encoder_spatial_chain(image_size);
    let mut layers = Vec::new();
    for block in 0..chain.len() - 1 {
        layers.push(LayerSpec::Conv {
            out_channels: ENCODER_CHANNELS[block],
            kernel: 4,
            stride: 2,
        });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { units: z });
    Model::from_spec(
        ModelSpec {
            layers,
            input_shape: vec![channels, image_size, image_size],
            tap: None,
        },
        rng,
    )
}

/// Builds the deconvolutional image decoder mirroring the encoder for the
/// same `image_size`: dense from `z` to the bottleneck volume, then stride-2
/// deconv+relu blocks walking the spatial chain back up, with a sigmoid after
/// the last deconv.
///
/// Each deconv kernel is sized so the layer lands exactly on the next spatial
/// size in the chain; with this chain that is always 4 or 5.
pub fn build_image_decoder(
    image_size: usize,
    channels: usize,
    z: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Model, NetError> {
    if image_size < 6 {
        return Err(NetError::InvalidSpec(format!(
            "image_size {image_size} unsupported: the decoder needs at least 6 pixels"
        )));
    }
    if channels == 0 || z == 0 {
        return Err(NetError::InvalidSpec(
            "channels and z must be positive".into(),
        ));
    }
    let chain = encoder_spatial_chain(image_size);
    let blocks = chain.len() - 1;
    let bottleneck_c = ENCODER_CHANNELS[blocks - 1];
    let bottleneck_s = chain[blocks];
    let mut layers = vec![
        LayerSpec::Dense {
            units: bottleneck_c * bottleneck_s * bottleneck_s,
        },
        LayerSpec::Relu,
        LayerSpec::Reshape {
            shape: vec![bottleneck_c, bottleneck_s, bottleneck_s],
        },
    ];
    for j in (1..=blocks).rev() {
        let (src, target) = (chain[j], chain[j - 1]);
        let kernel = target - (src - 1) * 2;
        let out_channels = if j == 1 {
            channels
        } else {
            ENCODER_CHANNELS[j - 2]
        };
        layers.push(LayerSpec::Deconv {
            out_channels,
            kernel,
            stride: 2,
        });
        layers.push(if j == 1 {
            LayerSpec::Sigmoid
        } else {
            LayerSpec::Relu
        });
    }
    Model::from_spec(
        ModelSpec {
            layers,
            input_shape: vec![z],
            tap: None,
        },
        rng,
    )
}

/// Which half of the feature codec to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecDirection {
    /// `feature_dim -> 2048 (relu) -> z`, linear output.
    Encode,
    /// `z -> 2048 (relu) -> feature_dim`, sigmoid output.
    Decode,
}

/// Builds one half of the feature codec, the MLP pair that stands in for the
/// image encoder or decoder when the autoencoder works in feature space.
pub fn build_feature_codec(
    feature_dim: usize,
    z: usize,
    direction: CodecDirection,
    rng: &mut ChaCha8Rng,
) -> Result<Model, NetError> {
    if feature_dim == 0 || z == 0 {
        return Err(NetError::InvalidSpec(
            "feature_dim and z must be positive".into(),
        ));
    }
    let (input, layers) = match direction {
        CodecDirection::Encode => (
            vec![feature_dim],
            vec![
                LayerSpec::Dense {
                    units: CODEC_HIDDEN,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { units: z },
            ],
        ),
        CodecDirection::Decode => (
            vec![z],
            vec![
                LayerSpec::Dense {
                    units: CODEC_HIDDEN,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { units: feature_dim },
                LayerSpec::Sigmoid,
            ],
        ),
    };
    Model::from_spec(
        ModelSpec {
            layers,
            input_shape: input,
            tap: None,
        },
        rng,
    )
}

/// Builds the small classifier whose intermediate activations define the
/// perceptual feature space: conv(16) and conv(32) blocks with the tap after
/// the second relu, a conv(64) block when the map is still at least 4 pixels
/// wide, then a linear head over `num_classes`.
pub fn build_loss_network(
    image_size: usize,
    channels: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Model, NetError> {
    if num_classes < 2 {
        return Err(NetError::InvalidSpec(
            "the loss network needs at least two classes".into(),
        ));
    }
    if image_size < 10 {
        return Err(NetError::InvalidSpec(format!(
            "image_size {image_size} unsupported: the loss network needs two conv blocks, so at least 10 pixels"
        )));
    }
    let s1 = (image_size - 4) / 2 + 1;
    let s2 = (s1 - 4) / 2 + 1;
    let mut layers = vec![
        LayerSpec::Conv {
            out_channels: 16,
            kernel: 4,
            stride: 2,
        },
        LayerSpec::Relu,
        LayerSpec::Conv {
            out_channels: 32,
            kernel: 4,
            stride: 2,
        },
        LayerSpec::Relu,
    ];
    let tap = Some(layers.len() - 1);
    if s2 >= 4 {
        layers.push(LayerSpec::Conv {
            out_channels: 64,
            kernel: 4,
            stride: 2,
        });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { units: num_classes });
    Model::from_spec(
        ModelSpec {
            layers,
            input_shape: vec![channels, image_size, image_size],
            tap,
        },
        rng,
    )
}

/// Hidden-layer widths of the probe architectures, indexed by `arch_id`.
pub const PROBE_ARCHS: [&[usize]; 7] = [
    &[],
    &[32],
    &[64],
    &[32, 32],
    &[64, 32],
    &[64, 64],
    &[128, 128],
];

/// Builds probe architecture `arch_id`: relu MLP from `z` to `out_dim` with
/// the hidden widths in [`PROBE_ARCHS`], linear output.
pub fn build_predictor_mlp(
    z: usize,
    out_dim: usize,
    arch_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Model, NetError> {
    let hidden = PROBE_ARCHS.get(arch_id).ok_or_else(|| {
        NetError::InvalidSpec(format!(
            "arch_id {arch_id} out of range: valid ids are 0..={}",
            PROBE_ARCHS.len() - 1
        ))
    })?;
    if z == 0 || out_dim == 0 {
        return Err(NetError::InvalidSpec(
            "z and out_dim must be positive".into(),
        ));
    }
    let mut layers = Vec::new();
    for &units in hidden.iter() {
        layers.push(LayerSpec::Dense { units });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { units: out_dim });
    Model::from_spec(
        ModelSpec {
            layers,
            input_shape: vec![z],
            tap: None,
        },
        rng,
    )
}

/// Runs images through the loss network up to its tap, flattens, and squashes
/// with a sigmoid: the fixed feature representation used as a reconstruction
/// target and as feature-space input.
pub fn extract_features(lossnet: &Model, images: &Tensor) -> Result<Tensor, NetError> {
    let tap = lossnet.forward_to_tap(images)?;
    let n = tap.shape()[0];
    let flat = tap.reshaped(&[n, numel(&tap.shape()[1..])])?;
    Ok(crate::tensor::eval_activation(&flat, Activation::Sigmoid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn encoder_spatial_chain_matches_hand_computation() {
        assert_eq!(encoder_spatial_chain(32), vec![32, 15, 6, 2]);
        assert_eq!(encoder_spatial_chain(16), vec![16, 7, 2]);
        assert_eq!(encoder_spatial_chain(64), vec![64, 31, 14, 6, 2]);
        assert_eq!(encoder_spatial_chain(8), vec![8, 3]);
    }

    #[test]
    fn encoder_32px_has_three_blocks_and_z_output() {
        let enc = build_image_encoder(32, 3, 64, &mut rng(1)).unwrap();
        let convs = enc
            .spec()
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count();
        assert_eq!(convs, 3);
        assert_eq!(enc.output_shape(), &[64]);
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let y = enc.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 64]);
    }

    #[test]
    fn encoder_block_counts_by_size() {
        for (size, blocks) in [(8, 1), (16, 2), (32, 3), (64, 4)] {
            let enc = build_image_encoder(size, 3, 16, &mut rng(0)).unwrap();
            let convs = enc
                .spec()
                .layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::Conv { .. }))
                .count();
            assert_eq!(convs, blocks, "size {size}");
        }
        assert!(build_image_encoder(5, 3, 16, &mut rng(0)).is_err());
        assert!(build_image_encoder(32, 3, 0, &mut rng(0)).is_err());
    }

    #[test]
    fn decoder_inverts_encoder_spatial_shape() {
        for size in [8, 16, 24, 32, 64] {
            let dec = build_image_decoder(size, 3, 32, &mut rng(7)).unwrap();
            assert_eq!(dec.output_shape(), &[3, size, size], "size {size}");
            let z = Tensor::filled(&[2, 32], 0.1);
            let img = dec.forward(&z).unwrap();
            assert_eq!(img.shape(), &[2, 3, size, size]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn decoder_kernels_stay_in_the_four_five_band() {
        for size in [8, 16, 24, 32, 48, 64, 100] {
            let dec = build_image_decoder(size, 3, 8, &mut rng(0)).unwrap();
            for layer in &dec.spec().layers {
                if let LayerSpec::Deconv { kernel, .. } = layer {
                    assert!((4..=5).contains(kernel), "size {size} kernel {kernel}");
                }
            }
        }
    }

    #[test]
    fn feature_codec_shapes_and_parameter_count() {
        let enc = build_feature_codec(512, 64, CodecDirection::Encode, &mut rng(3)).unwrap();
        assert_eq!(enc.input_shape(), &[512]);
        assert_eq!(enc.output_shape(), &[64]);
        assert_eq!(
            enc.parameter_count(),
            512 * 2048 + 2048 + 2048 * 64 + 64
        );
        let dec = build_feature_codec(512, 64, CodecDirection::Decode, &mut rng(3)).unwrap();
        assert_eq!(dec.input_shape(), &[64]);
        assert_eq!(dec.output_shape(), &[512]);
        let out = dec.forward(&Tensor::filled(&[1, 64], 0.5)).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loss_network_tap_dimensions() {
        let net32 = build_loss_network(32, 3, 10, &mut rng(5)).unwrap();
        assert_eq!(net32.tap_shape().unwrap(), &[32, 6, 6]);
        assert_eq!(net32.feature_dim().unwrap(), 1152);
        let convs = |m: &Model| {
            m.spec()
                .layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::Conv { .. }))
                .count()
        };
        assert_eq!(convs(&net32), 3);
        assert_eq!(net32.output_shape(), &[10]);

        let net16 = build_loss_network(16, 3, 10, &mut rng(5)).unwrap();
        assert_eq!(net16.tap_shape().unwrap(), &[32, 2, 2]);
        assert_eq!(net16.feature_dim().unwrap(), 128);
        assert_eq!(convs(&net16), 2, "third conv dropped when the map is under 4px");

        assert!(build_loss_network(8, 3, 10, &mut rng(5)).is_err());
        assert!(build_loss_network(32, 3, 1, &mut rng(5)).is_err());
    }

    #[test]
    fn extract_features_shape_and_range() {
        let net = build_loss_network(16, 3, 4, &mut rng(11)).unwrap();
        let mut r = rng(12);
        let imgs = Tensor::from_vec(
            &[3, 3, 16, 16],
            (0..3 * 3 * 16 * 16).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let f = extract_features(&net, &imgs).unwrap();
        assert_eq!(f.shape(), &[3, 128]);
        assert!(f.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn probe_archs_cover_spec_table() {
        let probe3 = build_predictor_mlp(64, 2, 3, &mut rng(1)).unwrap();
        let denses: Vec<usize> = probe3
            .spec()
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect();
        assert_eq!(denses, vec![32, 32, 2]);

        let probe0 = build_predictor_mlp(64, 10, 0, &mut rng(1)).unwrap();
        assert_eq!(probe0.spec().layers.len(), 1);
        assert_eq!(probe0.parameter_count(), 64 * 10 + 10);

        let err = build_predictor_mlp(64, 2, 7, &mut rng(1)).unwrap_err();
        assert!(err.to_string().contains("0..=6"), "{err}");
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = build_image_encoder(16, 3, 8, &mut rng(42)).unwrap();
        let b = build_image_encoder(16, 3, 8, &mut rng(42)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = build_image_encoder(16, 3, 8, &mut rng(43)).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());

        let he_limit = (6.0f64 / (3.0 * 16.0)).sqrt();
        let first = a.params()[0].data();
        assert!(first.iter().all(|v| v.abs() < he_limit));
        let xavier_limit = (6.0f64 / (3.0 * 16.0 + 32.0 * 16.0)).sqrt();
        assert!(
            first.iter().any(|v| v.abs() > xavier_limit),
            "first conv feeds a relu, so its range should exceed the xavier limit"
        );

        let dense_w = a.params()[4].data();
        let dense_xavier = (6.0f64 / (32.0 * 2.0 * 2.0 + 8.0)).sqrt();
        assert!(
            dense_w.iter().all(|v| v.abs() < dense_xavier),
            "the output dense layer is linear, so it should use the xavier limit"
        );
        assert!(a.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taped_forward_matches_eval_forward_bitwise() {
        let dec = build_image_decoder(16, 3, 8, &mut rng(9)).unwrap();
        let mut r = rng(10);
        let z = Tensor::from_vec(&[2, 8], (0..16).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let eval = dec.forward(&z).unwrap();
        let mut tape = Tape::new();
        let zi = tape.constant(&z);
        let (out, _) = dec.forward_taped(&mut tape, zi, false).unwrap();
        assert_eq!(tape.value(out), eval.data());
    }

    #[test]
    fn frozen_taped_forward_blocks_parameter_gradients() {
        let net = build_loss_network(10, 1, 2, &mut rng(21)).unwrap();
        let mut r = rng(22);
        let img =
            Tensor::from_vec(&[1, 1, 10, 10], (0..100).map(|_| r.gen_range(0.0..1.0)).collect())
                .unwrap()
                .with_grad();
        let mut tape = Tape::new();
        let xi = tape.leaf(&img);
        let (tap_out, param_ids) = net.forward_taped_to_tap(&mut tape, xi, true).unwrap();
        let flat = tape
            .reshape(tap_out, &[1, net.feature_dim().unwrap()])
            .unwrap();
        let target = tape.constant(&Tensor::zeros(&[1, net.feature_dim().unwrap()]));
        let loss = tape.sse(flat, target).unwrap();
        tape.backward(loss).unwrap();
        for id in param_ids {
            assert!(tape.grad(id).is_none());
        }
        let gx = tape.grad(xi).expect("input gradient flows through");
        assert!(gx.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn absorb_gradients_moves_tape_grads_onto_params() {
        let mut probe = build_predictor_mlp(4, 2, 1, &mut rng(31)).unwrap();
        let x = Tensor::filled(&[3, 4], 0.5);
        let y = Tensor::zeros(&[3, 2]);
        let mut tape = Tape::new();
        let xi = tape.constant(&x);
        let (out, ids) = probe.forward_taped(&mut tape, xi, false).unwrap();
        let ti = tape.constant(&y);
        let loss = tape.sse(out, ti).unwrap();
        tape.backward(loss).unwrap();
        probe.absorb_gradients(&tape, &ids);
        let touched = probe
            .params()
            .iter()
            .filter(|p| p.grad().map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false))
            .count();
        assert!(touched >= 3, "most layers should receive gradient");
    }

    #[test]
    fn shape_errors_name_the_layer_and_input() {
        let err = shape_after(
            &LayerSpec::Conv {
                out_channels: 8,
                kernel: 4,
                stride: 2,
            },
            &[3, 3, 3],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv(8, k4, s2)") && msg.contains("3x3"), "{msg}");

        let err = shape_after(&LayerSpec::Reshape { shape: vec![2, 2] }, &[5]).unwrap_err();
        assert!(err.to_string().contains("element count"), "{err}");
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut m = build_predictor_mlp(3, 2, 1, &mut rng(77)).unwrap();
        let snap = m.snapshot_params();
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += 1.0;
            }
        }
        m.restore_params(&snap);
        for (p, s) in m.params().iter().zip(&snap) {
            assert_eq!(p.data(), &s[..]);
        }
    }
}
