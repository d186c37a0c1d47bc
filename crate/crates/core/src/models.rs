//! Compact image classifiers: a plain MLP and a small residual conv net.
//!
//! Both architectures share one forward implementation built on the tape, so
//! training (parameters tracked) and attack generation (input tracked,
//! parameters constant) cannot drift apart. Parameters are stored as named
//! tensors in a fixed order; the order is part of the checkpoint contract.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::rng;
use crate::tensor::Tensor;

/// Network family and its size knobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Fully connected net; `hidden` lists the widths of the hidden layers.
    /// An empty list gives a linear classifier.
    Mlp { hidden: Vec<usize> },
    /// Conv stem, `blocks` residual blocks each followed by 2x2 max pooling,
    /// then a dense head. All convolutions are 3x3, stride 1, same padding.
    SmallConv { channels: usize, blocks: usize },
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Shape of one example, e.g. `[1, 8, 8]` or `[64]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelConfig {
    pub fn mlp(input_shape: Vec<usize>, hidden: Vec<usize>, classes: usize) -> Self {
        ModelConfig {
            arch: Architecture::Mlp { hidden },
            input_shape,
            classes,
        }
    }

    pub fn small_conv(input_shape: Vec<usize>, channels: usize, blocks: usize, classes: usize) -> Self {
        ModelConfig {
            arch: Architecture::SmallConv { channels, blocks },
            input_shape,
            classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input_len() == 0 {
            return Err(Error::invalid("input shape has zero volume"));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::invalid("zero-width hidden layer"));
                }
            }
            Architecture::SmallConv { channels, blocks } => {
                if *channels == 0 {
                    return Err(Error::invalid("conv net needs at least one channel"));
                }
                if self.input_shape.len() != 3 {
                    return Err(Error::invalid(format!(
                        "conv net needs a (channels, height, width) input shape, got {:?}",
                        self.input_shape
                    )));
                }
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                let div = 1usize << *blocks;
                if h % div != 0 || w % div != 0 {
                    return Err(Error::invalid(format!(
                        "spatial extents {}x{} not divisible by 2^{} for pooling",
                        h, w, blocks
                    )));
                }
            }
        }
        Ok(())
    }

    /// Named parameter shapes in forward order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut dims = vec![self.input_len()];
                dims.extend_from_slice(hidden);
                dims.push(self.classes);
                for i in 0..dims.len() - 1 {
                    layout.push((format!("fc{}.weight", i), vec![dims[i], dims[i + 1]]));
                    layout.push((format!("fc{}.bias", i), vec![dims[i + 1]]));
                }
            }
            Architecture::SmallConv { channels, blocks } => {
                let c = *channels;
                let cin = self.input_shape[0];
                layout.push(("stem.weight".into(), vec![c, cin, 3, 3]));
                layout.push(("stem.bias".into(), vec![c]));
                for b in 0..*blocks {
                    layout.push((format!("block{}.conv1.weight", b), vec![c, c, 3, 3]));
                    layout.push((format!("block{}.conv1.bias", b), vec![c]));
                    layout.push((format!("block{}.conv2.weight", b), vec![c, c, 3, 3]));
                    layout.push((format!("block{}.conv2.bias", b), vec![c]));
                }
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                let shrink = 1usize << *blocks;
                let flat = c * (h / shrink) * (w / shrink);
                layout.push(("head.weight".into(), vec![flat, self.classes]));
                layout.push(("head.bias".into(), vec![self.classes]));
            }
        }
        layout
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Stable hash of the architecture description; stored in checkpoints so
    /// weights can never be loaded into a structurally different model.
    pub fn fingerprint(&self) -> u64 {
        let desc = match &self.arch {
            Architecture::Mlp { hidden } => format!(
                "mlp hidden={:?} input={:?} classes={}",
                hidden, self.input_shape, self.classes
            ),
            Architecture::SmallConv { channels, blocks } => format!(
                "small_conv channels={} blocks={} input={:?} classes={}",
                channels, blocks, self.input_shape, self.classes
            ),
        };
        rng::derive_seed(0x6d6f_6465_6c21, &desc)
    }
}

/// Handles returned by [`ModelParams::forward_on_tape`].
pub struct ForwardPass {
    pub logits: NodeId,
    /// Parameter nodes in layout order; empty when parameters were placed as
    /// constants.
    pub param_nodes: Vec<(String, NodeId)>,
}

/// A model's weights plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// He-uniform initialization: weights from U[-sqrt(6/fan_in), +...],
    /// biases zero. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived_rng(seed, "model-init");
        let mut tensors = Vec::new();
        for (name, shape) in config.parameter_layout() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = match shape.len() {
                    2 => shape[0],
                    4 => shape[1] * shape[2] * shape[3],
                    _ => shape.iter().product(),
                };
                let limit = (6.0 / fan_in as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len).map(|_| r.gen_range(-limit..limit)).collect();
                Tensor::new(shape, data)?
            };
            tensors.push((name, tensor));
        }
        Ok(ModelParams { config, tensors })
    }

    /// Rebuild from stored tensors, checking them against the layout.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((want_name, want_shape), (name, tensor)) in layout.iter().zip(&tensors) {
            if want_name != name || want_shape.as_slice() != tensor.shape() {
                return Err(Error::invalid(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    want_name,
                    want_shape,
                    name,
                    tensor.shape()
                )));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Reshape a batch to this model's input layout. Accepts any batch whose
    /// per-example volume matches the configured input shape.
    fn batch_shape(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.rank() == 0 {
            return Err(Error::shape("forward", "rank-0 batch"));
        }
        let batch = x.shape()[0];
        let per_example: usize = x.shape()[1..].iter().product();
        if per_example != self.config.input_len() {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {:?} does not match input shape {:?}",
                    x.shape(),
                    self.config.input_shape
                ),
            ));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.config.input_shape);
        Ok(shape)
    }

    /// Record this model's forward computation on `tape`, starting from the
    /// already-placed batch node `x` of shape `(B, ...)`. With
    /// `track_params`, parameters are tracked leaves and their node handles
    /// are returned for the optimizer; otherwise they are constants.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: NodeId, track_params: bool) -> Result<ForwardPass> {
        let shape = self.batch_shape(tape.value(x))?;
        let batch = shape[0];
        let mut param_nodes = Vec::new();
        let mut cursor = 0;
        // Parameters are consumed strictly in layout order by both branches.
        let mut next = |tape: &mut Tape, nodes: &mut Vec<(String, NodeId)>| {
            let (name, tensor) = &self.tensors[cursor];
            cursor += 1;
            if track_params {
                let id = tape.leaf(tensor.clone());
                nodes.push((name.clone(), id));
                id
            } else {
                tape.constant(tensor.clone())
            }
        };

        let logits = match &self.config.arch {
            Architecture::Mlp { hidden } => {
                let mut h = tape.reshape(x, &[batch, self.config.input_len()])?;
                let layers = hidden.len() + 1;
                for i in 0..layers {
                    let w = next(tape, &mut param_nodes);
                    let b = next(tape, &mut param_nodes);
                    let z = tape.matmul(h, w)?;
                    let z = tape.bias_add(z, b)?;
                    h = if i + 1 < layers { tape.relu(z)? } else { z };
                }
                h
            }
            Architecture::SmallConv { blocks, .. } => {
                let mut h = tape.reshape(x, &shape)?;
                let stem_w = next(tape, &mut param_nodes);
                let stem_b = next(tape, &mut param_nodes);
                let z = tape.conv2d(h, stem_w)?;
                let z = tape.bias_add(z, stem_b)?;
                h = tape.relu(z)?;
                for _ in 0..*blocks {
                    let w1 = next(tape, &mut param_nodes);
                    let b1 = next(tape, &mut param_nodes);
                    let w2 = next(tape, &mut param_nodes);
                    let b2 = next(tape, &mut param_nodes);
                    let z = tape.conv2d(h, w1)?;
                    let z = tape.bias_add(z, b1)?;
                    let z = tape.relu(z)?;
                    let z = tape.conv2d(z, w2)?;
                    let z = tape.bias_add(z, b2)?;
                    let z = tape.add(z, h)?;
                    let z = tape.relu(z)?;
                    h = tape.max_pool2(z)?;
                }
                let flat: usize = tape.value(h).shape()[1..].iter().product();
                let h2 = tape.reshape(h, &[batch, flat])?;
                let head_w = next(tape, &mut param_nodes);
                let head_b = next(tape, &mut param_nodes);
                let z = tape.matmul(h2, head_w)?;
                tape.bias_add(z, head_b)?
            }
        };
        Ok(ForwardPass { logits, param_nodes })
    }

    /// Logits for a batch, no gradient bookkeeping.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let pass = self.forward_on_tape(&mut tape, xn, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Predicted class per example.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward_logits(x)?.argmax_rows())
    }
}
