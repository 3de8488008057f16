//! Small convolutional classifiers with SGD training.

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::weights::{sgd_step, ModelWeights};

/// Predefined architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// conv(3→16)-ReLU-pool-conv(16→32)-ReLU-pool-conv(32→32)-ReLU-dense
    ArchA,
    /// conv(3→8)-ReLU-conv(8→16)-ReLU-pool-conv(16→32)-ReLU-pool-dense
    ArchB,
}

/// One layer of a network description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize },
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense { out: usize },
}

impl Architecture {
    pub fn layers(self, classes: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let conv = |out_channels| Conv {
            out_channels,
            kernel: 3,
        };
        match self {
            Architecture::ArchA => vec![
                conv(16),
                Relu,
                MaxPool,
                conv(32),
                Relu,
                MaxPool,
                conv(32),
                Relu,
                Dense { out: classes },
            ],
            Architecture::ArchB => vec![
                conv(8),
                Relu,
                conv(16),
                Relu,
                MaxPool,
                conv(32),
                Relu,
                MaxPool,
                Dense { out: classes },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Preset(Architecture),
    Custom(Vec<LayerSpec>),
}

/// Architecture, input geometry, class count and Grad-CAM capture layer.
///
/// Convolutions are named `conv1`, `conv2`, ... in order of appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub topology: Topology,
    pub input_size: usize,
    pub classes: usize,
    /// Defaults to the last convolution when `None`.
    pub capture_layer: Option<String>,
}

impl ModelSpec {
    pub fn new(arch: Architecture, input_size: usize, classes: usize) -> Self {
        Self {
            topology: Topology::Preset(arch),
            input_size,
            classes,
            capture_layer: None,
        }
    }

    pub fn custom(layers: Vec<LayerSpec>, input_size: usize, classes: usize) -> Self {
        Self {
            topology: Topology::Custom(layers),
            input_size,
            classes,
            capture_layer: None,
        }
    }

    pub fn with_capture(mut self, layer: &str) -> Self {
        self.capture_layer = Some(layer.to_string());
        self
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        match &self.topology {
            Topology::Preset(a) => a.layers(self.classes),
            Topology::Custom(l) => l.clone(),
        }
    }

    pub fn conv_names(&self) -> Vec<String> {
        let n = self
            .layers()
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count();
        (1..=n).map(|i| format!("conv{i}")).collect()
    }

    /// Capture layer after defaulting; `None` for models without convolutions.
    pub fn capture(&self) -> Option<String> {
        self.capture_layer
            .clone()
            .or_else(|| self.conv_names().last().cloned())
    }

    /// Output shape of every layer for a `[3, size, size]` input.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![3, self.input_size, self.input_size];
        let mut out = Vec::new();
        for layer in self.layers() {
            shape = match layer {
                LayerSpec::Conv { out_channels, kernel } => {
                    if kernel % 2 == 0 || out_channels == 0 || shape.len() != 3 {
                        return Err(Error::Config(format!("invalid conv layer {layer:?} on {shape:?}")));
                    }
                    vec![out_channels, shape[1], shape[2]]
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::Config(format!("cannot pool a {shape:?} map")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(Error::Config("global pool needs a [C, H, W] map".into()));
                    }
                    vec![shape[0]]
                }
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return Err(Error::Config("dense layer with no outputs".into()));
                    }
                    vec![out]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("class count must be >= 2, got {}", self.classes)));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        let shapes = self.shapes()?;
        match shapes.last() {
            Some(s) if s.as_slice() == [self.classes] => {}
            other => {
                return Err(Error::Config(format!(
                    "network output {other:?} does not match {} classes",
                    self.classes
                )))
            }
        }
        if let Some(layer) = &self.capture_layer {
            if !self.conv_names().contains(layer) {
                return Err(Error::UnknownLayer(layer.clone()));
            }
        }
        Ok(())
    }

    /// Spatial size `(h, w)` of a convolution's output.
    pub fn conv_output_size(&self, layer: &str) -> Result<(usize, usize)> {
        let shapes = self.shapes()?;
        let mut conv_idx = 0;
        for (spec, shape) in self.layers().iter().zip(&shapes) {
            if let LayerSpec::Conv { .. } = spec {
                conv_idx += 1;
                if format!("conv{conv_idx}") == layer {
                    return Ok((shape[1], shape[2]));
                }
            }
        }
        Err(Error::UnknownLayer(layer.to_string()))
    }
}

/// What the recorded forward pass should make differentiable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// Parameters are leaves; used for training.
    Parameters,
    /// The input image is a leaf and parameters are constants; used for
    /// attribution.
    Input,
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub input: Var,
    pub params: Vec<Var>,
    pub logits: Var,
    pub captured: Option<Var>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits).expect("logits recorded")
    }

    pub fn captured(&self) -> Option<&Tensor> {
        self.captured.map(|v| self.tape.value(v).expect("capture recorded"))
    }

    /// Records the score of `class` as a scalar node.
    pub fn class_score(&mut self, class: usize) -> Result<Var> {
        self.tape.pick(self.logits, class)
    }
}

/// A network description together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    weights: ModelWeights,
}

/// Mini-batch SGD settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.05,
            batch: 32,
        }
    }
}

impl Model {
    /// He-uniform weights and zero biases drawn from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = seed::rng_for(seed, &[0x1A1E]);
        let mut tensors = Vec::new();
        let mut shape = vec![3usize, spec.input_size, spec.input_size];
        for layer in spec.layers() {
            match layer {
                LayerSpec::Conv { out_channels, kernel } => {
                    let fan_in = shape[0] * kernel * kernel;
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let data = (0..out_channels * fan_in)
                        .map(|_| rng.random_range(-limit..limit))
                        .collect();
                    tensors.push(Tensor::new(vec![out_channels, shape[0], kernel, kernel], data)?);
                    tensors.push(Tensor::zeros(&[out_channels]));
                    shape = vec![out_channels, shape[1], shape[2]];
                }
                LayerSpec::Dense { out } => {
                    let fan_in: usize = shape.iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let data = (0..out * fan_in).map(|_| rng.random_range(-limit..limit)).collect();
                    tensors.push(Tensor::new(vec![out, fan_in], data)?);
                    tensors.push(Tensor::zeros(&[out]));
                    shape = vec![out];
                }
                LayerSpec::MaxPool => shape = vec![shape[0], shape[1] / 2, shape[2] / 2],
                LayerSpec::GlobalAvgPool => shape = vec![shape[0]],
                LayerSpec::Relu => {}
            }
        }
        Ok(Model {
            spec,
            weights: ModelWeights::new(tensors),
        })
    }

    /// Pairs a spec with existing weights, checking their shapes.
    pub fn from_weights(spec: ModelSpec, weights: ModelWeights) -> Result<Model> {
        let template = Model::build(spec.clone(), 0)?;
        template.weights.ensure_congruent(&weights, "model weights")?;
        Ok(Model { spec, weights })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    pub fn with_weights(&self, weights: ModelWeights) -> Result<Model> {
        self.weights.ensure_congruent(&weights, "model weights")?;
        Ok(Model {
            spec: self.spec.clone(),
            weights,
        })
    }

    /// Runs the network on `input`, recording every operation. `capture`
    /// names the convolution whose post-ReLU output is exposed (or the
    /// pre-activation output when no ReLU follows it).
    pub fn forward(&self, input: &Image, capture: Option<&str>, target: GradTarget) -> Result<ForwardPass> {
        let n = self.spec.input_size;
        if input.height() != n || input.width() != n {
            return Err(Error::ShapeMismatch {
                context: "model input",
                expected: vec![n, n, 3],
                actual: vec![input.height(), input.width(), 3],
            });
        }
        let layers = self.spec.layers();
        if let Some(name) = capture {
            if !self.spec.conv_names().iter().any(|c| c == name) {
                return Err(Error::UnknownLayer(name.to_string()));
            }
        }
        let mut tape = Tape::new();
        let x = match target {
            GradTarget::Input => tape.leaf(input.to_chw()),
            GradTarget::Parameters => tape.constant(input.to_chw()),
        };
        let params: Vec<Var> = self
            .weights
            .tensors()
            .iter()
            .map(|t| match target {
                GradTarget::Parameters => tape.leaf(t.clone()),
                GradTarget::Input => tape.constant(t.clone()),
            })
            .collect();

        let mut cur = x;
        let mut p = 0;
        let mut conv_idx = 0;
        let mut captured = None;
        let mut pending_capture = false;
        for layer in &layers {
            if pending_capture && !matches!(layer, LayerSpec::Relu) {
                captured = Some(cur);
                pending_capture = false;
            }
            cur = match layer {
                LayerSpec::Conv { .. } => {
                    let v = tape.conv2d(cur, params[p], params[p + 1])?;
                    p += 2;
                    conv_idx += 1;
                    if capture == Some(format!("conv{conv_idx}").as_str()) {
                        pending_capture = true;
                    }
                    v
                }
                LayerSpec::Relu => {
                    let v = tape.relu(cur)?;
                    if pending_capture {
                        captured = Some(v);
                        pending_capture = false;
                    }
                    v
                }
                LayerSpec::MaxPool => tape.max_pool2(cur)?,
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(cur)?,
                LayerSpec::Dense { .. } => {
                    let v = tape.dense(cur, params[p], params[p + 1])?;
                    p += 2;
                    v
                }
            };
        }
        if pending_capture {
            captured = Some(cur);
        }
        Ok(ForwardPass {
            tape,
            input: x,
            params,
            logits: cur,
            captured,
        })
    }

    /// Forward pass capturing the spec's capture layer, input differentiable.
    pub fn forward_for_attribution(&self, input: &Image) -> Result<ForwardPass> {
        let capture = self.spec.capture();
        self.forward(input, capture.as_deref(), GradTarget::Input)
    }

    pub fn logits(&self, x: &Image) -> Result<Tensor> {
        let pass = self.forward(x, None, GradTarget::Input)?;
        Ok(pass.logits().clone())
    }

    /// Arg-max class (ties toward the lower index) and the logits.
    pub fn predict(&self, x: &Image) -> Result<(usize, Tensor)> {
        let logits = self.logits(x)?;
        Ok((logits.argmax(), logits))
    }

    pub fn predict_label(&self, x: &Image) -> Result<usize> {
        Ok(self.predict(x)?.0)
    }

    /// Cross-entropy loss and its parameter gradients for one sample.
    pub fn loss_and_gradients(&self, x: &Image, label: usize) -> Result<(f64, ModelWeights)> {
        let mut pass = self.forward(x, None, GradTarget::Parameters)?;
        let loss = pass.tape.softmax_cross_entropy(pass.logits, label)?;
        let grads = pass.tape.backward(loss)?;
        let tensors = pass
            .params
            .iter()
            .map(|&v| grads.get(&pass.tape, v))
            .collect::<Result<Vec<_>>>()?;
        let value = pass.tape.value(loss)?.item().expect("scalar loss");
        Ok((value, ModelWeights::new(tensors)))
    }

    /// Shuffled mini-batch SGD. The visiting order of epoch `e` depends only
    /// on `(seed, e)`.
    pub fn train(&self, data: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<Model> {
        if data.is_empty() {
            return Err(Error::Empty("training dataset"));
        }
        if cfg.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if let Some(bad) = data.iter().find(|s| s.label >= self.spec.classes) {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                bad.label, self.spec.classes
            )));
        }
        let mut weights = self.weights.clone();
        let n_params = weights.param_count();
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut seed::rng_for(seed, &[u64::from(epoch)]));
            for batch in order.chunks(cfg.batch) {
                let current = Model {
                    spec: self.spec.clone(),
                    weights,
                };
                let mut acc = vec![0.0; n_params];
                for &i in batch {
                    let (_, g) = current.loss_and_gradients(&data[i].image, data[i].label)?;
                    for (a, v) in acc.iter_mut().zip(g.flatten()) {
                        *a += v;
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                acc.iter_mut().for_each(|a| *a *= scale);
                let grads = current.weights.with_flat(&acc)?;
                weights = sgd_step(&current.weights, &grads, cfg.lr)?;
                if weights.tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                    return Err(Error::Numerical("non-finite weights during training".into()));
                }
            }
        }
        Ok(Model {
            spec: self.spec.clone(),
            weights,
        })
    }

    /// Fraction of samples classified correctly.
    pub fn accuracy(&self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation dataset"));
        }
        let mut correct = 0usize;
        for s in data {
            if self.predict_label(&s.image)? == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}
