//! Sequential CNN graphs, batchnorm folding and traced forward execution.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{self, ArgmaxIndices, PoolGeom, Tensor};

/// Name used to refer to the network input wherever a layer name is expected.
pub const INPUT_LAYER: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    /// `[C_out, C_in, kH, kW]`
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    /// Per-channel `(scale, shift)` such that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> Vec<(f32, f32)> {
        (0..self.gamma.len())
            .map(|c| {
                let scale = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
                (scale, self.beta[c] - self.running_mean[c] * scale)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d(Conv2dParams),
    BatchNorm2d(BatchNormParams),
    Relu,
    MaxPool2d(PoolParams),
    AvgPool2d(PoolParams),
    Flatten,
    Linear(LinearParams),
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::BatchNorm2d(_) => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d(_) => "maxpool2d",
            LayerKind::AvgPool2d(_) => "avgpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear(_) => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    /// Statically computed output shape, or a description of why the layer
    /// cannot accept `input`.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let spatial = |what: &str| -> std::result::Result<(usize, usize, usize), String> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(format!("{what} needs a [C, H, W] input, got {input:?}")),
            }
        };
        match &self.kind {
            LayerKind::Conv2d(p) => {
                let ws = p.weight.shape();
                if ws.len() != 4 {
                    return Err(format!("conv weights must be rank 4, got {ws:?}"));
                }
                if p.bias.len() != ws[0] {
                    return Err(format!(
                        "bias length {} for {} filters",
                        p.bias.len(),
                        ws[0]
                    ));
                }
                let geom = tensor::ConvGeom::new(spatial("conv2d")?, ws, p.stride, p.padding)
                    .map_err(|e| e.to_string())?;
                Ok(vec![geom.c_out, geom.ho, geom.wo])
            }
            LayerKind::BatchNorm2d(p) => {
                let (c, _, _) = spatial("batchnorm2d")?;
                let lens = [
                    p.gamma.len(),
                    p.beta.len(),
                    p.running_mean.len(),
                    p.running_var.len(),
                ];
                if lens.iter().any(|&l| l != c) {
                    return Err(format!(
                        "batchnorm vectors {lens:?} must all have length {c}"
                    ));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d(p) | LayerKind::AvgPool2d(p) => {
                let geom = PoolGeom::new("pool", spatial(self.kind.tag())?, p.kernel, p.stride)
                    .map_err(|e| e.to_string())?;
                Ok(vec![geom.c, geom.ho, geom.wo])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Linear(p) => {
                let ws = p.weight.shape();
                let [m, n] = *ws else {
                    return Err(format!("linear weights must be rank 2, got {ws:?}"));
                };
                if p.bias.len() != m {
                    return Err(format!("bias length {} for {m} outputs", p.bias.len()));
                }
                match *input {
                    [k] if k == n => Ok(vec![m]),
                    [k] => Err(format!("linear expects {n} inputs, got {k}")),
                    _ => Err(format!(
                        "linear needs a flat input, got {input:?} (missing flatten?)"
                    )),
                }
            }
        }
    }

    /// Run the layer; max pools also return their argmax routing.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Option<ArgmaxIndices>)> {
        let out = match &self.kind {
            LayerKind::Conv2d(p) => tensor::conv2d(x, &p.weight, &p.bias, p.stride, p.padding)?,
            LayerKind::BatchNorm2d(p) => {
                let (c, h, w) = x.dims3()?;
                if p.gamma.len() != c {
                    return Err(Error::shape(
                        "batchnorm2d",
                        format!("{c} channels vs {}", p.gamma.len()),
                    ));
                }
                let affine = p.affine();
                let mut data = x.data().to_vec();
                for (ch, plane) in data.chunks_mut(h * w).enumerate() {
                    let (s, b) = affine[ch];
                    plane.iter_mut().for_each(|v| *v = *v * s + b);
                }
                Tensor::new(vec![c, h, w], data)?
            }
            LayerKind::Relu => tensor::relu(x),
            LayerKind::MaxPool2d(p) => {
                let (y, idx) = tensor::maxpool2d(x, p.kernel, p.stride)?;
                return Ok((y, Some(idx)));
            }
            LayerKind::AvgPool2d(p) => tensor::avgpool2d(x, p.kernel, p.stride)?,
            LayerKind::Flatten => x.clone().reshape(vec![x.len()])?,
            LayerKind::Linear(p) => {
                if x.rank() != 1 {
                    return Err(Error::shape(
                        "linear",
                        format!(
                            "layer `{}` needs a flat input, got {:?}",
                            self.name,
                            x.shape()
                        ),
                    ));
                }
                Tensor::vector(tensor::linear(x.data(), &p.weight, &p.bias)?)?
            }
        };
        Ok((out, None))
    }
}

/// Per-channel normalization applied to `[0, 1]` images before the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Preprocessing {
    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        let (c, h, w) = raw.dims3()?;
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::shape(
                "preprocess",
                format!(
                    "{c} channels vs mean/std of length {}/{}",
                    self.mean.len(),
                    self.std.len()
                ),
            ));
        }
        let mut data = raw.data().to_vec();
        for (ch, plane) in data.chunks_mut(h * w).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Tensor::new(vec![c, h, w], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    input_shape: [usize; 3],
    class_count: usize,
    preprocessing: Preprocessing,
}

impl ModelGraph {
    /// Assemble a graph without checking it; see [`validate_model`].
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: [usize; 3],
        class_count: usize,
        preprocessing: Preprocessing,
    ) -> Self {
        ModelGraph {
            layers,
            input_shape,
            class_count,
            preprocessing,
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::BatchNorm2d(_)))
    }

    /// Index of the deepest `conv2d` layer.
    pub fn last_conv_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Conv2d(_)))
    }

    /// Index of the layer whose output holds the activated feature maps of the
    /// last convolution: the last `conv2d` together with any batchnorm / relu
    /// directly following it.
    pub fn feature_layer_index(&self) -> Result<usize> {
        let mut idx = self
            .last_conv_index()
            .ok_or_else(|| Error::InvalidModel("model has no conv2d layer".into()))?;
        while let Some(next) = self.layers.get(idx + 1) {
            match next.kind {
                LayerKind::Relu | LayerKind::BatchNorm2d(_) => idx += 1,
                _ => break,
            }
        }
        Ok(idx)
    }

    pub fn feature_layer_name(&self) -> Result<&str> {
        Ok(&self.layers[self.feature_layer_index()?].name)
    }

    /// Output shape of every layer, in order.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer
                .output_shape(&shape)
                .map_err(|detail| Error::FgmShape {
                    layer: layer.name.clone(),
                    detail,
                })?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(Error::shape(
                "forward",
                format!(
                    "model expects input {:?}, got {:?}",
                    self.input_shape,
                    input.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Run layers `start..` on `activation`, which must be the input of layer `start`.
    pub fn forward_from(&self, start: usize, activation: &Tensor) -> Result<Tensor> {
        let mut x = activation.clone();
        for layer in &self.layers[start..] {
            x = layer.forward(&x)?.0;
        }
        Ok(x)
    }

    /// Class logits for a preprocessed input.
    pub fn logits(&self, input: &Tensor) -> Result<Vec<f32>> {
        self.check_input(input)?;
        Ok(self.forward_from(0, input)?.into_data())
    }

    /// Softmax probabilities for a preprocessed input.
    pub fn probabilities(&self, input: &Tensor) -> Result<Vec<f32>> {
        Ok(tensor::softmax(&self.logits(input)?))
    }
}

/// A validation finding: which layer (if any) violates which rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub layer: Option<String>,
    pub rule: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.layer {
            Some(layer) => write!(f, "layer `{layer}`: {}", self.rule),
            None => write!(f, "model: {}", self.rule),
        }
    }
}

pub fn validate_model(model: &ModelGraph) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut push = |layer: Option<&str>, rule: String| {
        findings.push(Finding {
            layer: layer.map(str::to_string),
            rule,
        })
    };

    if model.input_shape.contains(&0) {
        push(
            None,
            format!("input shape {:?} has a zero dimension", model.input_shape),
        );
    }
    let channels = model.input_shape[0];
    let pre = &model.preprocessing;
    if pre.mean.len() != channels || pre.std.len() != channels {
        push(
            None,
            format!(
                "preprocessing mean/std lengths {}/{} do not match {channels} input channels",
                pre.mean.len(),
                pre.std.len()
            ),
        );
    }
    if pre.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
        push(None, "preprocessing std must be positive".into());
    }
    if model.layers.is_empty() {
        push(None, "model has no layers".into());
        return findings;
    }

    let mut seen = HashSet::new();
    for layer in &model.layers {
        if layer.name.is_empty() {
            push(None, "layer with empty name".into());
        } else if layer.name == INPUT_LAYER {
            push(
                Some(&layer.name),
                format!("`{INPUT_LAYER}` is a reserved layer name"),
            );
        } else if !seen.insert(layer.name.as_str()) {
            push(Some(&layer.name), "duplicate layer name".into());
        }
    }

    if model.last_conv_index().is_none() {
        push(None, "model has no conv2d layer".into());
    }

    let mut shape = model.input_shape.to_vec();
    for layer in &model.layers {
        match layer.output_shape(&shape) {
            Ok(next) => shape = next,
            Err(rule) => {
                push(Some(&layer.name), rule);
                return findings;
            }
        }
    }

    let linears = model
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Linear(_)))
        .count();
    let last = model.layers.last().unwrap();
    match &last.kind {
        LayerKind::Linear(p) if p.weight.shape()[0] == model.class_count => {}
        LayerKind::Linear(p) => push(
            Some(&last.name),
            format!(
                "final linear produces {} outputs, model declares {} classes",
                p.weight.shape()[0],
                model.class_count
            ),
        ),
        _ => push(Some(&last.name), "final layer must be linear".into()),
    }
    if linears == 0 {
        push(None, "model has no linear layer".into());
    }
    findings
}

/// Fold every `conv2d -> batchnorm2d` pair into a single convolution.
pub fn fold_batchnorm(model: &ModelGraph) -> Result<ModelGraph> {
    let mut layers: Vec<LayerSpec> = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let LayerKind::BatchNorm2d(bn) = &layer.kind else {
            layers.push(layer.clone());
            continue;
        };
        let Some(LayerSpec {
            kind: LayerKind::Conv2d(conv),
            ..
        }) = layers.last_mut()
        else {
            return Err(Error::UnsupportedStructure(format!(
                "batchnorm `{}` is not directly preceded by a conv2d",
                layer.name
            )));
        };
        let c_out = conv.weight.shape()[0];
        if bn.gamma.len() != c_out {
            return Err(Error::FgmShape {
                layer: layer.name.clone(),
                detail: format!(
                    "{} batchnorm channels after {c_out} filters",
                    bn.gamma.len()
                ),
            });
        }
        let per_filter = conv.weight.len() / c_out;
        for (o, (scale, _)) in bn.affine().into_iter().enumerate() {
            conv.weight.data_mut()[o * per_filter..(o + 1) * per_filter]
                .iter_mut()
                .for_each(|w| *w *= scale);
            conv.bias[o] = (conv.bias[o] - bn.running_mean[o]) * scale + bn.beta[o];
        }
    }
    Ok(ModelGraph {
        layers,
        ..model.clone()
    })
}

/// Every intermediate activation of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    input: Tensor,
    names: Vec<String>,
    outputs: Vec<Tensor>,
    argmax: Vec<Option<ArgmaxIndices>>,
    logits: Vec<f32>,
}

impl ActivationTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Output of layer `index`.
    pub fn output_at(&self, index: usize) -> &Tensor {
        &self.outputs[index]
    }

    /// Input of layer `index` (the network input for layer 0).
    pub fn input_at(&self, index: usize) -> &Tensor {
        match index {
            0 => &self.input,
            i => &self.outputs[i - 1],
        }
    }

    pub fn argmax_at(&self, index: usize) -> Option<&ArgmaxIndices> {
        self.argmax[index].as_ref()
    }

    /// Output of the named layer; `"input"` names the network input.
    pub fn output(&self, name: &str) -> Result<&Tensor> {
        if name == INPUT_LAYER {
            return Ok(&self.input);
        }
        Ok(&self.outputs[self.index_of(name)?])
    }

    /// Input of the named layer.
    pub fn layer_input(&self, name: &str) -> Result<&Tensor> {
        Ok(self.input_at(self.index_of(name)?))
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn forward_trace(model: &ModelGraph, input: &Tensor) -> Result<ActivationTrace> {
    model.check_input(input)?;
    let n = model.layers.len();
    let mut outputs = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for layer in &model.layers {
        let x = outputs.last().unwrap_or(input);
        let (y, idx) = layer.forward(x)?;
        outputs.push(y);
        argmax.push(idx);
    }
    let logits = outputs
        .last()
        .map(|t: &Tensor| t.data().to_vec())
        .unwrap_or_default();
    Ok(ActivationTrace {
        input: input.clone(),
        names: model.layers.iter().map(|l| l.name.clone()).collect(),
        outputs,
        argmax,
        logits,
    })
}
