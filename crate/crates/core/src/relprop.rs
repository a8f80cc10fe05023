//! Relevance propagation: the z+ and z-beta redistribution rules, the
//! resolution-lifting walk from the last convolutional layer down to a target
//! layer, the full fine-grained CAM pipeline, and plain LRP.
//!
//! All redistribution arithmetic runs in `f64`. Output neurons whose positive
//! pre-activation `z_j` is not strictly positive donate no relevance; the others
//! divide by `z_j + EPSILON`. Biases never enter the denominators.

use crate::cam::{explanation_components, gradcam_weights, scorecam_weights, RelevanceStack};
use crate::denoise::{denoise_components, DEFAULT_KEEP_FRACTION};
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, LayerKind, LayerSpec, ModelGraph, Preprocessing, INPUT_LAYER};
use crate::tensor::{self, ArgmaxIndices, ConvGeom, PoolGeom, Tensor};

pub const EPSILON: f64 = 1e-9;

/// Per-channel bounds `[lower, upper]` of the network input, in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDomain {
    pub lower: Vec<f32>,
    pub upper: Vec<f32>,
}

impl InputDomain {
    pub fn new(lower: Vec<f32>, upper: Vec<f32>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidArgument(format!(
                "domain bounds differ in length: {} vs {}",
                lower.len(),
                upper.len()
            )));
        }
        if let Some(c) = (0..lower.len())
            .find(|&c| lower[c].is_nan() || upper[c].is_nan() || lower[c] >= upper[c])
        {
            return Err(Error::InvalidArgument(format!(
                "domain channel {c}: lower bound {} is not below upper bound {}",
                lower[c], upper[c]
            )));
        }
        Ok(InputDomain { lower, upper })
    }

    /// Image of `[0, 1]` under the model's per-channel normalization.
    pub fn from_preprocessing(pre: &Preprocessing) -> Result<Self> {
        let lower = pre
            .mean
            .iter()
            .zip(&pre.std)
            .map(|(m, s)| (0.0 - m) / s)
            .collect();
        let upper = pre
            .mean
            .iter()
            .zip(&pre.std)
            .map(|(m, s)| (1.0 - m) / s)
            .collect();
        Self::new(lower, upper)
    }
}

/// Single-channel importance map.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    /// Layer the map lives at, or `"input"`.
    pub layer: String,
    /// `[h, w]`
    pub map: Tensor,
    /// Whether negative values are meaningful (no final ReLU was applied).
    pub signed: bool,
}

/// `s_j = I_j / (z_j + eps)` for `z_j > 0`, zero otherwise.
fn donation_ratios(z: &[f64], relevance: &[f32]) -> Vec<f64> {
    z.iter()
        .zip(relevance)
        .map(|(&zj, &rj)| {
            if zj > 0.0 {
                f64::from(rj) / (zj + EPSILON)
            } else {
                0.0
            }
        })
        .collect()
}

fn positive_part(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&w| f64::from(w.max(0.0))).collect()
}

fn negative_part(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&w| f64::from(w.min(0.0))).collect()
}

/// `y = W x` for a row-major `[m, n]` matrix.
fn matvec(w: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    w.chunks(n)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `x = W^T y` for a row-major `[m, n]` matrix.
fn matvec_t(w: &[f64], n: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0f64; n];
    for (row, &yj) in w.chunks(n).zip(y) {
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += wij * yj;
        }
    }
    out
}

fn check_relevance(layer: &LayerSpec, expected: &[usize], relevance: &Tensor) -> Result<()> {
    if relevance.len() != expected.iter().product::<usize>() {
        return Err(Error::shape(
            "relevance",
            format!(
                "layer `{}` produces {expected:?} but relevance has shape {:?}",
                layer.name,
                relevance.shape()
            ),
        ));
    }
    Ok(())
}

/// z+ redistribution through one conv, linear, average-pool, flatten or relu
/// layer. `input_activation` is the traced input of the layer.
pub fn zplus_layer(
    layer: &LayerSpec,
    input_activation: &Tensor,
    relevance_out: &Tensor,
) -> Result<Tensor> {
    let in_shape = input_activation.shape().to_vec();
    let x = input_activation.to_f64();
    let out = match &layer.kind {
        LayerKind::Conv2d(p) => {
            let geom = ConvGeom::new(
                input_activation.dims3()?,
                p.weight.shape(),
                p.stride,
                p.padding,
            )?;
            check_relevance(layer, &[geom.c_out, geom.ho, geom.wo], relevance_out)?;
            let wp = positive_part(&p.weight);
            let z = geom.forward(&x, &wp, None);
            let s = donation_ratios(&z, relevance_out.data());
            let c = geom.transpose(&s, &wp);
            x.iter().zip(&c).map(|(a, b)| a * b).collect::<Vec<_>>()
        }
        LayerKind::Linear(p) => {
            let [m, n] = *p.weight.shape() else {
                return Err(Error::shape("zplus_layer", "linear weights must be rank 2"));
            };
            if x.len() != n {
                return Err(Error::shape(
                    "zplus_layer",
                    format!(
                        "linear `{}` expects {n} inputs, activation has {}",
                        layer.name,
                        x.len()
                    ),
                ));
            }
            check_relevance(layer, &[m], relevance_out)?;
            let wp = positive_part(&p.weight);
            let z = matvec(&wp, n, &x);
            let s = donation_ratios(&z, relevance_out.data());
            let c = matvec_t(&wp, n, &s);
            x.iter().zip(&c).map(|(a, b)| a * b).collect()
        }
        LayerKind::AvgPool2d(p) => {
            let geom = PoolGeom::new("avgpool2d", input_activation.dims3()?, p.kernel, p.stride)?;
            check_relevance(layer, &[geom.c, geom.ho, geom.wo], relevance_out)?;
            let z = geom.avg_forward(&x);
            let s = donation_ratios(&z, relevance_out.data());
            let c = geom.avg_transpose(&s);
            x.iter().zip(&c).map(|(a, b)| a * b).collect()
        }
        LayerKind::Flatten | LayerKind::Relu => {
            check_relevance(layer, &in_shape, relevance_out)?;
            return relevance_out.clone().reshape(in_shape);
        }
        LayerKind::MaxPool2d(_) => {
            return Err(Error::UnsupportedStructure(format!(
                "max pool `{}` routes relevance through its argmax, not z+",
                layer.name
            )))
        }
        LayerKind::BatchNorm2d(_) => {
            return Err(Error::UnsupportedStructure(format!(
                "batchnorm `{}` must be folded before relevance propagation",
                layer.name
            )))
        }
    };
    Tensor::from_f64(in_shape, &out)
}

/// Winner-take-all routing: each pooled cell hands its relevance to the input
/// position that won the max.
pub fn maxpool_route(indices: &ArgmaxIndices, relevance_out: &Tensor) -> Result<Tensor> {
    if relevance_out.len() != indices.indices.len() {
        return Err(Error::shape(
            "maxpool_route",
            format!(
                "{} pooled cells but relevance has shape {:?}",
                indices.indices.len(),
                relevance_out.shape()
            ),
        ));
    }
    let n: usize = indices.input_shape.iter().product();
    let mut out = vec![0f64; n];
    for (&src, &r) in indices.indices.iter().zip(relevance_out.data()) {
        out[src] += f64::from(r);
    }
    Tensor::from_f64(indices.input_shape.clone(), &out)
}

/// z-beta redistribution onto the network input through the first weighted
/// layer (conv, or linear over the flattened image). `input_image` is the
/// preprocessed `[C, H, W]` input.
pub fn zbeta_input(
    layer: &LayerSpec,
    input_image: &Tensor,
    domain: &InputDomain,
    relevance_out: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = input_image.dims3()?;
    if domain.lower.len() != c {
        return Err(Error::shape(
            "zbeta_input",
            format!("domain has {} channels, image has {c}", domain.lower.len()),
        ));
    }
    // also re-checks lower < upper
    InputDomain::new(domain.lower.clone(), domain.upper.clone())?;
    let plane = h * w;
    let x = input_image.to_f64();
    let lower: Vec<f64> = (0..c * plane)
        .map(|i| f64::from(domain.lower[i / plane]))
        .collect();
    let upper: Vec<f64> = (0..c * plane)
        .map(|i| f64::from(domain.upper[i / plane]))
        .collect();

    let combine = |xc: Vec<f64>, lc: Vec<f64>, uc: Vec<f64>| -> Vec<f64> {
        (0..x.len())
            .map(|i| x[i] * xc[i] - lower[i] * lc[i] - upper[i] * uc[i])
            .collect()
    };
    let out = match &layer.kind {
        LayerKind::Conv2d(p) => {
            let geom = ConvGeom::new((c, h, w), p.weight.shape(), p.stride, p.padding)?;
            check_relevance(layer, &[geom.c_out, geom.ho, geom.wo], relevance_out)?;
            let wf = p.weight.to_f64();
            let wp = positive_part(&p.weight);
            let wn = negative_part(&p.weight);
            let zx = geom.forward(&x, &wf, None);
            let zl = geom.forward(&lower, &wp, None);
            let zu = geom.forward(&upper, &wn, None);
            let z: Vec<f64> = (0..zx.len()).map(|j| zx[j] - zl[j] - zu[j]).collect();
            let s = donation_ratios(&z, relevance_out.data());
            combine(
                geom.transpose(&s, &wf),
                geom.transpose(&s, &wp),
                geom.transpose(&s, &wn),
            )
        }
        LayerKind::Linear(p) => {
            let [m, n] = *p.weight.shape() else {
                return Err(Error::shape("zbeta_input", "linear weights must be rank 2"));
            };
            if n != x.len() {
                return Err(Error::shape(
                    "zbeta_input",
                    format!(
                        "linear `{}` expects {n} inputs, image has {}",
                        layer.name,
                        x.len()
                    ),
                ));
            }
            check_relevance(layer, &[m], relevance_out)?;
            let wf = p.weight.to_f64();
            let wp = positive_part(&p.weight);
            let wn = negative_part(&p.weight);
            let zx = matvec(&wf, n, &x);
            let zl = matvec(&wp, n, &lower);
            let zu = matvec(&wn, n, &upper);
            let z: Vec<f64> = (0..m).map(|j| zx[j] - zl[j] - zu[j]).collect();
            let s = donation_ratios(&z, relevance_out.data());
            combine(
                matvec_t(&wf, n, &s),
                matvec_t(&wp, n, &s),
                matvec_t(&wn, n, &s),
            )
        }
        _ => {
            return Err(Error::UnsupportedStructure(format!(
                "z-beta applies to a conv2d or linear input layer, `{}` is {}",
                layer.name,
                layer.kind.tag()
            )))
        }
    };
    Tensor::from_f64(vec![c, h, w], &out)
}

/// Where a propagation walk stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stop {
    Input,
    /// Relevance is wanted at the output of this layer.
    Layer(usize),
}

fn resolve_target(model: &ModelGraph, name: &str) -> Result<Stop> {
    if name == INPUT_LAYER {
        Ok(Stop::Input)
    } else {
        Ok(Stop::Layer(model.layer_index(name)?))
    }
}

/// Move relevance held at the output of layer `from` down to `stop`.
fn propagate(
    model: &ModelGraph,
    trace: &ActivationTrace,
    from: usize,
    relevance: Tensor,
    stop: Stop,
    domain: &InputDomain,
) -> Result<Tensor> {
    let layers = model.layers();
    let first_weighted = layers
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Conv2d(_) | LayerKind::Linear(_)));
    let lowest = match stop {
        Stop::Input => 0,
        Stop::Layer(t) => t + 1,
    };
    let mut rel = relevance;
    for k in (lowest..=from).rev() {
        let layer = &layers[k];
        if stop == Stop::Input && Some(k) == first_weighted {
            if let Some(blocker) = layers[..k]
                .iter()
                .find(|l| !matches!(l.kind, LayerKind::Flatten | LayerKind::Relu))
            {
                return Err(Error::UnsupportedStructure(format!(
                    "layer `{}` sits between the input and the first weighted layer",
                    blocker.name
                )));
            }
            return zbeta_input(layer, trace.input(), domain, &rel);
        }
        rel = match &layer.kind {
            LayerKind::MaxPool2d(_) => {
                let routing = trace.argmax_at(k).ok_or_else(|| {
                    Error::InvalidArgument(format!("trace holds no argmax for `{}`", layer.name))
                })?;
                maxpool_route(routing, &rel)?
            }
            _ => zplus_layer(layer, trace.input_at(k), &rel)?,
        };
    }
    Ok(rel)
}

/// Lift components held at the last convolutional feature layer to
/// `target_layer` (a layer at or before it, or `"input"`).
pub fn improve_resolution(
    model: &ModelGraph,
    trace: &ActivationTrace,
    components: &RelevanceStack,
    target_layer: &str,
    domain: &InputDomain,
) -> Result<RelevanceStack> {
    let from = trace.index_of(&components.layer)?;
    let stop = resolve_target(model, target_layer)?;
    if let Stop::Layer(t) = stop {
        if t > from {
            return Err(Error::InvalidArgument(format!(
                "target `{target_layer}` comes after `{}` in the graph",
                components.layer
            )));
        }
    }
    let values = propagate(model, trace, from, components.values.clone(), stop, domain)?;
    Ok(RelevanceStack::new(target_layer, values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamBackend {
    Grad,
    Score,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgCamOptions {
    pub backend: CamBackend,
    /// Layer name or `"input"`.
    pub target_layer: String,
    pub denoise: bool,
    pub keep_fraction: f64,
    /// Skip the final ReLU.
    pub signed: bool,
}

impl FgCamOptions {
    pub fn new(backend: CamBackend, target_layer: impl Into<String>) -> Self {
        FgCamOptions {
            backend,
            target_layer: target_layer.into(),
            denoise: false,
            keep_fraction: DEFAULT_KEEP_FRACTION,
            signed: false,
        }
    }
}

/// Fine-grained CAM: channel weights and components at the last convolutional
/// feature layer, optional low-rank denoising, relevance lifting to the target
/// layer, then a channel sum (and ReLU unless `signed`).
pub fn fg_cam_explain(
    model: &ModelGraph,
    trace: &ActivationTrace,
    input_image: &Tensor,
    class_index: usize,
    options: &FgCamOptions,
) -> Result<Explanation> {
    let feature_layer = model.feature_layer_name()?;
    let weights = match options.backend {
        CamBackend::Grad => gradcam_weights(model, trace, class_index)?,
        CamBackend::Score => scorecam_weights(model, trace, input_image, class_index)?,
    };
    let mut components = explanation_components(&weights, trace, feature_layer)?;
    if options.denoise {
        components = denoise_components(&components, options.keep_fraction)?;
    }
    let domain = InputDomain::from_preprocessing(model.preprocessing())?;
    let lifted = improve_resolution(model, trace, &components, &options.target_layer, &domain)?;
    finish(&options.target_layer, &lifted.values, options.signed)
}

fn finish(layer: &str, values: &Tensor, signed: bool) -> Result<Explanation> {
    let summed = values.channel_sum()?;
    Ok(Explanation {
        layer: layer.to_string(),
        map: if signed {
            summed
        } else {
            tensor::relu(&summed)
        },
        signed,
    })
}

/// Layer-wise relevance propagation from the class logit to the input: z+ in
/// hidden layers, z-beta at the input layer.
pub fn lrp_explain(
    model: &ModelGraph,
    trace: &ActivationTrace,
    class_index: usize,
    signed: bool,
) -> Result<Explanation> {
    if class_index >= model.class_count() {
        return Err(Error::ClassOutOfRange {
            class: class_index,
            count: model.class_count(),
        });
    }
    let last = model.layers().len() - 1;
    let logits = trace.output_at(last);
    let mut init = vec![0f32; logits.len()];
    init[class_index] = logits.data()[class_index];
    let relevance = Tensor::new(logits.shape().to_vec(), init)?;
    let domain = InputDomain::from_preprocessing(model.preprocessing())?;
    let values = propagate(model, trace, last, relevance, Stop::Input, &domain)?;
    finish(INPUT_LAYER, &values, signed)
}
