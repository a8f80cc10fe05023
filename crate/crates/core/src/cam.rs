//! Class activation map backends: Grad-CAM and Score-CAM channel weights,
//! Layer-CAM, and the per-channel explanation components the fine-grained
//! pipeline starts from.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grad::{backward_class_gradient, GradientRequest};
use crate::model::{ActivationTrace, ModelGraph};
use crate::relprop::Explanation;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum CamWeights {
    /// One weight per channel.
    Global(Vec<f32>),
    /// One weight per activation, shaped like the layer output.
    Pixelwise(Tensor),
}

impl CamWeights {
    pub fn global(&self) -> Result<&[f32]> {
        match self {
            CamWeights::Global(w) => Ok(w),
            CamWeights::Pixelwise(_) => Err(Error::InvalidArgument(
                "expected per-channel weights, got pixelwise weights".into(),
            )),
        }
    }
}

/// Per-neuron relevance at the output of `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceStack {
    pub layer: String,
    pub values: Tensor,
    pub signed: bool,
}

impl RelevanceStack {
    pub fn new(layer: impl Into<String>, values: Tensor) -> Self {
        let signed = values.data().iter().any(|&v| v < 0.0);
        RelevanceStack {
            layer: layer.into(),
            values,
            signed,
        }
    }
}

fn check_class(model: &ModelGraph, class_index: usize) -> Result<()> {
    if class_index >= model.class_count() {
        return Err(Error::ClassOutOfRange {
            class: class_index,
            count: model.class_count(),
        });
    }
    Ok(())
}

/// Grad-CAM weights at the last convolutional feature layer.
pub fn gradcam_weights(
    model: &ModelGraph,
    trace: &ActivationTrace,
    class_index: usize,
) -> Result<CamWeights> {
    gradcam_weights_at(model, trace, class_index, model.feature_layer_name()?)
}

/// Grad-CAM weights at an arbitrary spatial layer: the spatial mean of the
/// class-logit gradient per channel.
pub fn gradcam_weights_at(
    model: &ModelGraph,
    trace: &ActivationTrace,
    class_index: usize,
    layer: &str,
) -> Result<CamWeights> {
    let grad = backward_class_gradient(
        model,
        GradientRequest {
            class_index,
            target_layer: layer,
            trace,
        },
    )?;
    let (c, h, w) = grad.dims3()?;
    let plane = h * w;
    Ok(CamWeights::Global(
        (0..c)
            .map(|ch| {
                let s: f64 = grad.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum();
                (s / plane as f64) as f32
            })
            .collect(),
    ))
}

/// Score-CAM channel scores at `layer`: the class logit of the input masked by
/// each upsampled, min-max normalized channel.
pub fn scorecam_scores_at(
    model: &ModelGraph,
    trace: &ActivationTrace,
    input_image: &Tensor,
    class_index: usize,
    layer: &str,
) -> Result<Vec<f32>> {
    check_class(model, class_index)?;
    let activation = trace.output(layer)?;
    let (c, h, w) = activation.dims3()?;
    let (ci, hi, wi) = input_image.dims3()?;
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let plane = Tensor::new(
                vec![1, h, w],
                activation.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
            )?;
            let mask = tensor::minmax_normalize(&tensor::bilinear_resize(&plane, hi, wi)?);
            let mut masked = input_image.data().to_vec();
            for plane in masked.chunks_mut(hi * wi) {
                plane.iter_mut().zip(mask.data()).for_each(|(v, m)| *v *= m);
            }
            let logits = model.logits(&Tensor::new(vec![ci, hi, wi], masked)?)?;
            Ok(logits[class_index])
        })
        .collect()
}

/// Score-CAM weights at the last convolutional feature layer.
pub fn scorecam_weights(
    model: &ModelGraph,
    trace: &ActivationTrace,
    input_image: &Tensor,
    class_index: usize,
) -> Result<CamWeights> {
    scorecam_weights_at(
        model,
        trace,
        input_image,
        class_index,
        model.feature_layer_name()?,
    )
}

/// Softmax across channels of [`scorecam_scores_at`].
pub fn scorecam_weights_at(
    model: &ModelGraph,
    trace: &ActivationTrace,
    input_image: &Tensor,
    class_index: usize,
    layer: &str,
) -> Result<CamWeights> {
    let scores = scorecam_scores_at(model, trace, input_image, class_index, layer)?;
    Ok(CamWeights::Global(tensor::softmax(&scores)))
}

/// Layer-CAM pixel weights: the positive part of the class-logit gradient.
pub fn layercam_weights(
    model: &ModelGraph,
    trace: &ActivationTrace,
    class_index: usize,
    layer: &str,
) -> Result<CamWeights> {
    let grad = backward_class_gradient(
        model,
        GradientRequest {
            class_index,
            target_layer: layer,
            trace,
        },
    )?;
    Ok(CamWeights::Pixelwise(tensor::relu(&grad)))
}

/// Layer-CAM: `ReLU(sum_k ReLU(grad_k) * A_k)` evaluated at `target_layer`.
pub fn layercam_explanation(
    model: &ModelGraph,
    trace: &ActivationTrace,
    class_index: usize,
    target_layer: &str,
) -> Result<Explanation> {
    let CamWeights::Pixelwise(weights) = layercam_weights(model, trace, class_index, target_layer)?
    else {
        unreachable!("layercam_weights returns pixelwise weights")
    };
    let weighted = trace
        .output(target_layer)?
        .zip_map(&weights, |a, w| a * w)?;
    Ok(Explanation {
        layer: target_layer.to_string(),
        map: tensor::relu(&weighted.channel_sum()?),
        signed: false,
    })
}

/// `I^k = w_k * A^k` for every channel `k` of `layer`.
pub fn explanation_components(
    weights: &CamWeights,
    trace: &ActivationTrace,
    layer: &str,
) -> Result<RelevanceStack> {
    let w = weights.global()?;
    let activation = trace.output(layer)?;
    let (c, h, wd) = activation.dims3()?;
    if w.len() != c {
        return Err(Error::shape(
            "explanation_components",
            format!("{} weights for {c} channels of `{layer}`", w.len()),
        ));
    }
    let plane = h * wd;
    let data = activation
        .data()
        .chunks(plane)
        .zip(w)
        .flat_map(|(ch, &wk)| ch.iter().map(move |&a| wk * a))
        .collect();
    Ok(RelevanceStack {
        layer: layer.to_string(),
        values: Tensor::new(vec![c, h, wd], data)?,
        signed: w.iter().any(|&v| v < 0.0),
    })
}

/// Classic CAM map: `ReLU(sum_k w_k A^k)` at the layer's own resolution.
pub fn cam_explanation(
    weights: &CamWeights,
    trace: &ActivationTrace,
    layer: &str,
) -> Result<Explanation> {
    let components = explanation_components(weights, trace, layer)?;
    Ok(Explanation {
        layer: layer.to_string(),
        map: tensor::relu(&components.values.channel_sum()?),
        signed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        forward_trace, Conv2dParams, LayerKind, LayerSpec, LinearParams, Preprocessing,
    };

    /// Identity 1x1 conv over `channels` channels of a `[C, H, W]` input, so the
    /// trace output of `conv` is exactly the input.
    fn passthrough_model(c: usize, h: usize, w: usize, fc: Vec<f32>, classes: usize) -> ModelGraph {
        let mut eye = vec![0f32; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        ModelGraph::new(
            vec![
                LayerSpec::new(
                    "conv",
                    LayerKind::Conv2d(Conv2dParams {
                        weight: Tensor::new(vec![c, c, 1, 1], eye).unwrap(),
                        bias: vec![0.0; c],
                        stride: (1, 1),
                        padding: (0, 0),
                    }),
                ),
                LayerSpec::new("flatten", LayerKind::Flatten),
                LayerSpec::new(
                    "fc",
                    LayerKind::Linear(LinearParams {
                        weight: Tensor::new(vec![classes, c * h * w], fc).unwrap(),
                        bias: vec![0.0; classes],
                    }),
                ),
            ],
            [c, h, w],
            classes,
            Preprocessing {
                mean: vec![0.0; c],
                std: vec![1.0; c],
            },
        )
    }

    #[test]
    fn gradcam_weight_is_mean_gradient() {
        // y = sum of fc row * activation, so the gradient map equals the fc row
        let m = passthrough_model(1, 2, 2, vec![1., -1., 3., 1.], 1);
        let trace = forward_trace(&m, &Tensor::filled(vec![1, 2, 2], 0.5).unwrap()).unwrap();
        let w = gradcam_weights_at(&m, &trace, 0, "conv").unwrap();
        assert_eq!(w, CamWeights::Global(vec![1.0]));
    }

    #[test]
    fn gradcam_constant_and_zero_gradients() {
        let m = passthrough_model(2, 2, 2, vec![0.5, 0.5, 0.5, 0.5, 0., 0., 0., 0.], 1);
        let trace = forward_trace(&m, &Tensor::filled(vec![2, 2, 2], 1.0).unwrap()).unwrap();
        let w = gradcam_weights_at(&m, &trace, 0, "conv").unwrap();
        assert_eq!(w, CamWeights::Global(vec![0.5, 0.0]));
    }

    #[test]
    fn scorecam_identical_channels_get_equal_weights() {
        let m = passthrough_model(3, 2, 2, (0..12).map(|i| i as f32).collect(), 1);
        let x = Tensor::new(vec![3, 2, 2], [0.1, 0.9, 0.4, 0.2].repeat(3)).unwrap();
        let trace = forward_trace(&m, &x).unwrap();
        let w = scorecam_weights_at(&m, &trace, &x, 0, "conv").unwrap();
        let w = w.global().unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6), "{w:?}");
    }

    #[test]
    fn scorecam_dead_channel_scores_zero_image() {
        let m = passthrough_model(2, 2, 2, vec![1.0; 8], 1);
        let x = Tensor::new(vec![2, 2, 2], vec![0.2, 0.8, 0.5, 0.1, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let trace = forward_trace(&m, &x).unwrap();
        let scores = scorecam_scores_at(&m, &trace, &x, 0, "conv").unwrap();
        // channel 1 is all zero -> zero mask -> zero image -> zero logit
        assert_eq!(scores[1], 0.0);
        let w = scorecam_weights_at(&m, &trace, &x, 0, "conv").unwrap();
        assert!((w.global().unwrap().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layercam_examples() {
        let m = passthrough_model(1, 1, 1, vec![1.0], 1);
        let trace = forward_trace(&m, &Tensor::filled(vec![1, 1, 1], 2.0).unwrap()).unwrap();
        let e = layercam_explanation(&m, &trace, 0, "conv").unwrap();
        assert_eq!(e.map.data(), &[2.0]);

        let m = passthrough_model(2, 2, 2, vec![-1.0; 8], 1);
        let trace = forward_trace(&m, &Tensor::filled(vec![2, 2, 2], 3.0).unwrap()).unwrap();
        let e = layercam_explanation(&m, &trace, 0, "conv").unwrap();
        assert!(e.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn components_and_cam_examples() {
        let m = passthrough_model(2, 1, 1, vec![1.0, 1.0], 1);
        let trace = forward_trace(&m, &Tensor::filled(vec![2, 1, 1], 1.0).unwrap()).unwrap();
        let w = CamWeights::Global(vec![1.0, -1.0]);
        let comp = explanation_components(&w, &trace, "conv").unwrap();
        assert_eq!(comp.values.data(), &[1.0, -1.0]);
        assert!(comp.signed);
        let cam = cam_explanation(&w, &trace, "conv").unwrap();
        assert_eq!(cam.map.data(), &[0.0]);

        let m = passthrough_model(1, 1, 2, vec![1.0, 1.0], 1);
        let trace =
            forward_trace(&m, &Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let comp = explanation_components(&CamWeights::Global(vec![2.0]), &trace, "conv").unwrap();
        assert_eq!(comp.values.data(), &[2.0, 4.0]);
        assert!(!comp.signed);
        let ones = explanation_components(&CamWeights::Global(vec![1.0]), &trace, "conv").unwrap();
        assert_eq!(&ones.values, trace.output("conv").unwrap());

        let trace =
            forward_trace(&m, &Tensor::new(vec![1, 1, 2], vec![-3.0, 5.0]).unwrap()).unwrap();
        let cam = cam_explanation(&CamWeights::Global(vec![1.0]), &trace, "conv").unwrap();
        assert_eq!(cam.map.data(), &[0.0, 5.0]);
    }

    #[test]
    fn wrong_weight_count_errors() {
        let m = passthrough_model(2, 1, 1, vec![1.0, 1.0], 1);
        let trace = forward_trace(&m, &Tensor::filled(vec![2, 1, 1], 1.0).unwrap()).unwrap();
        assert!(explanation_components(&CamWeights::Global(vec![1.0]), &trace, "conv").is_err());
    }
}
