//! One entry point for every explanation method, shared by the CLI, the
//! evaluation driver and the Python bindings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::{self, CamWeights};
use crate::denoise::{denoise_components, DEFAULT_KEEP_FRACTION};
use crate::error::{Error, Result};
use crate::model::{forward_trace, ActivationTrace, ModelGraph, INPUT_LAYER};
use crate::relprop::{self, CamBackend, Explanation, FgCamOptions};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    GradCam,
    ScoreCam,
    LayerCam,
    FgGradCam,
    FgScoreCam,
    Lrp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::GradCam,
        Method::ScoreCam,
        Method::LayerCam,
        Method::FgGradCam,
        Method::FgScoreCam,
        Method::Lrp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradCam => "grad-cam",
            Method::ScoreCam => "score-cam",
            Method::LayerCam => "layer-cam",
            Method::FgGradCam => "fg-grad-cam",
            Method::FgScoreCam => "fg-score-cam",
            Method::Lrp => "lrp",
        }
    }

    fn is_fine_grained(self) -> bool {
        matches!(self, Method::FgGradCam | Method::FgScoreCam | Method::Lrp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                Error::InvalidArgument(format!(
                    "unknown method `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRequest {
    pub method: Method,
    /// Target layer; defaults to the last convolutional feature layer for the
    /// plain CAM methods and to `"input"` for the others.
    pub layer: Option<String>,
    /// Explained class; defaults to the predicted class.
    pub class_index: Option<usize>,
    pub denoise: bool,
    pub keep_fraction: f64,
    pub signed: bool,
}

impl ExplainRequest {
    pub fn new(method: Method) -> Self {
        ExplainRequest {
            method,
            layer: None,
            class_index: None,
            denoise: false,
            keep_fraction: DEFAULT_KEEP_FRACTION,
            signed: false,
        }
    }

    /// The concrete target layer for `model`.
    pub fn resolve_layer(&self, model: &ModelGraph) -> Result<String> {
        match &self.layer {
            Some(layer) => {
                if layer != INPUT_LAYER {
                    model.layer_index(layer)?;
                }
                Ok(layer.clone())
            }
            None if self.method.is_fine_grained() => Ok(INPUT_LAYER.to_string()),
            None => Ok(model.feature_layer_name()?.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainOutput {
    pub explanation: Explanation,
    pub logits: Vec<f32>,
    pub predicted_class: usize,
    pub class_index: usize,
}

/// Explain an already preprocessed `[C, H, W]` input.
pub fn explain(
    model: &ModelGraph,
    input: &Tensor,
    request: &ExplainRequest,
) -> Result<ExplainOutput> {
    let trace = forward_trace(model, input)?;
    let class_index = request
        .class_index
        .unwrap_or_else(|| trace.predicted_class());
    let explanation = explain_traced(model, &trace, class_index, request)?;
    Ok(ExplainOutput {
        explanation,
        logits: trace.logits().to_vec(),
        predicted_class: trace.predicted_class(),
        class_index,
    })
}

/// Explain `class_index` given a forward trace of the preprocessed input.
pub fn explain_traced(
    model: &ModelGraph,
    trace: &ActivationTrace,
    class_index: usize,
    request: &ExplainRequest,
) -> Result<Explanation> {
    if class_index >= model.class_count() {
        return Err(Error::ClassOutOfRange {
            class: class_index,
            count: model.class_count(),
        });
    }
    let layer = request.resolve_layer(model)?;
    let input = trace.input();
    match request.method {
        Method::GradCam | Method::ScoreCam => {
            let feature = model.feature_layer_name()?;
            if layer != feature {
                log::warn!(
                    "{} at `{layer}` instead of the last convolutional layer `{feature}` tends to lose accuracy",
                    request.method
                );
            }
            let weights = if request.method == Method::GradCam {
                cam::gradcam_weights_at(model, trace, class_index, &layer)?
            } else {
                cam::scorecam_weights_at(model, trace, input, class_index, &layer)?
            };
            plain_cam(&weights, trace, &layer, request)
        }
        Method::LayerCam => {
            if request.denoise || request.signed {
                return Err(Error::InvalidArgument(
                    "layer-cam supports neither denoising nor signed maps".into(),
                ));
            }
            cam::layercam_explanation(model, trace, class_index, &layer)
        }
        Method::FgGradCam | Method::FgScoreCam => {
            let backend = if request.method == Method::FgGradCam {
                CamBackend::Grad
            } else {
                CamBackend::Score
            };
            let options = FgCamOptions {
                backend,
                target_layer: layer,
                denoise: request.denoise,
                keep_fraction: request.keep_fraction,
                signed: request.signed,
            };
            relprop::fg_cam_explain(model, trace, input, class_index, &options)
        }
        Method::Lrp => {
            if layer != INPUT_LAYER {
                return Err(Error::InvalidArgument(format!(
                    "lrp explains the input layer only, got `{layer}`"
                )));
            }
            if request.denoise {
                return Err(Error::InvalidArgument(
                    "lrp does not support denoising".into(),
                ));
            }
            relprop::lrp_explain(model, trace, class_index, request.signed)
        }
    }
}

fn plain_cam(
    weights: &CamWeights,
    trace: &ActivationTrace,
    layer: &str,
    request: &ExplainRequest,
) -> Result<Explanation> {
    if !request.denoise && !request.signed {
        return cam::cam_explanation(weights, trace, layer);
    }
    let mut components = cam::explanation_components(weights, trace, layer)?;
    if request.denoise {
        components = denoise_components(&components, request.keep_fraction)?;
    }
    let summed = components.values.channel_sum()?;
    Ok(Explanation {
        layer: layer.to_string(),
        map: if request.signed {
            summed
        } else {
            tensor::relu(&summed)
        },
        signed: request.signed,
    })
}
