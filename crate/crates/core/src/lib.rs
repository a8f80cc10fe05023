//! Explanation engine for sequential CNNs.
//!
//! FG-CAM computes class activation weights at the last convolutional feature
//! layer, splits the activation into per-channel explanation components and
//! redistributes them back towards the input with relevance propagation (z+
//! in hidden layers, z-beta at the pixel layer). Grad-CAM, Score-CAM,
//! Layer-CAM and plain LRP are available for comparison, along with low-rank
//! denoising of the components and the faithfulness / localization metrics.
//!
//! Models come from FGM files ([`fgm`]) and run in a small f32 inference
//! engine ([`model`], [`tensor`]).

pub mod cam;
pub mod cli;
pub mod denoise;
pub mod error;
pub mod evaluate;
pub mod fgm;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod relprop;
pub mod render;
pub mod tensor;

pub use cam::{CamWeights, RelevanceStack};
pub use error::{Error, Result};
pub use model::{forward_trace, ActivationTrace, LayerKind, LayerSpec, ModelGraph};
pub use pipeline::{explain, ExplainOutput, ExplainRequest, Method};
pub use relprop::{fg_cam_explain, CamBackend, Explanation, FgCamOptions};
pub use tensor::Tensor;
