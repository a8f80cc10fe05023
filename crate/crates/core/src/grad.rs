//! Reverse-mode gradient of a class logit with respect to a traced activation.

use crate::error::{Error, Result};
use crate::model::{ActivationTrace, LayerKind, ModelGraph, INPUT_LAYER};
use crate::tensor::{ConvGeom, PoolGeom, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradientRequest<'a> {
    pub class_index: usize,
    /// Layer whose output the gradient is taken with respect to; `"input"` for
    /// the network input.
    pub target_layer: &'a str,
    pub trace: &'a ActivationTrace,
}

/// `d logit[class] / d output(target_layer)`, shaped like the target's output.
///
/// The gradient is of the raw logit, not the softmax probability.
pub fn backward_class_gradient(model: &ModelGraph, request: GradientRequest<'_>) -> Result<Tensor> {
    let trace = request.trace;
    if request.class_index >= model.class_count() {
        return Err(Error::ClassOutOfRange {
            class: request.class_index,
            count: model.class_count(),
        });
    }
    if trace.len() != model.layers().len() {
        return Err(Error::InvalidArgument(
            "trace was not produced by this model".into(),
        ));
    }
    // number of layers to walk back through: all layers after the target
    let stop = if request.target_layer == INPUT_LAYER {
        0
    } else {
        model.layer_index(request.target_layer)? + 1
    };

    let last = model.layers().len() - 1;
    let logits = trace.output_at(last);
    let mut grad = vec![0f32; logits.len()];
    grad[request.class_index] = 1.0;
    let mut grad = Tensor::new(logits.shape().to_vec(), grad)?;

    for index in (stop..=last).rev() {
        grad = layer_vjp(model, trace, index, &grad)?;
    }
    Ok(grad)
}

/// Pull a gradient at the output of layer `index` back to its input.
fn layer_vjp(
    model: &ModelGraph,
    trace: &ActivationTrace,
    index: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let layer = &model.layers()[index];
    let input = trace.input_at(index);
    let in_shape = input.shape().to_vec();
    let g = grad_out.data();
    let data = match &layer.kind {
        LayerKind::Conv2d(p) => {
            let geom = ConvGeom::new(input.dims3()?, p.weight.shape(), p.stride, p.padding)?;
            geom.transpose(g, p.weight.data())
        }
        LayerKind::Linear(p) => {
            let n = p.weight.shape()[1];
            let mut out = vec![0f32; n];
            for (row, &gj) in p.weight.data().chunks(n).zip(g) {
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += w * gj;
                }
            }
            out
        }
        LayerKind::Relu => {
            let activated = trace.output_at(index);
            g.iter()
                .zip(activated.data())
                .map(|(&gi, &a)| if a > 0.0 { gi } else { 0.0 })
                .collect()
        }
        LayerKind::MaxPool2d(_) => {
            let routing = trace.argmax_at(index).ok_or_else(|| {
                Error::InvalidArgument(format!("trace holds no argmax for `{}`", layer.name))
            })?;
            let mut out = vec![0f32; input.len()];
            for (&src, &gi) in routing.indices.iter().zip(g) {
                out[src] += gi;
            }
            out
        }
        LayerKind::AvgPool2d(p) => {
            let geom = PoolGeom::new("avgpool2d", input.dims3()?, p.kernel, p.stride)?;
            geom.avg_transpose(g)
        }
        LayerKind::Flatten => g.to_vec(),
        LayerKind::BatchNorm2d(p) => {
            let (_, h, w) = input.dims3()?;
            let affine = p.affine();
            g.chunks(h * w)
                .enumerate()
                .flat_map(|(c, plane)| {
                    let s = affine[c].0;
                    plane.iter().map(move |&v| v * s)
                })
                .collect()
        }
    };
    Tensor::new(in_shape, data)
}
