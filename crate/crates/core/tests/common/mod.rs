#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fgcam::evaluate::{read_list, ListEntry};
use fgcam::fgm::load_model;
use fgcam::io::load_image;
use fgcam::model::fold_batchnorm;
use fgcam::{ModelGraph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn model_path() -> PathBuf {
    fixture_dir().join("tiny-cnn.fgm")
}

pub fn list_path() -> PathBuf {
    fixture_dir().join("list.jsonl")
}

/// The fixture model as stored (batchnorm unfolded).
pub fn raw_model() -> ModelGraph {
    load_model(model_path()).expect("fixture model loads")
}

/// The fixture model with batchnorm folded, as used for explanations.
pub fn tiny_model() -> ModelGraph {
    fold_batchnorm(&raw_model()).expect("fold")
}

pub fn entries() -> Vec<ListEntry> {
    read_list(list_path()).expect("fixture list")
}

/// Preprocessed input for a fixture entry.
pub fn fixture_input(model: &ModelGraph, entry: &ListEntry) -> Tensor {
    let [c, h, w] = model.input_shape();
    let img = load_image(fixture_dir().join(&entry.path), c, h, w).expect("fixture image");
    model
        .preprocessing()
        .apply(&img.pixels)
        .expect("preprocess")
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Dense `[out_len, in_len]` matrix of a convolution, built directly from the
/// index arithmetic of a cross-correlation with zero padding.
pub fn dense_conv_matrix(
    in_shape: (usize, usize, usize),
    weight: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> (Vec<f64>, (usize, usize, usize)) {
    let (c, h, w) = in_shape;
    let ws = weight.shape();
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * padding.1 - kw) / stride.1 + 1;
    let in_len = c * h * w;
    let mut m = vec![0f64; o * oh * ow * in_len];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oc * oh + oy) * ow + ox;
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                            let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let col = (ic * h + iy as usize) * w + ix as usize;
                            m[row * in_len + col] +=
                                f64::from(weight.data()[((oc * c + ic) * kh + ky) * kw + kx]);
                        }
                    }
                }
            }
        }
    }
    (m, (o, oh, ow))
}

/// z+ redistribution through a dense matrix, evaluated in f64.
pub fn dense_zplus(matrix: &[f64], rows: usize, x: &[f32], relevance: &[f32]) -> Vec<f64> {
    let cols = x.len();
    let mut out = vec![0f64; cols];
    for j in 0..rows {
        let row = &matrix[j * cols..(j + 1) * cols];
        let z: f64 = row
            .iter()
            .zip(x)
            .map(|(&w, &xi)| w.max(0.0) * f64::from(xi))
            .sum();
        if z <= 0.0 {
            continue;
        }
        let s = f64::from(relevance[j]) / (z + 1e-9);
        for (i, &w) in row.iter().enumerate() {
            out[i] += f64::from(x[i]) * w.max(0.0) * s;
        }
    }
    out
}

/// Reference forward pass in f64 with plain loops, from the output of layer
/// `start - 1` (or the network input when `start == 0`). Returns the logits.
pub fn reference_forward(
    model: &ModelGraph,
    start: usize,
    activation: &[f64],
    shape: &[usize],
) -> Vec<f64> {
    use fgcam::LayerKind;
    let mut x = activation.to_vec();
    let mut shape = shape.to_vec();
    for layer in &model.layers()[start..] {
        match &layer.kind {
            LayerKind::Conv2d(p) => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let ws = p.weight.shape();
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let oh = (h + 2 * p.padding.0 - kh) / p.stride.0 + 1;
                let ow = (w + 2 * p.padding.1 - kw) / p.stride.1 + 1;
                let mut y = vec![0f64; o * oh * ow];
                for oc in 0..o {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = f64::from(p.bias[oc]);
                            for ic in 0..c {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy =
                                            (oy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                                        let ix =
                                            (ox * p.stride.1 + kx) as isize - p.padding.1 as isize;
                                        if iy >= 0
                                            && ix >= 0
                                            && (iy as usize) < h
                                            && (ix as usize) < w
                                        {
                                            let wv = p.weight.data()
                                                [((oc * c + ic) * kh + ky) * kw + kx];
                                            acc += f64::from(wv)
                                                * x[(ic * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                            y[(oc * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                x = y;
                shape = vec![o, oh, ow];
            }
            LayerKind::BatchNorm2d(p) => {
                let plane = shape[1] * shape[2];
                for (i, v) in x.iter_mut().enumerate() {
                    let c = i / plane;
                    let var = f64::from(p.running_var[c]) + f64::from(p.eps);
                    *v = (*v - f64::from(p.running_mean[c])) / var.sqrt() * f64::from(p.gamma[c])
                        + f64::from(p.beta[c]);
                }
            }
            LayerKind::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::MaxPool2d(p) | LayerKind::AvgPool2d(p) => {
                let is_max = matches!(layer.kind, LayerKind::MaxPool2d(_));
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let oh = (h - p.kernel.0) / p.stride.0 + 1;
                let ow = (w - p.kernel.1) / p.stride.1 + 1;
                let mut y = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let cells = (0..p.kernel.0)
                                .flat_map(|ky| (0..p.kernel.1).map(move |kx| (ky, kx)));
                            let vals: Vec<f64> = cells
                                .map(|(ky, kx)| {
                                    x[(ch * h + oy * p.stride.0 + ky) * w + ox * p.stride.1 + kx]
                                })
                                .collect();
                            y.push(if is_max {
                                vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                vals.iter().sum::<f64>() / vals.len() as f64
                            });
                        }
                    }
                }
                x = y;
                shape = vec![c, oh, ow];
            }
            LayerKind::Flatten => shape = vec![x.len()],
            LayerKind::Linear(p) => {
                let n = x.len();
                x = p
                    .weight
                    .data()
                    .chunks(n)
                    .zip(&p.bias)
                    .map(|(row, &b)| {
                        f64::from(b)
                            + row
                                .iter()
                                .zip(&x)
                                .map(|(&w, &v)| f64::from(w) * v)
                                .sum::<f64>()
                    })
                    .collect();
                shape = vec![x.len()];
            }
        }
    }
    x
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct FdCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Large-gradient entries passed over because `[x - h, x + h]` contains a
    /// kink (the one-sided differences disagree), where no derivative exists.
    pub kinked: usize,
}

/// Compare the analytic class-logit gradient at `layer` with central finite
/// differences (step `h`) of [`reference_forward`] on the `top` largest-magnitude entries whose
/// `+-h` neighbourhood is kink-free.
pub fn finite_difference_check(
    model: &ModelGraph,
    input: &Tensor,
    class_index: usize,
    layer: &str,
    h: f64,
    top: usize,
) -> FdCheck {
    use fgcam::grad::{backward_class_gradient, GradientRequest};
    let trace = fgcam::forward_trace(model, input).unwrap();
    let grad = backward_class_gradient(
        model,
        GradientRequest {
            class_index,
            target_layer: layer,
            trace: &trace,
        },
    )
    .unwrap();
    let (start, base) = if layer == "input" {
        (0, input.clone())
    } else {
        let i = model.layer_index(layer).unwrap();
        (i + 1, trace.output_at(i).clone())
    };
    let base64: Vec<f64> = base.data().iter().map(|&v| f64::from(v)).collect();
    let logit = |i: usize, delta: f64| -> f64 {
        let mut t = base64.clone();
        t[i] += delta;
        reference_forward(model, start, &t, base.shape())[class_index]
    };
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
    let mut out = FdCheck {
        max_rel_err: 0.0,
        checked: 0,
        kinked: 0,
    };
    for i in order {
        if out.checked == top || grad.data()[i] == 0.0 {
            break;
        }
        let (plus, centre, minus) = (logit(i, h), logit(i, 0.0), logit(i, -h));
        let forward = (plus - centre) / h;
        let backward = (centre - minus) / h;
        if (forward - backward).abs() > 1e-6 * forward.abs().max(backward.abs()).max(1e-6) {
            out.kinked += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * h);
        out.max_rel_err = out.max_rel_err.max(rel_err(f64::from(grad.data()[i]), fd));
        out.checked += 1;
    }
    out
}

/// A random layer together with a positive input activation and positive
/// output relevance, shaped so that every output has `z > 0` under z+.
pub struct ZplusInstance {
    pub layer: fgcam::LayerSpec,
    pub input: Tensor,
    pub relevance: Tensor,
}

pub fn random_conv_instance(rng: &mut ChaCha8Rng) -> ZplusInstance {
    use fgcam::model::Conv2dParams;
    let c_in = rng.gen_range(1..=3);
    let c_out = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=8);
    let w = rng.gen_range(3..=8);
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let padding = (rng.gen_range(0..=k / 2), rng.gen_range(0..=k / 2));
    let mut weight = random_tensor(rng, &[c_out, c_in, k, k], -1.0, 1.0);
    // the centre tap of channel 0 always sees the input, so a positive value
    // there keeps every output's z+ denominator positive
    for oc in 0..c_out {
        let centre = (oc * c_in * k + k / 2) * k + k / 2;
        weight.data_mut()[centre] = weight.data()[centre].abs() + 0.05;
    }
    let bias = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input = random_tensor(rng, &[c_in, h, w], 0.01, 1.0);
    let oh = (h + 2 * padding.0 - k) / stride.0 + 1;
    let ow = (w + 2 * padding.1 - k) / stride.1 + 1;
    let relevance = random_tensor(rng, &[c_out, oh, ow], 0.1, 1.0);
    let layer = fgcam::LayerSpec::new(
        "conv",
        fgcam::LayerKind::Conv2d(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        }),
    );
    ZplusInstance {
        layer,
        input,
        relevance,
    }
}

pub fn random_linear_instance(rng: &mut ChaCha8Rng) -> ZplusInstance {
    use fgcam::model::LinearParams;
    let n = rng.gen_range(1..=24);
    let m = rng.gen_range(1..=10);
    let mut weight = random_tensor(rng, &[m, n], -1.0, 1.0);
    for j in 0..m {
        weight.data_mut()[j * n] = weight.data()[j * n].abs() + 0.05;
    }
    let bias = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ZplusInstance {
        layer: fgcam::LayerSpec::new(
            "fc",
            fgcam::LayerKind::Linear(LinearParams { weight, bias }),
        ),
        input: random_tensor(rng, &[n], 0.01, 1.0),
        relevance: random_tensor(rng, &[m], 0.1, 1.0),
    }
}

pub fn random_avgpool_instance(rng: &mut ChaCha8Rng) -> ZplusInstance {
    use fgcam::model::PoolParams;
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(2..=8);
    let w = rng.gen_range(2..=8);
    let kernel = (rng.gen_range(1..=h.min(3)), rng.gen_range(1..=w.min(3)));
    let stride = (rng.gen_range(1..=kernel.0), rng.gen_range(1..=kernel.1));
    let oh = (h - kernel.0) / stride.0 + 1;
    let ow = (w - kernel.1) / stride.1 + 1;
    ZplusInstance {
        layer: fgcam::LayerSpec::new(
            "pool",
            fgcam::LayerKind::AvgPool2d(PoolParams { kernel, stride }),
        ),
        input: random_tensor(rng, &[c, h, w], 0.01, 1.0),
        relevance: random_tensor(rng, &[c, oh, ow], 0.1, 1.0),
    }
}

/// Relative conservation error of one z+ step, with 64-bit sums.
pub fn zplus_conservation_error(instance: &ZplusInstance) -> f64 {
    let out =
        fgcam::relprop::zplus_layer(&instance.layer, &instance.input, &instance.relevance).unwrap();
    let sum = |t: &Tensor| t.data().iter().map(|&v| f64::from(v)).sum::<f64>();
    rel_err(sum(&out), sum(&instance.relevance))
}
