//! Dense `f32` tensors and the numerical kernels the rest of the crate runs on.
//!
//! Spatial operations take rank-3 `[C, H, W]` tensors (one image, NCHW with the
//! batch dimension dropped). The convolution and pooling kernels are generic over
//! the float type so relevance propagation can reuse them with `f64` accumulation.

use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        check_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    /// Rank-1 tensor holding `values`.
    pub fn vector(values: Vec<f32>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "dims3",
                format!("expected [C, H, W], got {:?}", self.shape),
            )),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub(crate) fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Tensor> {
        Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    /// Sum over the leading (channel) axis of a `[C, H, W]` tensor, giving `[H, W]`.
    pub fn channel_sum(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let plane = h * w;
        let mut acc = vec![0f64; plane];
        for ch in 0..c {
            for (a, &v) in acc.iter_mut().zip(&self.data[ch * plane..(ch + 1) * plane]) {
                *a += f64::from(v);
            }
        }
        Tensor::from_f64(vec![h, w], &acc)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("dimensions must be >= 1, got {shape:?}"),
        ));
    }
    Ok(())
}

/// Output extent of a strided window sweep, `None` when the window does not fit.
pub(crate) fn window_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if k == 0 || stride == 0 || k > padded {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: (usize, usize, usize),
        weight_shape: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (c_in, h, w) = input;
        let [c_out, wc, kh, kw] = *weight_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("weights must be [C_out, C_in, kH, kW], got {weight_shape:?}"),
            ));
        };
        if wc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input [{c_in}, {h}, {w}] has {c_in} channels but weights {weight_shape:?} expect {wc}"
                ),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (Some(ho), Some(wo)) = (
            window_out(h, kh, stride.0, padding.0),
            window_out(w, kw, stride.1, padding.1),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {h}x{w} (padding {padding:?})"),
            ));
        };
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        })
    }

    /// Visit every (output index, weight index, input index) triple of the
    /// convolution, skipping taps that land in the zero padding.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (sh, sw) = self.stride;
        let (ph, pw) = (self.padding.0 as isize, self.padding.1 as isize);
        for o in 0..self.c_out {
            for c in 0..self.c_in {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let wi = ((o * self.c_in + c) * self.kh + ky) * self.kw + kx;
                        for oy in 0..self.ho {
                            let iy = (oy * sh + ky) as isize - ph;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let in_row = (c * self.h + iy as usize) * self.w;
                            let out_row = (o * self.ho + oy) * self.wo;
                            for ox in 0..self.wo {
                                let ix = (ox * sw + kx) as isize - pw;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(out_row + ox, wi, in_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Float + AddAssign>(
        &self,
        input: &[T],
        weight: &[T],
        bias: Option<&[T]>,
    ) -> Vec<T> {
        let plane = self.ho * self.wo;
        let mut out = vec![T::zero(); self.c_out * plane];
        if let Some(b) = bias {
            for (o, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        self.for_each_tap(|oi, wi, ii| out[oi] += weight[wi] * input[ii]);
        out
    }

    /// Adjoint of `forward` with respect to the input (transposed correlation).
    pub fn transpose<T: Float + AddAssign>(&self, grad_out: &[T], weight: &[T]) -> Vec<T> {
        let mut grad_in = vec![T::zero(); self.c_in * self.h * self.w];
        self.for_each_tap(|oi, wi, ii| grad_in[ii] += weight[wi] * grad_out[oi]);
        grad_in
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(
        op: &'static str,
        input: (usize, usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let (c, h, w) = input;
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument(format!("{op} stride must be >= 1")));
        }
        let (Some(ho), Some(wo)) = (
            window_out(h, kernel.0, stride.0, 0),
            window_out(w, kernel.1, stride.1, 0),
        ) else {
            return Err(Error::shape(
                op,
                format!("kernel {kernel:?} larger than input {h}x{w}"),
            ));
        };
        Ok(PoolGeom {
            c,
            h,
            w,
            kernel,
            stride,
            ho,
            wo,
        })
    }

    /// Flat input indices covered by output cell `(c, oy, ox)`, row-major.
    #[inline]
    pub fn window(&self, c: usize, oy: usize, ox: usize) -> impl Iterator<Item = usize> + '_ {
        let y0 = oy * self.stride.0;
        let x0 = ox * self.stride.1;
        (0..self.kernel.0).flat_map(move |ky| {
            (0..self.kernel.1).map(move |kx| (c * self.h + y0 + ky) * self.w + x0 + kx)
        })
    }

    pub fn out_len(&self) -> usize {
        self.c * self.ho * self.wo
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        (0..self.c).flat_map(move |c| {
            (0..self.ho).flat_map(move |oy| {
                (0..self.wo).map(move |ox| (((c * self.ho) + oy) * self.wo + ox, c, oy, ox))
            })
        })
    }

    pub fn avg_forward<T: Float + AddAssign>(&self, input: &[T]) -> Vec<T> {
        let area = T::from(self.kernel.0 * self.kernel.1).unwrap();
        let mut out = vec![T::zero(); self.out_len()];
        for (oi, c, oy, ox) in self.cells() {
            let mut acc = T::zero();
            for ii in self.window(c, oy, ox) {
                acc += input[ii];
            }
            out[oi] = acc / area;
        }
        out
    }

    /// Adjoint of `avg_forward`: each output value spreads uniformly over its window.
    pub fn avg_transpose<T: Float + AddAssign>(&self, grad_out: &[T]) -> Vec<T> {
        let area = T::from(self.kernel.0 * self.kernel.1).unwrap();
        let mut grad_in = vec![T::zero(); self.c * self.h * self.w];
        for (oi, c, oy, ox) in self.cells() {
            let share = grad_out[oi] / area;
            for ii in self.window(c, oy, ox) {
                grad_in[ii] += share;
            }
        }
        grad_in
    }
}

/// Cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kH, kW]` weights,
/// zero padded.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let geom = ConvGeom::new(input.dims3()?, weights.shape(), stride, padding)?;
    if bias.len() != geom.c_out {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias length {} for {} output channels",
                bias.len(),
                geom.c_out
            ),
        ));
    }
    let out = geom.forward(input.data(), weights.data(), Some(bias));
    Tensor::new(vec![geom.c_out, geom.ho, geom.wo], out)
}

/// For every output cell of a max pool, the flat index into the pooled input of
/// the winning element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxIndices {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Max pooling without padding. Ties go to the lowest flat index.
pub fn maxpool2d(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, ArgmaxIndices)> {
    let geom = PoolGeom::new("maxpool2d", input.dims3()?, kernel, stride)?;
    let data = input.data();
    let mut out = vec![0f32; geom.out_len()];
    let mut indices = vec![0usize; geom.out_len()];
    for (oi, c, oy, ox) in geom.cells() {
        let mut best = usize::MAX;
        for ii in geom.window(c, oy, ox) {
            // strict comparison keeps the earliest index on ties
            if best == usize::MAX || data[ii] > data[best] {
                best = ii;
            }
        }
        out[oi] = data[best];
        indices[oi] = best;
    }
    let output_shape = vec![geom.c, geom.ho, geom.wo];
    Ok((
        Tensor::new(output_shape.clone(), out)?,
        ArgmaxIndices {
            input_shape: input.shape().to_vec(),
            output_shape,
            indices,
        },
    ))
}

pub fn avgpool2d(input: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let geom = PoolGeom::new("avgpool2d", input.dims3()?, kernel, stride)?;
    let out = geom.avg_forward(&input.to_f64());
    Tensor::from_f64(vec![geom.c, geom.ho, geom.wo], &out)
}

/// `out_j = sum_i W_ji x_i + b_j` for `W` of shape `[m, n]`.
pub fn linear(input: &[f32], weights: &Tensor, bias: &[f32]) -> Result<Vec<f32>> {
    let [m, n] = *weights.shape() else {
        return Err(Error::shape(
            "linear",
            format!("weights must be rank 2, got {:?}", weights.shape()),
        ));
    };
    if input.len() != n || bias.len() != m {
        return Err(Error::shape(
            "linear",
            format!(
                "weights [{m}, {n}] with input length {} and bias length {}",
                input.len(),
                bias.len()
            ),
        ));
    }
    Ok(weights
        .data()
        .chunks(n)
        .zip(bias)
        .map(|(row, &b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f32>() + b)
        .collect())
}

/// Bilinear resize with half-pixel centers: source coordinate
/// `(dst + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "output size must be >= 1"));
    }
    let ys = resize_taps(h, out_h);
    let xs = resize_taps(w, out_w);
    let data = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Normalized 1-D Gaussian taps of odd length `ksize`.
pub fn gaussian_kernel(ksize: usize, sigma: f32) -> Result<Vec<f64>> {
    if ksize.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel size must be odd, got {ksize}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let r = (ksize / 2) as f64;
    let s = f64::from(sigma);
    let taps: Vec<f64> = (0..ksize)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * s * s)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with reflect padding at the borders.
pub fn gaussian_blur(image: &Tensor, ksize: usize, sigma: f32) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let taps = gaussian_kernel(ksize, sigma)?;
    let r = (ksize / 2) as isize;
    let data = image.data();
    let mut out = vec![0f32; c * h * w];
    let mut row_pass = vec![0f64; h * w];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                row_pass[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let sx = reflect_index(x as isize + k as isize - r, w);
                        t * f64::from(plane[y * w + sx])
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let sy = reflect_index(y as isize + k as isize - r, h);
                        t * row_pass[sy * w + x]
                    })
                    .sum();
                out[ch * h * w + y * w + x] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    /// Softmax over the final axis.
    Softmax,
    /// Affine map of the whole tensor onto `[0, 1]`; constant input maps to zeros.
    MinmaxNormalize,
}

pub fn elementwise(kind: Elementwise, input: &Tensor) -> Tensor {
    match kind {
        Elementwise::Relu => relu(input),
        Elementwise::Softmax => {
            let last = *input.shape().last().expect("tensor rank >= 1");
            let data = input
                .data()
                .chunks(last)
                .flat_map(softmax)
                .collect::<Vec<_>>();
            Tensor {
                shape: input.shape().to_vec(),
                data,
            }
        }
        Elementwise::MinmaxNormalize => minmax_normalize(input),
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Numerically stable softmax of a slice.
pub fn softmax(values: &[f32]) -> Vec<f32> {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = values.iter().map(|&v| f64::from(v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total) as f32).collect()
}

pub fn minmax_normalize(input: &Tensor) -> Tensor {
    let (lo, hi) = input
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return input.map(|_| 0.0);
    }
    let range = hi - lo;
    input.map(|v| (v - lo) / range)
}
