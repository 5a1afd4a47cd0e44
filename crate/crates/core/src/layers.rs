//! Forward and backward passes for the layer kinds the estimator is built
//! from: valid stride-1 1D convolution, non-overlapping average pooling,
//! dense affine maps, (leaky) rectifiers and inverted dropout.
//!
//! Sequences are row-major `[len, channels]` buffers. Each operation comes
//! in two flavours: a `Tensor` level function with shape checking, and a
//! slice level `*_into` kernel used on the training hot path.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Weights and biases of one layer.
///
/// Convolution weights have shape `[filters, width, in_channels]`, dense
/// weights `[outputs, inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub biases: Tensor,
    pub trainable: bool,
}

impl LayerParams {
    pub fn new(weights: Tensor, biases: Tensor) -> Self {
        Self {
            weights,
            biases,
            trainable: true,
        }
    }

    pub fn zeros(weight_shape: &[usize], outputs: usize) -> Self {
        Self::new(Tensor::zeros(weight_shape), Tensor::zeros(&[outputs]))
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init_uniform(weight_shape: &[usize], outputs: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let mut weights = Tensor::zeros(weight_shape);
        for w in weights.data_mut() {
            *w = rng.uniform(-limit, limit);
        }
        Self::new(weights, Tensor::zeros(&[outputs]))
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Gradients for one [`LayerParams`]; shapes mirror the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub biases: Tensor,
}

impl LayerGrads {
    pub fn zeros_like(params: &LayerParams) -> Self {
        Self {
            weights: Tensor::zeros(params.weights.shape()),
            biases: Tensor::zeros(params.biases.shape()),
        }
    }

    pub fn clear(&mut self) {
        self.weights.data_mut().fill(0.0);
        self.biases.data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Self { rate })
    }
}

fn seq_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [len, ch] => Ok((len, ch)),
        ref s => Err(Error::ShapeMismatch(format!(
            "{what} must be [len, channels], got {s:?}"
        ))),
    }
}

fn conv_dims(params: &LayerParams, width: usize) -> Result<(usize, usize)> {
    match *params.weights.shape() {
        [filters, w, ch] if w == width && params.biases.shape() == [filters] => Ok((filters, ch)),
        ref s => Err(Error::ShapeMismatch(format!(
            "conv weights {s:?} / biases {:?} do not describe width {width}",
            params.biases.shape()
        ))),
    }
}

/// `out[t, f] = bias[f] + sum_{d, c} input[t + d, c] * weight[f, d, c]`.
///
/// The input rows `t..t + width` are contiguous in a row-major buffer, so
/// the input doubles as its own im2col matrix with row stride `ch`.
pub fn conv1d_forward_into(
    input: &[f64],
    ch: usize,
    weights: &[f64],
    biases: &[f64],
    width: usize,
    out: &mut [f64],
) {
    let len = input.len() / ch;
    let filters = biases.len();
    let out_len = len + 1 - width;
    let k = width * ch;
    debug_assert_eq!(weights.len(), filters * k);
    debug_assert_eq!(out.len(), out_len * filters);
    for row in out.chunks_exact_mut(filters) {
        row.copy_from_slice(biases);
    }
    // SAFETY: every (row, col) addressed through the strides lies inside the
    // corresponding slice; `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            out_len,
            k,
            filters,
            1.0,
            input.as_ptr(),
            ch as isize,
            1,
            weights.as_ptr(),
            1,
            k as isize,
            1.0,
            out.as_mut_ptr(),
            filters as isize,
            1,
        );
    }
}

/// Accumulates the gradients of [`conv1d_forward_into`] given `upstream`
/// (`[out_len, filters]`). The input gradient is only computed when asked
/// for, the first layer does not need it.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward_into(
    input: &[f64],
    ch: usize,
    weights: &[f64],
    width: usize,
    upstream: &[f64],
    weight_grad: &mut [f64],
    bias_grad: &mut [f64],
    input_grad: Option<&mut [f64]>,
) {
    let filters = bias_grad.len();
    let out_len = upstream.len() / filters;
    let k = width * ch;
    for row in upstream.chunks_exact(filters) {
        for (g, &u) in bias_grad.iter_mut().zip(row) {
            *g += u;
        }
    }
    // SAFETY: as in the forward pass; gradient buffers are distinct slices.
    unsafe {
        // dW[f, j] += sum_t g[t, f] * A[t, j]
        matrixmultiply::dgemm(
            filters,
            out_len,
            k,
            1.0,
            upstream.as_ptr(),
            1,
            filters as isize,
            input.as_ptr(),
            ch as isize,
            1,
            1.0,
            weight_grad.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    if let Some(dx) = input_grad {
        let mut patch_grad = vec![0.0; out_len * k];
        // SAFETY: `patch_grad` is a fresh buffer of out_len * k elements.
        unsafe {
            matrixmultiply::dgemm(
                out_len,
                filters,
                k,
                1.0,
                upstream.as_ptr(),
                filters as isize,
                1,
                weights.as_ptr(),
                k as isize,
                1,
                0.0,
                patch_grad.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        for (t, row) in patch_grad.chunks_exact(k).enumerate() {
            for (d, &g) in dx[t * ch..t * ch + k].iter_mut().zip(row) {
                *d += g;
            }
        }
    }
}

pub fn conv1d_forward(input: &Tensor, params: &LayerParams, width: usize) -> Result<Tensor> {
    let (len, ch) = seq_dims(input, "conv input")?;
    let (filters, kch) = conv_dims(params, width)?;
    if kch != ch {
        return Err(Error::ShapeMismatch(format!(
            "input has {ch} channels, kernels expect {kch}"
        )));
    }
    if width == 0 || len < width {
        return Err(Error::WindowTooSmall { len, width });
    }
    let out_len = len - width + 1;
    let mut out = vec![0.0; out_len * filters];
    conv1d_forward_into(
        input.data(),
        ch,
        params.weights.data(),
        params.biases.data(),
        width,
        &mut out,
    );
    Tensor::from_vec(&[out_len, filters], out)
}

/// Returns `(input_grad, weight_grad, bias_grad)`.
pub fn conv1d_backward(
    input: &Tensor,
    params: &LayerParams,
    width: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (len, ch) = seq_dims(input, "conv input")?;
    let (filters, kch) = conv_dims(params, width)?;
    if kch != ch || len < width || upstream.shape() != [len - width + 1, filters] {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} does not match conv of {:?} with width {width}",
            upstream.shape(),
            input.shape()
        )));
    }
    let mut dx = vec![0.0; len * ch];
    let mut dw = vec![0.0; params.weights.len()];
    let mut db = vec![0.0; filters];
    conv1d_backward_into(
        input.data(),
        ch,
        params.weights.data(),
        width,
        upstream.data(),
        &mut dw,
        &mut db,
        Some(&mut dx),
    );
    Ok((
        Tensor::from_vec(input.shape(), dx)?,
        Tensor::from_vec(params.weights.shape(), dw)?,
        Tensor::from_vec(&[filters], db)?,
    ))
}

/// Pool width actually used for a sequence of `len` steps.
pub fn effective_pool_width(len: usize, width: usize) -> usize {
    width.min(len).max(1)
}

pub fn avgpool1d_out_len(len: usize, width: usize) -> usize {
    len / effective_pool_width(len, width)
}

pub fn avgpool1d_forward_into(input: &[f64], ch: usize, width: usize, out: &mut [f64]) {
    let len = input.len() / ch;
    let w = effective_pool_width(len, width);
    let scale = 1.0 / w as f64;
    for (p, dst) in out.chunks_exact_mut(ch).enumerate() {
        dst.fill(0.0);
        for row in input[p * w * ch..(p + 1) * w * ch].chunks_exact(ch) {
            for (o, &x) in dst.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in dst.iter_mut() {
            *o *= scale;
        }
    }
}

/// Spreads `upstream` evenly over each pooling window; the dropped
/// remainder rows receive zero gradient.
pub fn avgpool1d_backward_into(upstream: &[f64], ch: usize, len: usize, width: usize, input_grad: &mut [f64]) {
    let w = effective_pool_width(len, width);
    let scale = 1.0 / w as f64;
    input_grad.fill(0.0);
    for (p, g) in upstream.chunks_exact(ch).enumerate() {
        for row in input_grad[p * w * ch..(p + 1) * w * ch].chunks_exact_mut(ch) {
            for (d, &u) in row.iter_mut().zip(g) {
                *d = u * scale;
            }
        }
    }
}

pub fn avgpool1d(input: &Tensor, width: usize) -> Result<Tensor> {
    let (len, ch) = seq_dims(input, "pool input")?;
    if len == 0 || width == 0 {
        return Err(Error::Empty("pooling input"));
    }
    let out_len = avgpool1d_out_len(len, width);
    let mut out = vec![0.0; out_len * ch];
    avgpool1d_forward_into(input.data(), ch, width, &mut out);
    Tensor::from_vec(&[out_len, ch], out)
}

pub fn avgpool1d_backward(input_len: usize, width: usize, upstream: &Tensor) -> Result<Tensor> {
    let (out_len, ch) = seq_dims(upstream, "pool upstream")?;
    if out_len != avgpool1d_out_len(input_len, width) {
        return Err(Error::ShapeMismatch(format!(
            "pool upstream length {out_len} for input length {input_len}, width {width}"
        )));
    }
    let mut dx = vec![0.0; input_len * ch];
    avgpool1d_backward_into(upstream.data(), ch, input_len, width, &mut dx);
    Tensor::from_vec(&[input_len, ch], dx)
}

/// `out = W x + b` with `W` row-major `[out, in]`.
pub fn dense_forward_into(input: &[f64], weights: &[f64], biases: &[f64], out: &mut [f64]) {
    let n = input.len();
    for ((o, row), &b) in out.iter_mut().zip(weights.chunks_exact(n)).zip(biases) {
        *o = b + dot(row, input);
    }
}

pub fn dense_backward_into(
    input: &[f64],
    weights: &[f64],
    upstream: &[f64],
    weight_grad: &mut [f64],
    bias_grad: &mut [f64],
    input_grad: Option<&mut [f64]>,
) {
    let n = input.len();
    for ((grow, &u), gb) in weight_grad.chunks_exact_mut(n).zip(upstream).zip(bias_grad.iter_mut()) {
        *gb += u;
        if u != 0.0 {
            for (g, &x) in grow.iter_mut().zip(input) {
                *g += u * x;
            }
        }
    }
    if let Some(dx) = input_grad {
        dx.fill(0.0);
        for (row, &u) in weights.chunks_exact(n).zip(upstream) {
            if u != 0.0 {
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d += u * w;
                }
            }
        }
    }
}

fn dense_dims(input: &Tensor, layer: &LayerParams) -> Result<(usize, usize)> {
    match *layer.weights.shape() {
        [m, n] if n == input.len() && layer.biases.shape() == [m] => Ok((m, n)),
        ref s => Err(Error::ShapeMismatch(format!(
            "dense weights {s:?} for input of {} elements",
            input.len()
        ))),
    }
}

pub fn dense_forward(input: &Tensor, layer: &LayerParams) -> Result<Tensor> {
    let (m, _) = dense_dims(input, layer)?;
    let mut out = vec![0.0; m];
    dense_forward_into(input.data(), layer.weights.data(), layer.biases.data(), &mut out);
    Tensor::from_vec(&[m], out)
}

/// Returns `(input_grad, weight_grad, bias_grad)`.
pub fn dense_backward(input: &Tensor, layer: &LayerParams, upstream: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, n) = dense_dims(input, layer)?;
    if upstream.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "dense upstream has {} elements, layer has {m} outputs",
            upstream.len()
        )));
    }
    let mut dx = vec![0.0; n];
    let mut dw = vec![0.0; m * n];
    let mut db = vec![0.0; m];
    dense_backward_into(
        input.data(),
        layer.weights.data(),
        upstream.data(),
        &mut dw,
        &mut db,
        Some(&mut dx),
    );
    Ok((
        Tensor::from_vec(input.shape(), dx)?,
        Tensor::from_vec(layer.weights.shape(), dw)?,
        Tensor::from_vec(&[m], db)?,
    ))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators let the loop vectorize
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

#[inline]
pub fn relu_scalar(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = leaky_relu_scalar(*v, slope);
    }
    y
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = relu_scalar(*v);
    }
    y
}

/// Upstream gradient through a leaky rectifier evaluated at `x`.
pub fn leaky_relu_backward(x: &Tensor, upstream: &Tensor, slope: f64) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch("leaky relu upstream".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| u * leaky_relu_grad(v, slope))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch("relu upstream".into()));
    }
    let data = x.data().iter().zip(upstream.data()).map(|(&v, &u)| u * relu_grad(v)).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Draws an inverted-dropout mask: each entry is `0` with probability
/// `rate`, otherwise `1 / (1 - rate)`.
pub fn dropout_mask(n: usize, spec: DropoutSpec, rng: &mut Rng) -> Vec<f64> {
    let keep_scale = 1.0 / (1.0 - spec.rate);
    (0..n)
        .map(|_| if rng.bernoulli(spec.rate) { 0.0 } else { keep_scale })
        .collect()
}

/// Inverted dropout. Returns the output and the mask that was applied
/// (`None` for the identity case, which draws nothing from `rng`).
pub fn dropout_apply(x: &Tensor, spec: DropoutSpec, rng: &mut Rng, training: bool) -> (Tensor, Option<Vec<f64>>) {
    if !training || spec.rate == 0.0 {
        return (x.clone(), None);
    }
    let mask = dropout_mask(x.len(), spec, rng);
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    (y, Some(mask))
}
