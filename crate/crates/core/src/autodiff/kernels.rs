//! Forward and backward kernels on plain tensors. The tape in the parent
//! module records calls to these and chains the backward halves.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

fn mismatch(op: &'static str, left: Shape, right: Shape) -> Error {
    Error::ShapeMismatch { op, left, right }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output extent of a convolution along one axis, or `None` when empty.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn conv_geometry(
    input: Shape,
    weight: Shape,
    bias: Shape,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [batch, in_channels, height, width] = input;
    let [out_channels, w_in, kernel_h, kernel_w] = weight;
    if w_in != in_channels {
        return Err(mismatch("conv2d", input, weight));
    }
    if bias != [1, out_channels, 1, 1] {
        return Err(mismatch("conv2d bias", weight, bias));
    }
    if kernel_h == 0 || kernel_w == 0 {
        return Err(invalid("conv2d", format!("empty kernel in weight {weight:?}")));
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be at least 1"));
    }
    let out_h = conv_output_len(height, kernel_h, stride, padding);
    let out_w = conv_output_len(width, kernel_w, stride, padding);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 => Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        }),
        _ => Err(invalid(
            "conv2d",
            format!(
                "empty output for input {input:?}, weight {weight:?}, stride {stride}, padding {padding}"
            ),
        )),
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let channel = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &channel[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let channel = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut channel[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding. `weight` is
/// `[Cout, Cin, kH, kW]` and `bias` is `[1, Cout, 1, 1]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let k = g.patch_len();
    let plane = g.out_plane();
    let in_item = g.in_channels * g.height * g.width;
    let out_item = g.out_channels * plane;
    let mut out = Tensor::zeros([g.batch, g.out_channels, g.out_h, g.out_w]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.batch {
        let image = &input.data()[n * in_item..(n + 1) * in_item];
        let dst = &mut out.data_mut()[n * out_item..(n + 1) * out_item];
        for (o, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(bias.data()[o]);
        }
        let patches: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut cols);
            &cols
        };
        T::gemm(
            g.out_channels,
            k,
            plane,
            T::one(),
            weight.data(),
            (k as isize, 1),
            patches,
            (plane as isize, 1),
            T::one(),
            dst,
            (plane as isize, 1),
        );
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let bias_shape = [1, weight.shape()[0], 1, 1];
    let g = conv_geometry(input.shape(), weight.shape(), bias_shape, stride, padding)?;
    if grad_out.shape() != [g.batch, g.out_channels, g.out_h, g.out_w] {
        return Err(mismatch("conv2d backward", input.shape(), grad_out.shape()));
    }
    let k = g.patch_len();
    let plane = g.out_plane();
    let in_item = g.in_channels * g.height * g.width;
    let out_item = g.out_channels * plane;
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(bias_shape);
    let mut d_input = need_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }];
    let mut d_cols = vec![T::zero(); if need_input { k * plane } else { 0 }];

    for n in 0..g.batch {
        let image = &input.data()[n * in_item..(n + 1) * in_item];
        let d_out = &grad_out.data()[n * out_item..(n + 1) * out_item];
        for (o, row) in d_out.chunks(plane).enumerate() {
            let s = row.iter().fold(T::zero(), |acc, &v| acc + v);
            d_bias.data_mut()[o] = d_bias.data()[o] + s;
        }
        let patches: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut cols);
            &cols
        };
        // dW += dOut * patches^T
        T::gemm(
            g.out_channels,
            plane,
            k,
            T::one(),
            d_out,
            (plane as isize, 1),
            patches,
            (1, plane as isize),
            T::one(),
            d_weight.data_mut(),
            (k as isize, 1),
        );
        if let Some(d_input) = d_input.as_mut() {
            let d_image = &mut d_input.data_mut()[n * in_item..(n + 1) * in_item];
            if g.is_pointwise() {
                T::gemm(
                    k,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight.data(),
                    (1, k as isize),
                    d_out,
                    (plane as isize, 1),
                    T::zero(),
                    d_image,
                    (plane as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight.data(),
                    (1, k as isize),
                    d_out,
                    (plane as isize, 1),
                    T::zero(),
                    &mut d_cols,
                    (plane as isize, 1),
                );
                col2im(&g, &d_cols, d_image);
            }
        }
    }
    Ok(ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

fn linear_dims(input: Shape, weight: Shape, bias: Shape) -> Result<(usize, usize, usize)> {
    let [n, c_in, h, w] = input;
    if h != 1 || w != 1 {
        return Err(invalid(
            "linear",
            format!("input {input:?} must have 1x1 spatial extent"),
        ));
    }
    let [wa, wb, rows, c_out] = weight;
    if wa != 1 || wb != 1 || rows != c_in {
        return Err(mismatch("linear", input, weight));
    }
    if bias != [1, c_out, 1, 1] {
        return Err(mismatch("linear bias", weight, bias));
    }
    Ok((n, c_in, c_out))
}

/// Fully connected layer over the channel axis. `weight` is stored as
/// `[1, 1, Cin, Cout]`, `bias` as `[1, Cout, 1, 1]`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c_in, c_out) = linear_dims(input.shape(), weight.shape(), bias.shape())?;
    let mut out = Tensor::zeros([n, c_out, 1, 1]);
    for row in out.data_mut().chunks_mut(c_out) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        c_in,
        c_out,
        T::one(),
        input.data(),
        (c_in as isize, 1),
        weight.data(),
        (c_out as isize, 1),
        T::one(),
        out.data_mut(),
        (c_out as isize, 1),
    );
    Ok(out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let c_out = weight.shape()[3];
    let (n, c_in, _) = linear_dims(input.shape(), weight.shape(), [1, c_out, 1, 1])?;
    if grad_out.shape() != [n, c_out, 1, 1] {
        return Err(mismatch("linear backward", input.shape(), grad_out.shape()));
    }
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros([1, c_out, 1, 1]);
    T::gemm(
        n,
        c_out,
        c_in,
        T::one(),
        grad_out.data(),
        (c_out as isize, 1),
        weight.data(),
        (1, c_out as isize),
        T::zero(),
        d_input.data_mut(),
        (c_in as isize, 1),
    );
    T::gemm(
        c_in,
        n,
        c_out,
        T::one(),
        input.data(),
        (1, c_in as isize),
        grad_out.data(),
        (c_out as isize, 1),
        T::zero(),
        d_weight.data_mut(),
        (c_out as isize, 1),
    );
    for row in grad_out.data().chunks(c_out) {
        for (b, &g) in d_bias.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(LinearGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if h * w == 0 {
        return Err(invalid("global_avg_pool", "empty spatial extent"));
    }
    let count = T::from_usize(h * w).expect("pool size");
    let data = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v) / count)
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input_shape;
    let count = T::from_usize(h * w).expect("pool size");
    let mut data = Vec::with_capacity(input_shape.iter().product());
    for &g in grad_out.data() {
        let v = g / count;
        data.extend(std::iter::repeat(v).take(h * w));
    }
    Tensor::new(input_shape, data).expect("pool gradient shape")
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU; the subgradient at exactly zero is taken to be zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("relu gradient shape")
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::new(output.shape(), data).expect("sigmoid gradient shape")
}

/// Which axis a gate broadcasts over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// `[N, C, 1, 1]`: one gate per channel, constant across space.
    Channel,
    /// `[N, 1, H, W]`: one gate per position, constant across channels.
    Spatial,
}

pub fn gate_mode(input: Shape, gate: Shape) -> Result<GateMode> {
    let [n, c, h, w] = input;
    if gate == [n, c, 1, 1] {
        Ok(GateMode::Channel)
    } else if gate == [n, 1, h, w] {
        Ok(GateMode::Spatial)
    } else {
        Err(mismatch("broadcast_mul", input, gate))
    }
}

pub fn broadcast_mul<T: Scalar>(input: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let mode = gate_mode(input.shape(), gate.shape())?;
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let mut out = input.clone();
    let g = gate.data();
    match mode {
        GateMode::Channel => {
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let s = g[i];
                chunk.iter_mut().for_each(|v| *v = *v * s);
            }
        }
        GateMode::Spatial => {
            for b in 0..n {
                let gate_plane = &g[b * plane..(b + 1) * plane];
                for ch in 0..c {
                    let start = (b * c + ch) * plane;
                    for (v, &s) in out.data_mut()[start..start + plane]
                        .iter_mut()
                        .zip(gate_plane)
                    {
                        *v = *v * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn broadcast_mul_backward<T: Scalar>(
    input: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
    mode: GateMode,
) -> (Tensor<T>, Tensor<T>) {
    let d_input = broadcast_mul(grad_out, gate).expect("gate shape checked on forward");
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let mut d_gate = Tensor::zeros(gate.shape());
    let x = input.data();
    let gy = grad_out.data();
    match mode {
        GateMode::Channel => {
            for (i, slot) in d_gate.data_mut().iter_mut().enumerate() {
                let range = i * plane..(i + 1) * plane;
                *slot = x[range.clone()]
                    .iter()
                    .zip(&gy[range])
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            }
        }
        GateMode::Spatial => {
            let dg = d_gate.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let start = (b * c + ch) * plane;
                    for p in 0..plane {
                        dg[b * plane + p] = dg[b * plane + p] + x[start + p] * gy[start + p];
                    }
                }
            }
        }
    }
    (d_input, d_gate)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b).map_err(|_| mismatch("add", a.shape(), b.shape()))?;
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("mul", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

/// 2x2 max pooling with stride 2. Also returns, per output element, the
/// flat input offset of the selected maximum (first in row-major order on
/// ties).
pub fn max_pool_2x2_with_argmax<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(
            "max_pool_2x2",
            format!("spatial dims of {:?} must be even", input.shape()),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let candidates = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.data_mut()[k] = x[best];
                argmax.push(best);
                k += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool_2x2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    max_pool_2x2_with_argmax(input).map(|(out, _)| out)
}

pub fn max_pool_2x2_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut d_input = Tensor::zeros(input_shape);
    let d = d_input.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    d_input
}

pub fn upsample_nearest_2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks(h * w) {
        for y in 0..oh {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                data.push(v);
                data.push(v);
            }
        }
    }
    Tensor::new([n, c, oh, ow], data).expect("upsample shape")
}

pub fn upsample_nearest_2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = grad_out.shape();
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.data();
    Tensor::from_fn([n, c, h, w], |b, ch, y, x| {
        let base = (b * c + ch) * oh * ow;
        let top = base + 2 * y * ow + 2 * x;
        let bottom = top + ow;
        g[top] + g[top + 1] + g[bottom] + g[bottom + 1]
    })
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if n != nb || h != hb || w != wb {
        return Err(mismatch("concat_channels", a.shape(), b.shape()));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new([n, ca + cb, h, w], data)
}

/// Binary segmentation loss on logits: `mix * soft_dice + (1 - mix) * bce`
/// where soft dice uses smoothing 1 over the whole batch and BCE is the
/// mean over all elements.
pub fn seg_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, mix: T) -> Result<T> {
    check_seg_loss(logits, target, mix)?;
    let one = T::one();
    let two = T::lit(2.0);
    let (mut inter, mut sum_p, mut sum_g, mut bce) = (T::zero(), T::zero(), T::zero(), T::zero());
    for (&x, &g) in logits.data().iter().zip(target.data()) {
        let p = sigmoid_scalar(x);
        inter = inter + p * g;
        sum_p = sum_p + p;
        sum_g = sum_g + g;
        // max(x, 0) - x g + ln(1 + e^{-|x|})
        bce = bce + x.max(T::zero()) - x * g + (-x.abs()).exp().ln_1p();
    }
    let count = T::from_usize(logits.len()).expect("element count");
    let dice = one - (two * inter + one) / (sum_p + sum_g + one);
    Ok(mix * dice + (one - mix) * bce / count)
}

pub(crate) fn check_seg_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, mix: T) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(mismatch("seg_loss", logits.shape(), target.shape()));
    }
    if logits.is_empty() {
        return Err(invalid("seg_loss", "empty input"));
    }
    if !(mix >= T::zero() && mix <= T::one()) {
        return Err(Error::config("loss_mix", "must lie in [0, 1]"));
    }
    if let Some(v) = target
        .data()
        .iter()
        .find(|&&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Invalid(format!(
            "seg_loss: target value {v:?} is not 0 or 1"
        )));
    }
    Ok(())
}

pub fn seg_loss_backward<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, mix: T) -> Tensor<T> {
    let one = T::one();
    let two = T::lit(2.0);
    let probs: Vec<T> = logits.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    let (mut inter, mut sum_p, mut sum_g) = (T::zero(), T::zero(), T::zero());
    for (&p, &g) in probs.iter().zip(target.data()) {
        inter = inter + p * g;
        sum_p = sum_p + p;
        sum_g = sum_g + g;
    }
    let denom = sum_p + sum_g + one;
    let numer = two * inter + one;
    let count = T::from_usize(logits.len()).expect("element count");
    let data = probs
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| {
            // d(dice loss)/dp = -(2 g denom - numer) / denom^2
            let d_dice_dp = -(two * g * denom - numer) / (denom * denom);
            let d_dice = d_dice_dp * p * (one - p);
            let d_bce = (p - g) / count;
            mix * d_dice + (one - mix) * d_bce
        })
        .collect();
    Tensor::new(logits.shape(), data).expect("loss gradient shape")
}
