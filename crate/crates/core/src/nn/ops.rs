//! Differentiable primitives. Each forward has a matching backward that
//! returns the exact adjoint.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, Tensor};

/// Square `k × k` convolution with zero padding `k / 2` and stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    /// `out_ch × in_ch × kernel × kernel`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub moments: AdamMoments,
}

/// First and second Adam moments, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub weight_m: Vec<f64>,
    pub weight_v: Vec<f64>,
    pub bias_m: Vec<f64>,
    pub bias_v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(weights: usize, biases: usize) -> Self {
        AdamMoments {
            weight_m: vec![0.0; weights],
            weight_v: vec![0.0; weights],
            bias_m: vec![0.0; biases],
            bias_v: vec![0.0; biases],
        }
    }
}

impl ConvParams {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let n = out_ch * in_ch * kernel * kernel;
        ConvParams {
            out_ch,
            in_ch,
            kernel,
            weight: vec![0.0; n],
            bias: vec![0.0; out_ch],
            moments: AdamMoments::zeros(n, out_ch),
        }
    }

    /// He-uniform weights, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero bias.
    pub fn he_uniform(out_ch: usize, in_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(out_ch, in_ch, kernel);
        let limit = (6.0 / (in_ch * kernel * kernel) as f64).sqrt();
        for w in &mut p.weight {
            *w = rng.gen_range(-limit..limit);
        }
        p
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `C (m × n) = alpha · A (m × k) · B (k × n) + beta · C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: bounds checked above; the three buffers are distinct borrows.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `c × h × w` sample into a `(c·k·k) × (h·w)` patch matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx >= 0 && sx < w as isize { src[sx as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    for (x, &g) in src.iter().enumerate() {
                        let sx = x as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv(input: &Tensor, params: &ConvParams) -> Result<(), NnError> {
    if input.channels() != params.in_ch {
        return Err(NnError::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            params.in_ch,
            input.channels()
        )));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(NnError::ShapeMismatch("conv input has an empty spatial axis".into()));
    }
    Ok(())
}

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor, NnError> {
    check_conv(input, params)?;
    let [n, c, h, w] = input.shape();
    let hw = h * w;
    let patch = params.patch();
    let mut out = Tensor::zeros([n, params.out_ch, h, w]);
    let mut cols = if params.kernel == 1 { Vec::new() } else { vec![0.0; patch * hw] };
    for s in 0..n {
        let x = input.sample(s);
        let y = out.sample_mut(s);
        for (o, &b) in params.bias.iter().enumerate() {
            y[o * hw..(o + 1) * hw].fill(b);
        }
        let b: &[f64] = if params.kernel == 1 {
            x
        } else {
            im2col(x, c, h, w, params.kernel, &mut cols);
            &cols
        };
        gemm(params.out_ch, patch, hw, &params.weight, (patch, 1), b, (hw, 1), 1.0, y);
    }
    Ok(out)
}

pub fn conv2d_backward(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads, NnError> {
    check_conv(input, params)?;
    let [n, c, h, w] = input.shape();
    if grad_out.shape() != [n, params.out_ch, h, w] {
        return Err(NnError::ShapeMismatch(format!("conv grad shape {:?}", grad_out.shape())));
    }
    let hw = h * w;
    let patch = params.patch();
    let mut grads = ConvGrads {
        input: Tensor::zeros(input.shape()),
        weight: vec![0.0; params.weight.len()],
        bias: vec![0.0; params.out_ch],
    };
    let mut cols = vec![0.0; patch * hw];
    let mut dcols = vec![0.0; patch * hw];
    for s in 0..n {
        let dy = grad_out.sample(s);
        for (o, gb) in grads.bias.iter_mut().enumerate() {
            *gb += dy[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        let x = input.sample(s);
        let b: &[f64] = if params.kernel == 1 {
            x
        } else {
            im2col(x, c, h, w, params.kernel, &mut cols);
            &cols
        };
        // dW (out × patch) += dY (out × hw) · colsᵀ (hw × patch)
        gemm(params.out_ch, hw, patch, dy, (hw, 1), b, (1, hw), 1.0, &mut grads.weight);
        // dcols (patch × hw) = Wᵀ (patch × out) · dY (out × hw)
        if params.kernel == 1 {
            gemm(patch, params.out_ch, hw, &params.weight, (1, patch), dy, (hw, 1), 0.0, grads.input.sample_mut(s));
        } else {
            gemm(patch, params.out_ch, hw, &params.weight, (1, patch), dy, (hw, 1), 0.0, &mut dcols);
            col2im(&dcols, c, h, w, params.kernel, grads.input.sample_mut(s));
        }
    }
    Ok(grads)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        // NaN passes through
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

/// Takes the forward output `s = sigmoid(x)`: `dx = dy · s · (1 - s)`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &s) in g.data_mut().iter_mut().zip(output.data()) {
        *gv *= s * (1.0 - s);
    }
    g
}

/// 2×2 max pooling, stride 2. Returns the output and, per output element,
/// the flat input index that won (first in row-major order on ties).
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::OddSpatialDims(h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; out.len()];
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                dst[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward(input_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += v;
    }
    g
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..oh {
            let srow = &src[plane * h * w + (y / 2) * w..][..w];
            let drow = &mut dst[plane * oh * ow + y * ow..][..ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

/// Sums each 2×2 block of the upstream gradient.
pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let [n, c, oh, ow] = grad_out.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut g = Tensor::zeros([n, c, h, w]);
    let src = grad_out.data();
    let dst = g.data_mut();
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                dst[plane * h * w + (y / 2) * w + x / 2] += src[plane * oh * ow + y * ow + x];
            }
        }
    }
    g
}

/// Channel concatenation in argument order.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor, NnError> {
    let first = parts.first().ok_or_else(|| NnError::ShapeMismatch("concat of nothing".into()))?;
    let [n, _, h, w] = first.shape();
    for p in parts {
        let [pn, _, ph, pw] = p.shape();
        if (pn, ph, pw) != (n, h, w) {
            return Err(NnError::ShapeMismatch(format!("concat {:?} with {:?}", first.shape(), p.shape())));
        }
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Tensor::zeros([n, total, h, w]);
    for s in 0..n {
        let dst = out.sample_mut(s);
        let mut at = 0;
        for p in parts {
            let src = p.sample(s);
            dst[at..at + src.len()].copy_from_slice(src);
            at += src.len();
        }
    }
    Ok(out)
}

pub fn concat_backward(channels: &[usize], grad_out: &Tensor) -> Vec<Tensor> {
    let [n, _, h, w] = grad_out.shape();
    let mut parts: Vec<Tensor> = channels.iter().map(|&c| Tensor::zeros([n, c, h, w])).collect();
    for s in 0..n {
        let src = grad_out.sample(s);
        let mut at = 0;
        for p in parts.iter_mut() {
            let dst = p.sample_mut(s);
            let len = dst.len();
            dst.copy_from_slice(&src[at..at + len]);
            at += len;
        }
    }
    parts
}
