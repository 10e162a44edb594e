//! Single-image CHW feature tensors and the handful of primitives the U-Net
//! needs, each with its backward pass.
//!
//! Convolutions use "same" padding and are lowered to one sgemm call through
//! an im2col buffer. All reductions run in a fixed order so results are
//! bit-reproducible on a given platform.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.height, self.width)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// `c = a · b (+ c if accumulate)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the index ranges implied by (m, k, n) and the strides lie within
    // the slices; callers pass dense row-major buffers sized accordingly.
    unsafe {
        matrixmultiply::sgemm(
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
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col3(x: &Tensor, col: &mut Vec<f32>) {
    let (c, h, w) = x.shape();
    let hw = h * w;
    col.clear();
    col.resize(c * 9 * hw, 0.0);
    for ci in 0..c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let dst = &mut col[row..row + hw];
                let (x_lo, x_hi) = (usize::from(kx == 0), w - usize::from(kx == 2));
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for xx in x_lo..x_hi {
                        drow[xx] = srow[xx + kx - 1];
                    }
                }
            }
        }
    }
}

fn col2im3(col: &[f32], dx: &mut Tensor) {
    let (c, h, w) = dx.shape();
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut dx.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let src = &col[row..row + hw];
                let (x_lo, x_hi) = (usize::from(kx == 0), w - usize::from(kx == 2));
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &src[y * w..(y + 1) * w];
                    for xx in x_lo..x_hi {
                        drow[xx + kx - 1] += srow[xx];
                    }
                }
            }
        }
    }
}

/// Kernel size, output channels and parameter slices of one convolution.
/// `weight` is laid out `[cout][cin][k][k]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    fn check(&self, x: &Tensor, weight: &[f32], bias: &[f32]) -> Result<()> {
        if !matches!(self.kernel, 1 | 3) {
            return Err(Error::Shape(format!("unsupported kernel size {}", self.kernel)));
        }
        if x.channels != self.cin {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.cin, x.channels
            )));
        }
        if weight.len() != self.weight_len() || bias.len() != self.cout {
            return Err(Error::Shape(format!(
                "convolution parameters: weight {} (expected {}), bias {} (expected {})",
                weight.len(),
                self.weight_len(),
                bias.len(),
                self.cout
            )));
        }
        Ok(())
    }
}

/// Same-padded 2-D convolution.
pub fn conv2d(x: &Tensor, shape: ConvShape, weight: &[f32], bias: &[f32]) -> Result<Tensor> {
    shape.check(x, weight, bias)?;
    let hw = x.plane();
    let kk = shape.cin * shape.kernel * shape.kernel;
    let mut y = Tensor::zeros(shape.cout, x.height, x.width);
    for (co, chunk) in y.data.chunks_mut(hw).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[co]);
    }
    if shape.kernel == 1 {
        gemm(shape.cout, kk, hw, weight, (kk, 1), &x.data, (hw, 1), &mut y.data, true);
    } else {
        let mut col = Vec::new();
        im2col3(x, &mut col);
        gemm(shape.cout, kk, hw, weight, (kk, 1), &col, (hw, 1), &mut y.data, true);
    }
    Ok(y)
}

/// Backward pass of [`conv2d`]. Accumulates into `dweight` / `dbias` and
/// returns the input gradient when `need_input_grad` is set.
pub fn conv2d_backward(
    x: &Tensor,
    shape: ConvShape,
    weight: &[f32],
    dy: &Tensor,
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_input_grad: bool,
) -> Option<Tensor> {
    let hw = x.plane();
    let kk = shape.cin * shape.kernel * shape.kernel;
    for (co, chunk) in dy.data.chunks(hw).enumerate() {
        dbias[co] += chunk.iter().sum::<f32>();
    }
    if shape.kernel == 1 {
        gemm(shape.cout, hw, kk, &dy.data, (hw, 1), &x.data, (1, hw), dweight, true);
        if !need_input_grad {
            return None;
        }
        let mut dx = x.zeros_like();
        gemm(kk, shape.cout, hw, weight, (1, kk), &dy.data, (hw, 1), &mut dx.data, false);
        return Some(dx);
    }
    let mut col = Vec::new();
    im2col3(x, &mut col);
    gemm(shape.cout, hw, kk, &dy.data, (hw, 1), &col, (1, hw), dweight, true);
    if !need_input_grad {
        return None;
    }
    let mut dcol = vec![0.0f32; kk * hw];
    gemm(kk, shape.cout, hw, weight, (1, kk), &dy.data, (hw, 1), &mut dcol, false);
    let mut dx = x.zeros_like();
    col2im3(&dcol, &mut dx);
    Some(dx)
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` by the ReLU output's support.
pub fn relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 2x2 max pooling. Returns the pooled tensor and the flat argmax index of
/// every output cell.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "max pooling needs even spatial size, got {}x{}",
            x.height, x.width
        )));
    }
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = (ci * oh + oy) * ow + ox;
                y.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward(input_shape: (usize, usize, usize), arg: &[u32], dy: &Tensor) -> Tensor {
    let (c, h, w) = input_shape;
    let mut dx = Tensor::zeros(c, h, w);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Source taps of 2x bilinear upsampling along one axis (half-pixel centres,
/// edge-clamped): output index -> (lo, hi, weight of hi).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f32)
        })
        .collect()
}

pub fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.shape();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut y = Tensor::zeros(c, 2 * h, 2 * w);
    let mut rows = vec![0.0f32; 2 * w];
    for ci in 0..c {
        let src = x.channel(ci);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                rows[ox] = top + (bot - top) * fy;
            }
            let o = (ci * 2 * h + oy) * 2 * w;
            y.data[o..o + 2 * w].copy_from_slice(&rows);
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (c, h2, w2) = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let g = dy.channel(ci);
        let d = &mut dx.data[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * w2 + ox];
                let (top, bot) = (v * (1.0 - fy), v * fy);
                d[y0 * w + x0] += top * (1.0 - fx);
                d[y0 * w + x1] += top * fx;
                d[y1 * w + x0] += bot * (1.0 - fx);
                d[y1 * w + x1] += bot * fx;
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "concat of {}x{} and {}x{} features",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    })
}

pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let cut = first * x.plane();
    (
        Tensor {
            channels: first,
            height: x.height,
            width: x.width,
            data: x.data[..cut].to_vec(),
        },
        Tensor {
            channels: x.channels - first,
            height: x.height,
            width: x.width,
            data: x.data[cut..].to_vec(),
        },
    )
}
