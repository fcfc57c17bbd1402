//! 2-D convolution and transposed convolution via im2col / col2im.
//!
//! Images are `[batch, channels, height, width]`. Column buffers are
//! `[channels * k * k, batch * out_h * out_w]`, so one GEMM covers the whole
//! batch.

use crate::error::{NnError, Result};
use crate::gemm::{matmul, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Spatial output size of a forward convolution.
    pub fn conv_out(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Spatial output size of a transposed convolution (no output padding).
    pub fn transposed_out(&self, input: usize) -> Option<usize> {
        if input == 0 || self.kernel == 0 || self.stride == 0 {
            return None;
        }
        ((input - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    batch: usize,
    channels: usize,
    (h, w): (usize, usize),
    g: ConvGeometry,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let k = g.kernel;
    let plane = oh * ow;
    let ncols = batch * plane;
    let mut cols = vec![0.0; channels * k * k * ncols];
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let src = &x[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let out_row = b * plane + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[out_row + ox] = src[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    batch: usize,
    channels: usize,
    (h, w): (usize, usize),
    g: ConvGeometry,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let k = g.kernel;
    let plane = oh * ow;
    let ncols = batch * plane;
    let mut x = vec![0.0; batch * channels * h * w];
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let dst = &mut x[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let in_row = b * plane + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[iy * w + ix as usize] += src[in_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, l] -> [c, n * l]`
fn batch_major_to_channel_major(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * l..(b * c + ch + 1) * l];
            out[ch * n * l + b * l..ch * n * l + (b + 1) * l].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n * l] -> [n, c, l]`
fn channel_major_to_batch_major(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * l..(b * c + ch + 1) * l]
                .copy_from_slice(&x[ch * n * l + b * l..ch * n * l + (b + 1) * l]);
        }
    }
    out
}

fn check_image(x: &Tensor, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] if *c == channels => Ok((*n, *h, *w)),
        s => Err(NnError::Shape(format!(
            "{what}: expected [batch, {channels}, h, w], got {s:?}"
        ))),
    }
}

/// Output and the column buffer needed by [`conv2d_backward`].
pub struct ConvOutput {
    pub output: Tensor,
    pub cols: Vec<f64>,
}

/// Cross-correlation with weight `[out, in, k, k]`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &[f64], g: ConvGeometry) -> Result<ConvOutput> {
    let (out_c, in_c) = (weight.dim(0), weight.dim(1));
    let (n, h, w) = check_image(x, in_c, "conv2d input")?;
    let oh = g
        .conv_out(h)
        .ok_or_else(|| NnError::Shape(format!("conv2d: height {h} too small for {g:?}")))?;
    let ow = g
        .conv_out(w)
        .ok_or_else(|| NnError::Shape(format!("conv2d: width {w} too small for {g:?}")))?;
    let l = oh * ow;
    let kk = in_c * g.kernel * g.kernel;
    let cols = im2col(x.data(), n, in_c, (h, w), g, (oh, ow));
    let mut y = vec![0.0; out_c * n * l];
    for (o, chunk) in y.chunks_mut(n * l).enumerate() {
        chunk.fill(bias[o]);
    }
    matmul(
        MatRef::new(weight.data(), out_c, kk),
        MatRef::new(&cols, kk, n * l),
        &mut y,
        1.0,
    );
    let output = Tensor::from_vec(&[n, out_c, oh, ow], channel_major_to_batch_major(&y, n, out_c, l))?;
    Ok(ConvOutput { output, cols })
}

/// Accumulates weight and bias gradients, returns the input gradient.
pub fn conv2d_backward(
    input_shape: &[usize],
    cols: &[f64],
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Result<Tensor> {
    let (out_c, in_c) = (weight.dim(0), weight.dim(1));
    let (n, oh, ow) = check_image(grad_out, out_c, "conv2d grad")?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let l = oh * ow;
    let kk = in_c * g.kernel * g.kernel;
    let gy = batch_major_to_channel_major(grad_out.data(), n, out_c, l);
    for (o, chunk) in gy.chunks(n * l).enumerate() {
        dbias[o] += chunk.iter().sum::<f64>();
    }
    matmul(
        MatRef::new(&gy, out_c, n * l),
        MatRef::new(cols, kk, n * l).t(),
        dweight,
        1.0,
    );
    let mut dcols = vec![0.0; kk * n * l];
    matmul(
        MatRef::new(weight.data(), out_c, kk).t(),
        MatRef::new(&gy, out_c, n * l),
        &mut dcols,
        0.0,
    );
    Tensor::from_vec(&[n, in_c, h, w], col2im(&dcols, n, in_c, (h, w), g, (oh, ow)))
}

/// Transposed convolution with weight `[in, out, k, k]`; the adjoint of
/// [`conv2d_forward`] in its input argument.
pub fn conv_transpose2d_forward(x: &Tensor, weight: &Tensor, bias: &[f64], g: ConvGeometry) -> Result<Tensor> {
    let (in_c, out_c) = (weight.dim(0), weight.dim(1));
    let (n, h, w) = check_image(x, in_c, "conv_transpose2d input")?;
    let oh = g
        .transposed_out(h)
        .ok_or_else(|| NnError::Shape(format!("conv_transpose2d: bad geometry {g:?} for height {h}")))?;
    let ow = g
        .transposed_out(w)
        .ok_or_else(|| NnError::Shape(format!("conv_transpose2d: bad geometry {g:?} for width {w}")))?;
    let l = h * w;
    let kk = out_c * g.kernel * g.kernel;
    let xc = batch_major_to_channel_major(x.data(), n, in_c, l);
    let mut cols = vec![0.0; kk * n * l];
    matmul(
        MatRef::new(weight.data(), in_c, kk).t(),
        MatRef::new(&xc, in_c, n * l),
        &mut cols,
        0.0,
    );
    let mut y = col2im(&cols, n, out_c, (oh, ow), g, (h, w));
    let plane = oh * ow;
    for b in 0..n {
        for (o, &bo) in bias.iter().enumerate() {
            for v in &mut y[(b * out_c + o) * plane..(b * out_c + o + 1) * plane] {
                *v += bo;
            }
        }
    }
    Tensor::from_vec(&[n, out_c, oh, ow], y)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Result<Tensor> {
    let (in_c, out_c) = (weight.dim(0), weight.dim(1));
    let (n, h, w) = check_image(x, in_c, "conv_transpose2d input")?;
    let (_, oh, ow) = check_image(grad_out, out_c, "conv_transpose2d grad")?;
    let l = h * w;
    let kk = out_c * g.kernel * g.kernel;
    let plane = oh * ow;
    let gy = grad_out.data();
    for b in 0..n {
        for (o, db) in dbias.iter_mut().enumerate() {
            *db += gy[(b * out_c + o) * plane..(b * out_c + o + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    let dcols = im2col(gy, n, out_c, (oh, ow), g, (h, w));
    let xc = batch_major_to_channel_major(x.data(), n, in_c, l);
    matmul(
        MatRef::new(&xc, in_c, n * l),
        MatRef::new(&dcols, kk, n * l).t(),
        dweight,
        1.0,
    );
    let mut dx = vec![0.0; in_c * n * l];
    matmul(
        MatRef::new(weight.data(), in_c, kk),
        MatRef::new(&dcols, kk, n * l),
        &mut dx,
        0.0,
    );
    Tensor::from_vec(&[n, in_c, h, w], channel_major_to_batch_major(&dx, n, in_c, l))
}
