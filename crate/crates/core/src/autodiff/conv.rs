//! Convolution kernels (forward and analytic backward) built on im2col + sgemm.
//!
//! Weight layouts follow the usual conventions: `[out, in, k, k]` for
//! [`conv2d`] and `[in, out, k, k]` for [`conv_transpose2d`], so a transposed
//! convolution is exactly the adjoint of the ordinary one with the same weights.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of an ordinary convolution, if the window fits.
    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution.
    pub fn transpose_out(&self, size: usize) -> Option<usize> {
        if self.stride == 0 || size == 0 {
            return None;
        }
        ((size - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// `c[m,n] = beta*c + a[m,k] * b[k,n]` with optional transposes given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths are checked above against the strides used.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, Ho*Wo]` columns.
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [f32],
) {
    let k = g.kernel;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_weight(
    weight: &Tensor,
    c_in_dim: usize,
    c_in: usize,
    g: ConvGeom,
) -> Result<(usize, usize)> {
    let (a, b, kh, kw) = weight.dims4()?;
    if kh != g.kernel || kw != g.kernel {
        return Err(shape_err(format!(
            "kernel {:?} vs geometry k={}",
            weight.shape(),
            g.kernel
        )));
    }
    let dims = [a, b];
    if dims[c_in_dim] != c_in {
        return Err(shape_err(format!(
            "weight {:?} does not accept {c_in} input channels",
            weight.shape()
        )));
    }
    Ok((a, b))
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err(format!(
                "bias {:?} for {c_out} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

fn add_bias(out: &mut [f32], bias: Option<&Tensor>, c_out: usize, plane: usize) {
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[o % c_out];
            for v in chunk {
                *v += bv;
            }
        }
    }
}

fn bias_grad(dy: &Tensor) -> Tensor {
    let (n, c, h, w) = dy.dims4().expect("rank-4 upstream gradient");
    let plane = h * w;
    let mut g = vec![0.0f32; c];
    for s in 0..n {
        for (o, gv) in g.iter_mut().enumerate() {
            let off = (s * c + o) * plane;
            *gv += dy.data()[off..off + plane].iter().sum::<f32>();
        }
    }
    Tensor::new(&[c], g).expect("bias shape")
}

/// Cross-correlation of `[N, C, H, W]` input with `[O, C, k, k]` weights.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, _) = check_weight(weight, 1, c, g)?;
    check_bias(bias, o)?;
    let (ho, wo) = match (g.conv_out(h), g.conv_out(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(shape_err(format!(
                "input {h}x{w} too small for kernel {}",
                g.kernel
            )))
        }
    };
    let ckk = c * g.kernel * g.kernel;
    let p = ho * wo;
    let mut cols = vec![0.0f32; ckk * p];
    let mut out = vec![0.0f32; n * o * p];
    for s in 0..n {
        im2col(
            &x.data()[s * c * h * w..(s + 1) * c * h * w],
            c,
            h,
            w,
            g,
            ho,
            wo,
            &mut cols,
        );
        gemm(
            o,
            ckk,
            p,
            weight.data(),
            false,
            &cols,
            false,
            0.0,
            &mut out[s * o * p..(s + 1) * o * p],
        );
    }
    add_bias(&mut out, bias, o, p);
    Tensor::new(&[n, o, ho, wo], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    g: ConvGeom,
    dy: &Tensor,
) -> Result<ConvGrads> {
    let (n, c, h, w) = x.dims4()?;
    let (o, _) = check_weight(weight, 1, c, g)?;
    let (dn, dc, ho, wo) = dy.dims4()?;
    if dn != n || dc != o || g.conv_out(h) != Some(ho) || g.conv_out(w) != Some(wo) {
        return Err(shape_err(format!(
            "conv upstream {:?} for input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let ckk = c * g.kernel * g.kernel;
    let p = ho * wo;
    let mut cols = vec![0.0f32; ckk * p];
    let mut dcols = vec![0.0f32; ckk * p];
    let mut dw = vec![0.0f32; o * ckk];
    let mut dx = vec![0.0f32; n * c * h * w];
    for s in 0..n {
        let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
        let dys = &dy.data()[s * o * p..(s + 1) * o * p];
        im2col(xs, c, h, w, g, ho, wo, &mut cols);
        gemm(o, p, ckk, dys, false, &cols, true, 1.0, &mut dw);
        gemm(ckk, o, p, weight.data(), true, dys, false, 0.0, &mut dcols);
        col2im(
            &dcols,
            c,
            h,
            w,
            g,
            ho,
            wo,
            &mut dx[s * c * h * w..(s + 1) * c * h * w],
        );
    }
    Ok(ConvGrads {
        input: Tensor::new(x.shape(), dx)?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias: has_bias.then(|| bias_grad(dy)),
    })
}

/// Transposed convolution of `[N, Cin, H, W]` with `[Cin, Cout, k, k]` weights.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeom,
) -> Result<Tensor> {
    let (n, c_in, h, w) = x.dims4()?;
    let (_, c_out) = check_weight(weight, 0, c_in, g)?;
    check_bias(bias, c_out)?;
    let (ho, wo) = match (g.transpose_out(h), g.transpose_out(w)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(shape_err(format!(
                "transposed conv of {h}x{w} has empty output"
            )))
        }
    };
    let ckk = c_out * g.kernel * g.kernel;
    let p = h * w;
    let mut cols = vec![0.0f32; ckk * p];
    let mut out = vec![0.0f32; n * c_out * ho * wo];
    for s in 0..n {
        gemm(
            ckk,
            c_in,
            p,
            weight.data(),
            true,
            &x.data()[s * c_in * p..(s + 1) * c_in * p],
            false,
            0.0,
            &mut cols,
        );
        col2im(
            &cols,
            c_out,
            ho,
            wo,
            g,
            h,
            w,
            &mut out[s * c_out * ho * wo..(s + 1) * c_out * ho * wo],
        );
    }
    add_bias(&mut out, bias, c_out, ho * wo);
    Tensor::new(&[n, c_out, ho, wo], out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    g: ConvGeom,
    dy: &Tensor,
) -> Result<ConvGrads> {
    let (n, c_in, h, w) = x.dims4()?;
    let (_, c_out) = check_weight(weight, 0, c_in, g)?;
    let (dn, dc, ho, wo) = dy.dims4()?;
    if dn != n || dc != c_out || g.transpose_out(h) != Some(ho) || g.transpose_out(w) != Some(wo) {
        return Err(shape_err(format!(
            "transposed conv upstream {:?} for input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let ckk = c_out * g.kernel * g.kernel;
    let p = h * w;
    let mut cols = vec![0.0f32; ckk * p];
    let mut dw = vec![0.0f32; c_in * ckk];
    let mut dx = vec![0.0f32; n * c_in * p];
    for s in 0..n {
        let dys = &dy.data()[s * c_out * ho * wo..(s + 1) * c_out * ho * wo];
        im2col(dys, c_out, ho, wo, g, h, w, &mut cols);
        gemm(
            c_in,
            ckk,
            p,
            weight.data(),
            false,
            &cols,
            false,
            0.0,
            &mut dx[s * c_in * p..(s + 1) * c_in * p],
        );
        gemm(
            c_in,
            p,
            ckk,
            &x.data()[s * c_in * p..(s + 1) * c_in * p],
            false,
            &cols,
            true,
            1.0,
            &mut dw,
        );
    }
    Ok(ConvGrads {
        input: Tensor::new(x.shape(), dx)?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias: has_bias.then(|| bias_grad(dy)),
    })
}
