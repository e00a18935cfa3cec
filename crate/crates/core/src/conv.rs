//! 2D convolution (cross-correlation, zero padding) via im2col + GEMM,
//! plus the transposed convolution and both backward passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1, "same" padding for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2, 1)
    }

    fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if span > padded || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// `C = A·B` (or `C += A·B` when `accumulate`), with optional transposes.
/// `A` is `m×k` after transposition, `B` is `k×n`, `C` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are bounds-checked above against the strides passed.
    unsafe {
        matrixmultiply::dgemm(
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

struct Layout {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
}

fn im2col(x: &[f64], l: &Layout) -> Vec<f64> {
    let p = l.oh * l.ow;
    let mut cols = vec![0.0; l.c * l.kh * l.kw * p];
    let pad = l.geom.padding as isize;
    for ci in 0..l.c {
        let plane = &x[ci * l.h * l.w..(ci + 1) * l.h * l.w];
        for ki in 0..l.kh {
            for kj in 0..l.kw {
                let row = (ci * l.kh + ki) * l.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..l.oh {
                    let ii = (oi * l.geom.stride + ki * l.geom.dilation) as isize - pad;
                    if ii < 0 || ii >= l.h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * l.w..(ii as usize + 1) * l.w];
                    for oj in 0..l.ow {
                        let jj = (oj * l.geom.stride + kj * l.geom.dilation) as isize - pad;
                        if jj >= 0 && jj < l.w as isize {
                            dst[oi * l.ow + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], l: &Layout) -> Vec<f64> {
    let p = l.oh * l.ow;
    let mut x = vec![0.0; l.c * l.h * l.w];
    let pad = l.geom.padding as isize;
    for ci in 0..l.c {
        let plane = &mut x[ci * l.h * l.w..(ci + 1) * l.h * l.w];
        for ki in 0..l.kh {
            for kj in 0..l.kw {
                let row = (ci * l.kh + ki) * l.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..l.oh {
                    let ii = (oi * l.geom.stride + ki * l.geom.dilation) as isize - pad;
                    if ii < 0 || ii >= l.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * l.w..(ii as usize + 1) * l.w];
                    for oj in 0..l.ow {
                        let jj = (oj * l.geom.stride + kj * l.geom.dilation) as isize - pad;
                        if jj >= 0 && jj < l.w as isize {
                            dst[jj as usize] += src[oi * l.ow + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_layout(input: &Tensor, kernel: &Tensor, geom: ConvGeom) -> Result<(Layout, usize)> {
    let (c, h, w) = input.dims3()?;
    let [o, kc, kh, kw] = kernel.shape()[..] else {
        return Err(Error::Dimension(format!(
            "kernel must be rank 4, got {:?}",
            kernel.shape()
        )));
    };
    if kc != c {
        return Err(Error::Dimension(format!(
            "kernel expects {kc} input channels, input has {c}"
        )));
    }
    let (Some(oh), Some(ow)) = (geom.output_len(h, kh), geom.output_len(w, kw)) else {
        return Err(Error::Dimension(format!(
            "kernel {kh}×{kw} (dilation {}) larger than padded input {h}×{w} (padding {})",
            geom.dilation, geom.padding
        )));
    };
    Ok((
        Layout {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            geom,
        },
        o,
    ))
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, plane: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() * plane != out.len() {
            return Err(Error::Dimension(format!(
                "bias of length {} does not match {} output channels",
                b.len(),
                out.len() / plane
            )));
        }
        for (chunk, &bv) in out.chunks_exact_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(())
}

/// Cross-correlation of `input` (`C×H×W`) with `kernel` (`O×C×Kh×Kw`).
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let (l, o) = conv_layout(input, kernel, geom)?;
    let p = l.oh * l.ow;
    let cols = im2col(input.data(), &l);
    let mut out = vec![0.0; o * p];
    gemm(o, l.c * l.kh * l.kw, p, kernel.data(), false, &cols, false, &mut out, false);
    add_bias(&mut out, bias, p)?;
    Tensor::from_vec(&[o, l.oh, l.ow], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (l, o) = conv_layout(input, kernel, geom)?;
    let p = l.oh * l.ow;
    let ckk = l.c * l.kh * l.kw;
    if grad_out.shape() != [o, l.oh, l.ow] {
        return Err(Error::Shape {
            expected: vec![o, l.oh, l.ow],
            actual: grad_out.shape().to_vec(),
        });
    }
    let cols = im2col(input.data(), &l);
    let mut dk = vec![0.0; o * ckk];
    gemm(o, p, ckk, grad_out.data(), false, &cols, true, &mut dk, false);
    let db: Vec<f64> = grad_out.data().chunks_exact(p).map(|c| c.iter().sum()).collect();
    let dx = if need_input {
        let mut dcols = vec![0.0; ckk * p];
        gemm(ckk, o, p, kernel.data(), true, grad_out.data(), false, &mut dcols, false);
        Some(Tensor::from_vec(&[l.c, l.h, l.w], col2im(&dcols, &l))?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::from_vec(kernel.shape(), dk)?,
        Tensor::from_vec(&[o], db)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

fn transpose_layout(
    input: &Tensor,
    kernel: &Tensor,
    geom: ConvTransposeGeom,
) -> Result<(Layout, usize)> {
    let (cin, hin, win) = input.dims3()?;
    let [kc, cout, kh, kw] = kernel.shape()[..] else {
        return Err(Error::Dimension(format!(
            "kernel must be rank 4, got {:?}",
            kernel.shape()
        )));
    };
    if kc != cin {
        return Err(Error::Dimension(format!(
            "transposed kernel expects {kc} input channels, input has {cin}"
        )));
    }
    let out_len = |n: usize, k: usize| -> Option<usize> {
        ((n - 1) * geom.stride + k + geom.output_padding).checked_sub(2 * geom.padding)
    };
    let (Some(h), Some(w)) = (out_len(hin, kh), out_len(win, kw)) else {
        return Err(Error::Dimension("transposed convolution output is empty".into()));
    };
    // The forward conv mapping the (larger) output back onto the input grid.
    let l = Layout {
        c: cout,
        h,
        w,
        kh,
        kw,
        oh: hin,
        ow: win,
        geom: ConvGeom::new(geom.stride, geom.padding, 1),
    };
    let check = l.geom.output_len(h, kh).zip(l.geom.output_len(w, kw));
    if check != Some((hin, win)) {
        return Err(Error::Dimension(format!(
            "inconsistent transposed geometry for input {hin}×{win}"
        )));
    }
    Ok((l, cin))
}

/// Transposed convolution; `kernel` is `Cin×Cout×Kh×Kw`.
pub fn conv_transpose2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvTransposeGeom,
) -> Result<Tensor> {
    let (l, cin) = transpose_layout(input, kernel, geom)?;
    let p = l.oh * l.ow;
    let ckk = l.c * l.kh * l.kw;
    let mut cols = vec![0.0; ckk * p];
    gemm(ckk, cin, p, kernel.data(), true, input.data(), false, &mut cols, false);
    let mut out = col2im(&cols, &l);
    add_bias(&mut out, bias, l.h * l.w)?;
    Tensor::from_vec(&[l.c, l.h, l.w], out)
}

/// Gradients of [`conv_transpose2d`]: `(d_input, d_kernel, d_bias)`.
pub fn conv_transpose2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    geom: ConvTransposeGeom,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (l, cin) = transpose_layout(input, kernel, geom)?;
    let p = l.oh * l.ow;
    let ckk = l.c * l.kh * l.kw;
    if grad_out.shape() != [l.c, l.h, l.w] {
        return Err(Error::Shape {
            expected: vec![l.c, l.h, l.w],
            actual: grad_out.shape().to_vec(),
        });
    }
    let gcols = im2col(grad_out.data(), &l);
    let mut dk = vec![0.0; cin * ckk];
    gemm(cin, p, ckk, input.data(), false, &gcols, true, &mut dk, false);
    let db: Vec<f64> = grad_out
        .data()
        .chunks_exact(l.h * l.w)
        .map(|c| c.iter().sum())
        .collect();
    let dx = if need_input {
        let mut dx = vec![0.0; cin * p];
        gemm(cin, ckk, p, kernel.data(), false, &gcols, false, &mut dx, false);
        Some(Tensor::from_vec(input.shape(), dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::from_vec(kernel.shape(), dk)?,
        Tensor::from_vec(&[l.c], db)?,
    ))
}
