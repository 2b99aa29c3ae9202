//! im2col convolution kernels shared by the tape's forward and backward passes.

use crate::error::{shape_err, Result};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            pad_h: padding,
            pad_w: padding,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            stride: 1,
            pad_h: kh / 2,
            pad_w: kw / 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], spec: ConvSpec) -> Result<Self> {
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(shape_err!(
                "conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}"
            ));
        };
        if kc != c {
            return Err(shape_err!("kernel expects {kc} input channels, input has {c}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!("kernel size {kh}x{kw} must be odd"));
        }
        if spec.stride == 0 {
            return Err(shape_err!("stride must be at least 1"));
        }
        let span_h = (h + 2 * spec.pad_h)
            .checked_sub(kh)
            .ok_or_else(|| shape_err!("kernel height {kh} exceeds padded input {h}"))?;
        let span_w = (w + 2 * spec.pad_w)
            .checked_sub(kw)
            .ok_or_else(|| shape_err!("kernel width {kw} exceeds padded input {w}"))?;
        if span_h % spec.stride != 0 || span_w % spec.stride != 0 {
            return Err(shape_err!(
                "non-integer conv output size for input {h}x{w}, kernel {kh}x{kw}, {spec:?}"
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: span_h / spec.stride + 1,
            ow: span_w / spec.stride + 1,
            spec,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad_h == 0 && self.spec.pad_w == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_dims(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}

/// Unfolds one sample `[C, H, W]` into a `[C*kh*kw, oh*ow]` patch matrix.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let l = g.out_len();
    let s = g.spec.stride as isize;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ky as isize - g.spec.pad_h as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - g.spec.pad_w as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

fn col2im_add(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let l = g.out_len();
    let s = g.spec.stride as isize;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ky as isize - g.spec.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s + kx as isize - g.spec.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = beta*c + a[m,k] * b[k,n]`, with optional transposes via strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements and the
    // strides above address exactly those ranges.
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

pub(crate) fn forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (rows, l) = (g.col_rows(), g.out_len());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.o * l];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * l]
    };
    for ni in 0..g.n {
        let xs = &x[ni * in_len..(ni + 1) * in_len];
        let ys = &mut out[ni * g.o * l..(ni + 1) * g.o * l];
        if g.is_pointwise() {
            gemm(g.o, rows, l, k, false, xs, false, 0.0, ys);
        } else {
            im2col(g, xs, &mut col);
            gemm(g.o, rows, l, k, false, &col, false, 0.0, ys);
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`; either may be skipped.
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, l) = (g.col_rows(), g.out_len());
    let in_len = g.c * g.h * g.w;
    let mut dx = want_dx.then(|| vec![0.0; g.n * in_len]);
    let mut dk = want_dk.then(|| vec![0.0; g.o * rows]);
    let pointwise = g.is_pointwise();
    let mut col = vec![0.0; if pointwise { 0 } else { rows * l }];
    let mut dcol = vec![0.0; if pointwise || !want_dx { 0 } else { rows * l }];
    for ni in 0..g.n {
        let xs = &x[ni * in_len..(ni + 1) * in_len];
        let dys = &dy[ni * g.o * l..(ni + 1) * g.o * l];
        if let Some(dk) = dk.as_mut() {
            let cols: &[f64] = if pointwise {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            gemm(g.o, l, rows, dys, false, cols, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[ni * in_len..(ni + 1) * in_len];
            if pointwise {
                gemm(rows, g.o, l, k, true, dys, false, 0.0, dxs);
            } else {
                gemm(rows, g.o, l, k, true, dys, false, 0.0, &mut dcol);
                col2im_add(g, &dcol, dxs);
            }
        }
    }
    (dx, dk)
}

/// Convolution without recording on a tape.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = ConvGeom::new(input.dims(), kernel.dims(), spec)?;
    let out = forward(&g, input.data(), kernel.data());
    Tensor::new(g.out_dims(), out)
}
