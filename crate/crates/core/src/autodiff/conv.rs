//! 2-D convolution and its adjoint, lowered to im2col + GEMM.
//!
//! Padding conventions:
//! * [`Padding::Same`] zero-pads `(k - 1) / 2` in front and the remainder at the back,
//!   which is symmetric for the odd kernels used throughout.
//! * Transposed convolution with stride `s` and kernel extent `k >= s` produces
//!   `input * s` outputs per axis by cropping `(k - s) / 2` in front and the rest at
//!   the back of the full transposed output. With `k = 2s` this is a symmetric crop
//!   of `s / 2` for even strides. [`Tape::conv2d_strided`] uses the same offsets and is
//!   its exact adjoint.

use std::ops::Range;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{GradSink, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of a forward (cross-correlation) convolution `x[c_in, h_in, w_in] -> y[c_out, h_out, w_out]`.
/// Output position `o` reads input `o * stride + i - pad` for kernel tap `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn in_plane(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }
    fn out_plane(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }
    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds output rows `rows` of one batch item into `cols[c_in * kh * kw, rows.len() * w_out]`.
fn im2col(g: &ConvGeom, x: &[f64], rows: Range<usize>, cols: &mut [f64]) {
    let npix = rows.len() * g.w_out;
    for c in 0..g.c_in {
        let plane = &x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                let (lo, hi) = valid_range(j, g.pad_w, g.stride, g.w_in, g.w_out);
                for (r, oh) in rows.clone().enumerate() {
                    let d = &mut dst[r * g.w_out..(r + 1) * g.w_out];
                    let ih = (oh * g.stride + i) as isize - g.pad_h as isize;
                    if ih < 0 || ih as usize >= g.h_in || lo >= hi {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                    d[..lo].fill(0.0);
                    d[hi..].fill(0.0);
                    if g.stride == 1 {
                        let start = lo + j - g.pad_w;
                        d[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ow in lo..hi {
                            d[ow] = src[ow * g.stride + j - g.pad_w];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `x`, accumulating.
fn col2im(g: &ConvGeom, cols: &[f64], rows: Range<usize>, x: &mut [f64]) {
    let npix = rows.len() * g.w_out;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * npix..(row + 1) * npix];
                let (lo, hi) = valid_range(j, g.pad_w, g.stride, g.w_in, g.w_out);
                if lo >= hi {
                    continue;
                }
                for (r, oh) in rows.clone().enumerate() {
                    let ih = (oh * g.stride + i) as isize - g.pad_h as isize;
                    if ih < 0 || ih as usize >= g.h_in {
                        continue;
                    }
                    let s = &src[r * g.w_out..(r + 1) * g.w_out];
                    let d = &mut plane[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                    for ow in lo..hi {
                        d[ow * g.stride + j - g.pad_w] += s[ow];
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose tap `j` lands inside the input row.
fn valid_range(j: usize, pad: usize, stride: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    // need 0 <= ow*stride + j - pad < w_in
    let lo = if j >= pad { 0 } else { (pad - j).div_ceil(stride) };
    let limit = w_in + pad; // ow*stride + j < limit
    let hi = if limit > j { (limit - j).div_ceil(stride) } else { 0 };
    (lo.min(w_out), hi.min(w_out))
}

/// Target size of one im2col block, in values; keeps the block cache-resident.
const COL_BLOCK: usize = 1 << 15;

/// Output-row ranges whose im2col blocks stay near [`COL_BLOCK`] values.
fn row_chunks(g: &ConvGeom) -> impl Iterator<Item = Range<usize>> {
    let per_row = g.patch() * g.w_out;
    let step = (COL_BLOCK / per_row.max(1)).clamp(1, g.h_out);
    let h = g.h_out;
    (0..h).step_by(step).map(move |r0| r0..(r0 + step).min(h))
}

/// Copies pixels `px` of every channel plane of `src[channels, plane]` into `dst[channels, px.len()]`.
fn gather(src: &[f64], channels: usize, plane: usize, px: Range<usize>, dst: &mut [f64]) {
    let w = px.len();
    for c in 0..channels {
        dst[c * w..(c + 1) * w].copy_from_slice(&src[c * plane + px.start..c * plane + px.end]);
    }
}

fn scatter_add(src: &[f64], channels: usize, plane: usize, px: Range<usize>, dst: &mut [f64]) {
    let w = px.len();
    for c in 0..channels {
        for (d, s) in dst[c * plane + px.start..c * plane + px.end].iter_mut().zip(&src[c * w..(c + 1) * w]) {
            *d += s;
        }
    }
}

fn check_rank4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!(
            "{what} must be rank 4, got shape {:?}",
            t.shape()
        ))),
    }
}

fn check_bias(tape: &Tape, b: Option<Var>, channels: usize, what: &str) -> Result<()> {
    if let Some(b) = b {
        if tape.shape(b) != [channels] {
            return Err(Error::shape(format!(
                "{what} bias has shape {:?}, expected [{channels}]",
                tape.shape(b)
            )));
        }
    }
    Ok(())
}

fn add_bias(out: &mut [f64], bias: &[f64], batch: usize, pixels: usize) {
    let ch = bias.len();
    for n in 0..batch {
        for (c, &bv) in bias.iter().enumerate() {
            let start = (n * ch + c) * pixels;
            for v in &mut out[start..start + pixels] {
                *v += bv;
            }
        }
    }
}

fn bias_grad(g: &[f64], batch: usize, channels: usize, pixels: usize, buf: &mut [f64]) {
    for n in 0..batch {
        for (c, acc) in buf.iter_mut().enumerate() {
            let start = (n * channels + c) * pixels;
            *acc += g[start..start + pixels].iter().sum::<f64>();
        }
    }
}

impl Tape {
    /// Stride-1 cross-correlation. `x: [batch, c_in, H, W]`, `kernel: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let [batch, c_in, h_in, w_in] = check_rank4(self.value(x), "conv2d input")?;
        let [c_out, kc, kh, kw] = check_rank4(self.value(kernel), "conv2d kernel")?;
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels but kernel expects {kc} (kernel shape {:?})",
                self.shape(kernel)
            )));
        }
        let (pad_h, pad_w, h_out, w_out) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h_in, w_in),
            Padding::Valid => {
                if kh > h_in || kw > w_in {
                    return Err(Error::shape(format!(
                        "conv2d: kernel {kh}x{kw} larger than unpadded input {h_in}x{w_in}"
                    )));
                }
                (0, 0, h_in - kh + 1, w_in - kw + 1)
            }
        };
        check_bias(self, bias, c_out, "conv2d")?;
        let geom = ConvGeom {
            batch,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride: 1,
            pad_h,
            pad_w,
            h_out,
            w_out,
        };
        Ok(self.conv_forward(x, kernel, bias, geom))
    }

    /// Strided cross-correlation mapping `H * stride -> H`, the adjoint of
    /// [`Tape::conv_transpose2d`] with the same kernel.
    pub fn conv2d_strided(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (geom, _) = self.strided_geom(x, kernel, stride, false)?;
        check_bias(self, bias, geom.c_out, "conv2d_strided")?;
        Ok(self.conv_forward(x, kernel, bias, geom))
    }

    /// Transposed convolution. `x: [batch, c_in, H, W]`, `kernel: [c_in, c_out, kh, kw]`,
    /// output `[batch, c_out, H * stride, W * stride]`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (geom, _) = self.strided_geom(x, kernel, stride, true)?;
        check_bias(self, bias, geom.c_in, "conv_transpose2d")?;

        let mut out = vec![0.0; geom.batch * geom.in_plane()];
        let xv = self.value(x).data();
        let wv = self.value(kernel).data();
        let mut dcols = Vec::new();
        let mut xc = Vec::new();
        for n in 0..geom.batch {
            let xb = &xv[n * geom.out_plane()..(n + 1) * geom.out_plane()];
            let ob = &mut out[n * geom.in_plane()..(n + 1) * geom.in_plane()];
            for rows in row_chunks(&geom) {
                let px = rows.start * geom.w_out..rows.end * geom.w_out;
                xc.resize(geom.c_out * px.len(), 0.0);
                gather(xb, geom.c_out, geom.out_pixels(), px.clone(), &mut xc);
                dcols.clear();
                dcols.resize(geom.patch() * px.len(), 0.0);
                gemm_tn(geom.patch(), geom.c_out, px.len(), wv, &xc, &mut dcols);
                col2im(&geom, &dcols, rows, ob);
            }
        }
        if let Some(b) = bias {
            add_bias(&mut out, self.value(b).data(), geom.batch, geom.h_in * geom.w_in);
        }
        let t = Tensor::new(vec![geom.batch, geom.c_in, geom.h_in, geom.w_in], out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(t, Op::ConvTranspose { x, w: kernel, b: bias, geom }, &inputs))
    }

    /// Geometry of the strided forward convolution (large -> small). For the transposed
    /// direction `x` is the small tensor.
    fn strided_geom(&self, x: Var, kernel: Var, stride: usize, transposed: bool) -> Result<(ConvGeom, ())> {
        if stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        let [batch, cx, hx, wx] = check_rank4(self.value(x), "input")?;
        let [k0, k1, kh, kw] = check_rank4(self.value(kernel), "kernel")?;
        // kernel is always [small-side channels, large-side channels, kh, kw]
        let (c_small, c_large) = (k0, k1);
        if kh < stride || kw < stride {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} smaller than stride {stride}"
            )));
        }
        let (h_in, w_in, h_out, w_out) = if transposed {
            if cx != c_small {
                return Err(Error::shape(format!(
                    "conv_transpose2d: input has {cx} channels but kernel expects {c_small} (kernel shape {:?})",
                    self.shape(kernel)
                )));
            }
            (hx * stride, wx * stride, hx, wx)
        } else {
            if cx != c_large {
                return Err(Error::shape(format!(
                    "conv2d_strided: input has {cx} channels but kernel expects {c_large} (kernel shape {:?})",
                    self.shape(kernel)
                )));
            }
            if hx % stride != 0 || wx % stride != 0 {
                return Err(Error::shape(format!(
                    "conv2d_strided: extents {hx}x{wx} not divisible by stride {stride}"
                )));
            }
            (hx, wx, hx / stride, wx / stride)
        };
        Ok((
            ConvGeom {
                batch,
                c_in: c_large,
                h_in,
                w_in,
                c_out: c_small,
                kh,
                kw,
                stride,
                pad_h: (kh - stride) / 2,
                pad_w: (kw - stride) / 2,
                h_out,
                w_out,
            },
            (),
        ))
    }

    fn conv_forward(&mut self, x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom) -> Var {
        let mut out = vec![0.0; geom.batch * geom.out_plane()];
        let xv = self.value(x).data();
        let wv = self.value(kernel).data();
        let mut cols = Vec::new();
        let mut oc = Vec::new();
        for n in 0..geom.batch {
            let xb = &xv[n * geom.in_plane()..(n + 1) * geom.in_plane()];
            let ob = &mut out[n * geom.out_plane()..(n + 1) * geom.out_plane()];
            for rows in row_chunks(&geom) {
                let px = rows.start * geom.w_out..rows.end * geom.w_out;
                cols.resize(geom.patch() * px.len(), 0.0);
                im2col(&geom, xb, rows, &mut cols);
                oc.clear();
                oc.resize(geom.c_out * px.len(), 0.0);
                gemm_nn(geom.c_out, geom.patch(), px.len(), wv, &cols, &mut oc);
                scatter_add(&oc, geom.c_out, geom.out_pixels(), px, ob);
            }
        }
        if let Some(b) = bias {
            add_bias(&mut out, self.value(b).data(), geom.batch, geom.out_pixels());
        }
        let t = Tensor::new(vec![geom.batch, geom.c_out, geom.h_out, geom.w_out], out)
            .expect("conv output shape");
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(t, Op::Conv { x, w: kernel, b: bias, geom }, &inputs)
    }
}

pub(crate) fn conv_backward(x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, g: &[f64], sink: &mut GradSink<'_>) {
    let need_x = sink.wants(x);
    let need_w = sink.wants(w);
    let mut dw = if need_w { vec![0.0; geom.c_out * geom.patch()] } else { Vec::new() };
    let mut dx = if need_x { vec![0.0; geom.batch * geom.in_plane()] } else { Vec::new() };
    if need_x || need_w {
        let xv = sink.value(x).data();
        let wv = sink.value(w).data();
        let mut cols = Vec::new();
        let mut gc = Vec::new();
        for n in 0..geom.batch {
            let xb = &xv[n * geom.in_plane()..(n + 1) * geom.in_plane()];
            let gb = &g[n * geom.out_plane()..(n + 1) * geom.out_plane()];
            for rows in row_chunks(geom) {
                let px = rows.start * geom.w_out..rows.end * geom.w_out;
                gc.resize(geom.c_out * px.len(), 0.0);
                gather(gb, geom.c_out, geom.out_pixels(), px.clone(), &mut gc);
                cols.resize(geom.patch() * px.len(), 0.0);
                if need_w {
                    im2col(geom, xb, rows.clone(), &mut cols);
                    gemm_nt(geom.c_out, px.len(), geom.patch(), &gc, &cols, &mut dw);
                }
                if need_x {
                    cols.fill(0.0);
                    gemm_tn(geom.patch(), geom.c_out, px.len(), wv, &gc, &mut cols);
                    col2im(geom, &cols, rows, &mut dx[n * geom.in_plane()..(n + 1) * geom.in_plane()]);
                }
            }
        }
    }
    if need_w {
        sink.add(w, dw);
    }
    if need_x {
        sink.add(x, dx);
    }
    if let Some(b) = b {
        if sink.wants(b) {
            bias_grad(g, geom.batch, geom.c_out, geom.out_pixels(), sink.buf(b));
        }
    }
}

pub(crate) fn conv_transpose_backward(
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    // forward was out = col2im(Wᵀ x); the upstream gradient lives on the large side
    let need_x = sink.wants(x);
    let need_w = sink.wants(w);
    let mut dx = if need_x { vec![0.0; geom.batch * geom.out_plane()] } else { Vec::new() };
    let mut dw = if need_w { vec![0.0; geom.c_out * geom.patch()] } else { Vec::new() };
    if need_x || need_w {
        let xv = sink.value(x).data();
        let wv = sink.value(w).data();
        let mut cols = Vec::new();
        let mut tmp = Vec::new();
        for n in 0..geom.batch {
            let gb = &g[n * geom.in_plane()..(n + 1) * geom.in_plane()];
            let xb = &xv[n * geom.out_plane()..(n + 1) * geom.out_plane()];
            for rows in row_chunks(geom) {
                let px = rows.start * geom.w_out..rows.end * geom.w_out;
                cols.resize(geom.patch() * px.len(), 0.0);
                im2col(geom, gb, rows, &mut cols);
                tmp.resize(geom.c_out * px.len(), 0.0);
                if need_x {
                    tmp.fill(0.0);
                    gemm_nn(geom.c_out, geom.patch(), px.len(), wv, &cols, &mut tmp);
                    scatter_add(&tmp, geom.c_out, geom.out_pixels(), px.clone(), &mut dx[n * geom.out_plane()..(n + 1) * geom.out_plane()]);
                }
                if need_w {
                    gather(xb, geom.c_out, geom.out_pixels(), px.clone(), &mut tmp);
                    gemm_nt(geom.c_out, px.len(), geom.patch(), &tmp, &cols, &mut dw);
                }
            }
        }
    }
    if need_x {
        sink.add(x, dx);
    }
    if need_w {
        sink.add(w, dw);
    }
    if let Some(b) = b {
        if sink.wants(b) {
            bias_grad(g, geom.batch, geom.c_in, geom.h_in * geom.w_in, sink.buf(b));
        }
    }
}
