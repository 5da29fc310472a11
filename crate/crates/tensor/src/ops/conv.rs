//! 3-D convolution and stride-2 transposed convolution.
//!
//! Both lower to matrix products. `conv3d` unfolds the receptive fields of a
//! slab of output depth planes into a column buffer (im2col) so the buffer
//! stays bounded for large volumes; the transposed convolution with kernel 2
//! and stride 2 has non-overlapping outputs and needs no unfolding.

use std::cell::RefCell;
use std::rc::Rc;

use super::gemm::{gemm, MatMut, MatRef};
use crate::error::{Result, TensorError};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Upper bound on column-buffer elements per slab (32 MiB of f64).
const COLUMN_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input_shape.len() != 5 || weight_shape.len() != 5 {
            return Err(TensorError::invalid(
                "conv3d",
                format!("expected 5-D input and weight, got {input_shape:?} and {weight_shape:?}"),
            ));
        }
        let k = weight_shape[2];
        if weight_shape[3] != k || weight_shape[4] != k {
            return Err(TensorError::invalid(
                "conv3d",
                format!("kernel must be cubic, got {:?}", &weight_shape[2..]),
            ));
        }
        if k.is_multiple_of(2) {
            return Err(TensorError::invalid(
                "conv3d",
                format!("kernel extent must be odd, got {k}"),
            ));
        }
        if weight_shape[1] != input_shape[1] {
            return Err(TensorError::mismatch("conv3d", input_shape, weight_shape));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv3d", "stride must be positive"));
        }
        let mut output = [0; 3];
        for (axis, out) in output.iter_mut().enumerate() {
            let ext = input_shape[2 + axis] + 2 * padding;
            if ext < k || !(ext - k).is_multiple_of(stride) {
                return Err(TensorError::invalid(
                    "conv3d",
                    format!(
                        "output extent ({} + 2*{padding} - {k})/{stride} + 1 along axis {axis} is not an integer",
                        input_shape[2 + axis]
                    ),
                ));
            }
            *out = (ext - k) / stride + 1;
        }
        Ok(ConvGeometry {
            batch: input_shape[0],
            c_in: input_shape[1],
            c_out: weight_shape[0],
            input: [input_shape[2], input_shape[3], input_shape[4]],
            output,
            kernel: k,
            stride,
            padding,
        })
    }

    fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel.pow(3)
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output depth planes per im2col slab.
    fn slab_depth(&self) -> usize {
        let per_plane = self.patch_len() * self.plane();
        (COLUMN_BUDGET / per_plane.max(1)).clamp(1, self.output[0])
    }

    /// Offset along one axis from output index + kernel tap to input index.
    fn source(&self, out: usize, tap: usize) -> Option<usize> {
        (out * self.stride + tap).checked_sub(self.padding)
    }
}

/// Unfolds the receptive fields of output depth planes `d0..d1` of one sample.
fn im2col(x: &[f64], g: &ConvGeometry, d0: usize, d1: usize, col: &mut [f64]) {
    let [d, h, w] = g.input;
    let [_, ho, wo] = g.output;
    let k = g.kernel;
    let cols = (d1 - d0) * ho * wo;
    for ci in 0..g.c_in {
        let channel = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for (slab_d, od) in (d0..d1).enumerate() {
                        for oh in 0..ho {
                            let out_row =
                                &mut dst[(slab_d * ho + oh) * wo..(slab_d * ho + oh + 1) * wo];
                            let (Some(id), Some(ih)) = (g.source(od, kd), g.source(oh, kh)) else {
                                out_row.fill(0.0);
                                continue;
                            };
                            if id >= d || ih >= h {
                                out_row.fill(0.0);
                                continue;
                            }
                            let src = &channel[(id * h + ih) * w..(id * h + ih + 1) * w];
                            if g.stride == 1 {
                                // input column = ow + kw - padding, valid for ow in lo..hi
                                let lo = g.padding.saturating_sub(kw).min(wo);
                                let hi = (w + g.padding).saturating_sub(kw).min(wo).max(lo);
                                out_row[..lo].fill(0.0);
                                out_row[hi..].fill(0.0);
                                if hi > lo {
                                    let shift = lo + kw - g.padding;
                                    out_row[lo..hi].copy_from_slice(&src[shift..shift + hi - lo]);
                                }
                            } else {
                                for (ow, slot) in out_row.iter_mut().enumerate() {
                                    *slot = match g.source(ow, kw) {
                                        Some(iw) if iw < w => src[iw],
                                        _ => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
fn col2im(col: &[f64], g: &ConvGeometry, d0: usize, d1: usize, gx: &mut [f64]) {
    let [d, h, w] = g.input;
    let [_, ho, wo] = g.output;
    let k = g.kernel;
    let cols = (d1 - d0) * ho * wo;
    for ci in 0..g.c_in {
        let channel = &mut gx[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &col[row * cols..(row + 1) * cols];
                    for (slab_d, od) in (d0..d1).enumerate() {
                        let Some(id) = g.source(od, kd).filter(|&id| id < d) else {
                            continue;
                        };
                        for oh in 0..ho {
                            let Some(ih) = g.source(oh, kh).filter(|&ih| ih < h) else {
                                continue;
                            };
                            let grad_row = &src[(slab_d * ho + oh) * wo..(slab_d * ho + oh + 1) * wo];
                            let dst = &mut channel[(id * h + ih) * w..(id * h + ih + 1) * w];
                            if g.stride == 1 {
                                let lo = g.padding.saturating_sub(kw).min(wo);
                                let hi = (w + g.padding).saturating_sub(kw).min(wo).max(lo);
                                if hi > lo {
                                    let shift = lo + kw - g.padding;
                                    for (d, gv) in dst[shift..shift + hi - lo].iter_mut().zip(&grad_row[lo..hi]) {
                                        *d += gv;
                                    }
                                }
                            } else {
                                for (ow, gv) in grad_row.iter().enumerate() {
                                    if let Some(iw) = g.source(ow, kw).filter(|&iw| iw < w) {
                                        dst[iw] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable per-thread column buffer of `len` elements with unspecified contents.
fn with_columns<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.take();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        let out = f(&mut buf[..len]);
        cell.replace(buf);
        out
    })
}

fn slabs(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let step = g.slab_depth();
    let depth = g.output[0];
    (0..depth).step_by(step).map(move |d0| (d0, (d0 + step).min(depth)))
}

fn conv3d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (in_vol, out_vol, patch) = (g.input_volume(), g.output_volume(), g.patch_len());
    let mut out = vec![0.0; g.batch * g.c_out * out_vol];
    with_columns(patch * g.slab_depth() * g.plane(), |col| {
        for n in 0..g.batch {
            let x_n = &x[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol];
            let out_n = &mut out[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
            for (d0, d1) in slabs(g) {
                let cols = (d1 - d0) * g.plane();
                let col = &mut col[..patch * cols];
                im2col(x_n, g, d0, d1, col);
                gemm(
                    MatRef::row_major(w, g.c_out, patch),
                    MatRef::row_major(col, patch, cols),
                    0.0,
                    MatMut {
                        data: &mut out_n[d0 * g.plane()..],
                        rows: g.c_out,
                        cols,
                        row_stride: out_vol,
                        col_stride: 1,
                    },
                );
            }
            if let Some(bias) = bias {
                for (channel, b) in out_n.chunks_mut(out_vol).zip(bias) {
                    channel.iter_mut().for_each(|v| *v += b);
                }
            }
        }
    });
    out
}

struct Conv3dOp {
    x: Option<usize>,
    w: Option<usize>,
    b: Option<usize>,
    xv: Rc<Tensor>,
    wv: Rc<Tensor>,
    geom: ConvGeometry,
}

impl Backward for Conv3dOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let g = &self.geom;
        let (in_vol, out_vol, patch) = (g.input_volume(), g.output_volume(), g.patch_len());
        let want_x = self.x.is_some();
        let want_w = self.w.is_some();
        let mut gx = if want_x {
            vec![0.0; g.batch * g.c_in * in_vol]
        } else {
            Vec::new()
        };
        let mut gw = if want_w {
            vec![0.0; g.c_out * patch]
        } else {
            Vec::new()
        };
        if want_x || want_w {
            let x = self.xv.data();
            let w = self.wv.data();
            with_columns(patch * g.slab_depth() * g.plane(), |col| {
                for n in 0..g.batch {
                    let grad_n = &grad[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
                    for (d0, d1) in slabs(g) {
                        let cols = (d1 - d0) * g.plane();
                        let col = &mut col[..patch * cols];
                        let grad_view = MatRef {
                            data: &grad_n[d0 * g.plane()..],
                            rows: g.c_out,
                            cols,
                            row_stride: out_vol,
                            col_stride: 1,
                        };
                        if want_w {
                            im2col(&x[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol], g, d0, d1, col);
                            gemm(
                                grad_view,
                                MatRef::row_major(col, patch, cols).t(),
                                1.0,
                                MatMut::row_major(&mut gw, g.c_out, patch),
                            );
                        }
                        if want_x {
                            gemm(
                                MatRef::row_major(w, g.c_out, patch).t(),
                                grad_view,
                                0.0,
                                MatMut::row_major(col, patch, cols),
                            );
                            col2im(
                                col,
                                g,
                                d0,
                                d1,
                                &mut gx[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol],
                            );
                        }
                    }
                }
            });
        }
        if self.b.is_some() {
            let mut gb = vec![0.0; g.c_out];
            for (i, channel) in grad.chunks(out_vol).enumerate() {
                gb[i % g.c_out] += channel.iter().sum::<f64>();
            }
            sink.accumulate(self.b, gb);
        }
        if want_w {
            sink.accumulate(self.w, gw);
        }
        if want_x {
            sink.accumulate(self.x, gx);
        }
    }
}

/// Geometry of a kernel-2, stride-2 transposed convolution.
#[derive(Clone, Copy, Debug)]
struct UpGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
}

impl UpGeometry {
    fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn output_volume(&self) -> usize {
        self.input_volume() * 8
    }

    /// Flat output offset (within one channel) of input voxel `p` and kernel tap `tap`.
    fn scatter_index(&self, p: usize, tap: usize) -> usize {
        let [_, h, w] = self.input;
        let (i, j, l) = (p / (h * w), (p / w) % h, p % w);
        let (a, b, c) = (tap / 4, (tap / 2) % 2, tap % 2);
        ((2 * i + a) * 2 * h + 2 * j + b) * 2 * w + 2 * l + c
    }
}

struct ConvTranspose3dOp {
    x: Option<usize>,
    w: Option<usize>,
    b: Option<usize>,
    xv: Rc<Tensor>,
    wv: Rc<Tensor>,
    geom: UpGeometry,
}

impl Backward for ConvTranspose3dOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let g = &self.geom;
        let (in_vol, out_vol) = (g.input_volume(), g.output_volume());
        let taps = g.c_out * 8;
        let mut gathered = vec![0.0; taps * in_vol];
        let mut gx = vec![0.0; if self.x.is_some() { g.batch * g.c_in * in_vol } else { 0 }];
        let mut gw = vec![0.0; if self.w.is_some() { g.c_in * taps } else { 0 }];
        for n in 0..g.batch {
            let grad_n = &grad[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
            for co in 0..g.c_out {
                for tap in 0..8 {
                    let row = &mut gathered[(co * 8 + tap) * in_vol..(co * 8 + tap + 1) * in_vol];
                    for (p, slot) in row.iter_mut().enumerate() {
                        *slot = grad_n[co * out_vol + g.scatter_index(p, tap)];
                    }
                }
            }
            let g_mat = MatRef::row_major(&gathered, taps, in_vol);
            if self.x.is_some() {
                gemm(
                    MatRef::row_major(self.wv.data(), g.c_in, taps),
                    g_mat,
                    0.0,
                    MatMut::row_major(
                        &mut gx[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol],
                        g.c_in,
                        in_vol,
                    ),
                );
            }
            if self.w.is_some() {
                gemm(
                    MatRef::row_major(
                        &self.xv.data()[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol],
                        g.c_in,
                        in_vol,
                    ),
                    g_mat.t(),
                    1.0,
                    MatMut::row_major(&mut gw, g.c_in, taps),
                );
            }
        }
        if self.b.is_some() {
            let mut gb = vec![0.0; g.c_out];
            for (i, channel) in grad.chunks(out_vol).enumerate() {
                gb[i % g.c_out] += channel.iter().sum::<f64>();
            }
            sink.accumulate(self.b, gb);
        }
        sink.accumulate(self.w, gw);
        sink.accumulate(self.x, gx);
    }
}

impl Tape {
    /// Direct 3-D cross-correlation.
    ///
    /// `x: [N, C_in, D, H, W]`, `w: [C_out, C_in, k, k, k]` with odd `k`,
    /// `b: [C_out]`.
    pub fn conv3d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
        if let Some(b) = b {
            if b.shape() != [geom.c_out] {
                return Err(TensorError::mismatch("conv3d bias", b.shape(), &[geom.c_out]));
            }
        }
        let out = conv3d_forward(x.data(), w.data(), b.map(|b| b.data()), &geom);
        let shape = vec![
            geom.batch,
            geom.c_out,
            geom.output[0],
            geom.output[1],
            geom.output[2],
        ];
        let [px, pw] = self.parents([x, w])?;
        let pb = b.map(|b| self.parent(b)).transpose()?.flatten();
        let any = px.is_some() || pw.is_some() || pb.is_some();
        Ok(self.push(Tensor::from_parts(shape, out), any, || Conv3dOp {
            x: px,
            w: pw,
            b: pb,
            xv: x.value_rc(),
            wv: w.value_rc(),
            geom,
        }))
    }

    /// Transposed convolution with kernel 2 and stride 2; doubles every spatial extent.
    ///
    /// `x: [N, C_in, D, H, W]` (or unbatched `[C_in, D, H, W]`),
    /// `w: [C_in, C_out, 2, 2, 2]`, `b: [C_out]`.
    pub fn conv_transpose3d(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let unbatched = x.shape().len() == 4;
        if !unbatched && x.shape().len() != 5 {
            return Err(TensorError::invalid(
                "conv_transpose3d",
                format!("expected 4-D or 5-D input, got {:?}", x.shape()),
            ));
        }
        let xs: Vec<usize> = if unbatched {
            std::iter::once(1).chain(x.shape().iter().copied()).collect()
        } else {
            x.shape().to_vec()
        };
        let ws = w.shape();
        if ws.len() != 5 || ws[2..] != [2, 2, 2] || ws[0] != xs[1] {
            return Err(TensorError::mismatch("conv_transpose3d", &xs, ws));
        }
        let geom = UpGeometry {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[1],
            input: [xs[2], xs[3], xs[4]],
        };
        if let Some(b) = b {
            if b.shape() != [geom.c_out] {
                return Err(TensorError::mismatch(
                    "conv_transpose3d bias",
                    b.shape(),
                    &[geom.c_out],
                ));
            }
        }
        let (in_vol, out_vol) = (geom.input_volume(), geom.output_volume());
        let taps = geom.c_out * 8;
        let mut out = vec![0.0; geom.batch * geom.c_out * out_vol];
        let mut spread = vec![0.0; taps * in_vol];
        for n in 0..geom.batch {
            gemm(
                MatRef::row_major(w.data(), geom.c_in, taps).t(),
                MatRef::row_major(
                    &x.data()[n * geom.c_in * in_vol..(n + 1) * geom.c_in * in_vol],
                    geom.c_in,
                    in_vol,
                ),
                0.0,
                MatMut::row_major(&mut spread, taps, in_vol),
            );
            let out_n = &mut out[n * geom.c_out * out_vol..(n + 1) * geom.c_out * out_vol];
            for co in 0..geom.c_out {
                let bias = b.map_or(0.0, |b| b.data()[co]);
                let channel = &mut out_n[co * out_vol..(co + 1) * out_vol];
                for tap in 0..8 {
                    let row = &spread[(co * 8 + tap) * in_vol..(co * 8 + tap + 1) * in_vol];
                    for (p, v) in row.iter().enumerate() {
                        channel[geom.scatter_index(p, tap)] = v + bias;
                    }
                }
            }
        }
        let mut shape = vec![geom.batch, geom.c_out];
        shape.extend(geom.input.iter().map(|e| e * 2));
        if unbatched {
            shape.remove(0);
        }
        let [px, pw] = self.parents([x, w])?;
        let pb = b.map(|b| self.parent(b)).transpose()?.flatten();
        let any = px.is_some() || pw.is_some() || pb.is_some();
        Ok(self.push(Tensor::from_parts(shape, out), any, || {
            ConvTranspose3dOp {
                x: px,
                w: pw,
                b: pb,
                xv: x.value_rc(),
                wv: w.value_rc(),
                geom,
            }
        }))
    }
}
