use std::rc::Rc;

use super::gemm::{gemm, MatMut, MatRef};
use crate::error::{Result, TensorError};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

struct LinearOp {
    x: Option<usize>,
    w: Option<usize>,
    b: Option<usize>,
    xv: Rc<Tensor>,
    wv: Rc<Tensor>,
    rows: usize,
}

impl Backward for LinearOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let (f_out, f_in) = (self.wv.shape()[0], self.wv.shape()[1]);
        let g = MatRef::row_major(grad, self.rows, f_out);
        if self.x.is_some() {
            let mut gx = vec![0.0; self.rows * f_in];
            gemm(
                g,
                MatRef::row_major(self.wv.data(), f_out, f_in),
                0.0,
                MatMut::row_major(&mut gx, self.rows, f_in),
            );
            sink.accumulate(self.x, gx);
        }
        if self.w.is_some() {
            let mut gw = vec![0.0; f_out * f_in];
            gemm(
                g.t(),
                MatRef::row_major(self.xv.data(), self.rows, f_in),
                0.0,
                MatMut::row_major(&mut gw, f_out, f_in),
            );
            sink.accumulate(self.w, gw);
        }
        if self.b.is_some() {
            let mut gb = vec![0.0; f_out];
            for row in grad.chunks(f_out) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            sink.accumulate(self.b, gb);
        }
    }
}

struct BmmOp {
    a: Option<usize>,
    b: Option<usize>,
    av: Rc<Tensor>,
    bv: Rc<Tensor>,
}

impl Backward for BmmOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let (batch, m, k) = (self.av.shape()[0], self.av.shape()[1], self.av.shape()[2]);
        let n = self.bv.shape()[2];
        if self.a.is_some() {
            let mut ga = vec![0.0; batch * m * k];
            for i in 0..batch {
                gemm(
                    MatRef::row_major(&grad[i * m * n..(i + 1) * m * n], m, n),
                    MatRef::row_major(&self.bv.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                    0.0,
                    MatMut::row_major(&mut ga[i * m * k..(i + 1) * m * k], m, k),
                );
            }
            sink.accumulate(self.a, ga);
        }
        if self.b.is_some() {
            let mut gb = vec![0.0; batch * k * n];
            for i in 0..batch {
                gemm(
                    MatRef::row_major(&self.av.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                    MatRef::row_major(&grad[i * m * n..(i + 1) * m * n], m, n),
                    0.0,
                    MatMut::row_major(&mut gb[i * k * n..(i + 1) * k * n], k, n),
                );
            }
            sink.accumulate(self.b, gb);
        }
    }
}

impl Tape {
    /// Affine map over the last axis: `x[.., F_in] · wᵀ + b` with `w: [F_out, F_in]`.
    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let xs = x.shape();
        let ws = w.shape();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(TensorError::mismatch("linear", xs, ws));
        }
        let (f_out, f_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            if b.shape() != [f_out] {
                return Err(TensorError::mismatch("linear bias", b.shape(), &[f_out]));
            }
        }
        let rows = x.value().numel() / f_in;
        let mut out = vec![0.0; rows * f_out];
        gemm(
            MatRef::row_major(x.data(), rows, f_in),
            MatRef::row_major(w.data(), f_out, f_in).t(),
            0.0,
            MatMut::row_major(&mut out, rows, f_out),
        );
        if let Some(b) = b {
            for row in out.chunks_mut(f_out) {
                for (o, bias) in row.iter_mut().zip(b.data()) {
                    *o += bias;
                }
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = f_out;
        let [px, pw] = self.parents([x, w])?;
        let pb = b.map(|b| self.parent(b)).transpose()?.flatten();
        let any = px.is_some() || pw.is_some() || pb.is_some();
        Ok(self.push(Tensor::from_parts(shape, out), any, || LinearOp {
            x: px,
            w: pw,
            b: pb,
            xv: x.value_rc(),
            wv: w.value_rc(),
            rows,
        }))
    }

    /// Batched matrix product `[B, M, K] · [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::mismatch("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                MatRef::row_major(&a.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::row_major(&b.data()[i * k * n..(i + 1) * k * n], k, n),
                0.0,
                MatMut::row_major(&mut out[i * m * n..(i + 1) * m * n], m, n),
            );
        }
        let [pa, pb] = self.parents([a, b])?;
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            pa.is_some() || pb.is_some(),
            || BmmOp {
                a: pa,
                b: pb,
                av: a.value_rc(),
                bv: b.value_rc(),
            },
        ))
    }
}
