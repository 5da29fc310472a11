use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Iteration geometry for a reduction along one axis.
#[derive(Clone, Copy)]
struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    fn new(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                op,
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        Ok(AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    /// Calls `f` with the flat indices of every lane along the axis.
    fn for_each_lane(&self, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.len * self.inner + i;
                let inner = self.inner;
                let mut lane = (0..self.len).map(move |j| base + j * inner);
                f(&mut lane);
            }
        }
    }
}

fn softmax_forward(x: &[f64], layout: AxisLayout, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut idx = Vec::with_capacity(layout.len);
    layout.for_each_lane(|lane| {
        idx.clear();
        idx.extend(lane);
        let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &i in &idx {
            let e = (x[i] - max).exp();
            out[i] = e;
            total += e;
        }
        if log {
            let log_total = total.ln();
            for &i in &idx {
                out[i] = x[i] - max - log_total;
            }
        } else {
            for &i in &idx {
                out[i] /= total;
            }
        }
    });
    out
}

struct SoftmaxOp {
    a: Option<usize>,
    out: Rc<Tensor>,
    layout: AxisLayout,
    log: bool,
}

impl Backward for SoftmaxOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let y = self.out.data();
        let mut g = vec![0.0; grad.len()];
        let mut idx = Vec::with_capacity(self.layout.len);
        self.layout.for_each_lane(|lane| {
            idx.clear();
            idx.extend(lane);
            if self.log {
                // d/dx of log_softmax: g - softmax * sum(g)
                let total: f64 = idx.iter().map(|&i| grad[i]).sum();
                for &i in &idx {
                    g[i] = grad[i] - y[i].exp() * total;
                }
            } else {
                let dot: f64 = idx.iter().map(|&i| grad[i] * y[i]).sum();
                for &i in &idx {
                    g[i] = y[i] * (grad[i] - dot);
                }
            }
        });
        sink.accumulate(self.a, g);
    }
}

impl Tape {
    fn softmax_impl(&mut self, a: &Var, axis: usize, log: bool) -> Result<Var> {
        let op = if log { "log_softmax" } else { "softmax" };
        if !a.value().is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let layout = AxisLayout::new(op, a.shape(), axis)?;
        let pa = self.parent(a)?;
        let value = Tensor::from_parts(a.shape().to_vec(), softmax_forward(a.data(), layout, log));
        let out = Rc::new(value.clone());
        Ok(self.push(value, pa.is_some(), || SoftmaxOp {
            a: pa,
            out,
            layout,
            log,
        }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }
}

/// Softmax along `axis` without recording; for inference-time decoding.
pub fn softmax_values(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let layout = AxisLayout::new("softmax", x.shape(), axis)?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        softmax_forward(x.data(), layout, false),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4], 0.7));
        let y = tape.softmax(&x, 1).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(&x, 0).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
        let ly = tape.log_softmax(&x, 0).unwrap();
        assert_eq!(ly.data()[0], 0.0);
        assert_eq!(ly.data()[1], -1000.0);
    }

    #[test]
    fn rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            tape.softmax(&x, 0),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn middle_axis_lanes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| (i as f64).sin()));
        let y = tape.softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| y.data()[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
