use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

struct ReshapeOp {
    a: Option<usize>,
}

impl Backward for ReshapeOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        sink.accumulate(self.a, grad.to_vec());
    }
}

/// `out[i] = in[index[i]]` for a bijective index map.
struct PermuteOp {
    a: Option<usize>,
    index: Rc<Vec<usize>>,
}

impl Backward for PermuteOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let mut g = vec![0.0; grad.len()];
        for (&src, &gv) in self.index.iter().zip(grad) {
            g[src] = gv;
        }
        sink.accumulate(self.a, g);
    }
}

struct ExpandOp {
    a: Option<usize>,
    copies: usize,
    numel: usize,
}

impl Backward for ExpandOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let mut g = vec![0.0; self.numel];
        for chunk in grad.chunks(self.numel).take(self.copies) {
            for (acc, v) in g.iter_mut().zip(chunk) {
                *acc += v;
            }
        }
        sink.accumulate(self.a, g);
    }
}

struct ConcatOp {
    parts: Vec<(Option<usize>, usize)>,
    outer: usize,
    inner: usize,
    total_axis: usize,
}

impl Backward for ConcatOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let mut offset = 0;
        for &(parent, extent) in &self.parts {
            if parent.is_some() {
                let block = extent * self.inner;
                let mut g = Vec::with_capacity(self.outer * block);
                for o in 0..self.outer {
                    let start = (o * self.total_axis + offset) * self.inner;
                    g.extend_from_slice(&grad[start..start + block]);
                }
                sink.accumulate(parent, g);
            }
            offset += extent;
        }
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tape {
    pub fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != a.value().numel() || shape.contains(&0) {
            return Err(TensorError::mismatch("reshape", a.shape(), shape));
        }
        let pa = self.parent(a)?;
        let value = Tensor::from_parts(shape.to_vec(), a.data().to_vec());
        Ok(self.push(value, pa.is_some(), || ReshapeOp { a: pa }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: &Var, axes: &[usize]) -> Result<Var> {
        let shape = a.shape();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&ax| ax < shape.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(TensorError::invalid(
                "permute",
                format!("{axes:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let pa = self.parent(a)?;
        let in_strides = strides(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let numel = a.value().numel();
        let mut index = Vec::with_capacity(numel);
        let mut counter = vec![0usize; out_shape.len()];
        let mut src = 0usize;
        for _ in 0..numel {
            index.push(src);
            for axis in (0..out_shape.len()).rev() {
                counter[axis] += 1;
                src += src_strides[axis];
                if counter[axis] < out_shape[axis] {
                    break;
                }
                src -= src_strides[axis] * out_shape[axis];
                counter[axis] = 0;
            }
        }
        let input = a.data();
        let data = index.iter().map(|&i| input[i]).collect();
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(value, pa.is_some(), || PermuteOp {
            a: pa,
            index: Rc::new(index),
        }))
    }

    /// Repeats `a` along a new leading axis of extent `copies`.
    pub fn expand(&mut self, a: &Var, copies: usize) -> Result<Var> {
        if copies == 0 {
            return Err(TensorError::invalid("expand", "copies must be positive"));
        }
        let pa = self.parent(a)?;
        let numel = a.value().numel();
        let mut shape = vec![copies];
        shape.extend_from_slice(a.shape());
        let mut data = Vec::with_capacity(copies * numel);
        for _ in 0..copies {
            data.extend_from_slice(a.data());
        }
        Ok(self.push(Tensor::from_parts(shape, data), pa.is_some(), || {
            ExpandOp {
                a: pa,
                copies,
                numel,
            }
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        for p in &parts[1..] {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::mismatch("concat", base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total_axis;
        let mut meta = Vec::with_capacity(parts.len());
        let mut any = false;
        for p in parts {
            let parent = self.parent(p)?;
            any |= parent.is_some();
            meta.push((parent, p.shape()[axis]));
        }
        Ok(self.push(Tensor::from_parts(shape, data), any, || ConcatOp {
            parts: meta,
            outer,
            inner,
            total_axis,
        }))
    }
}
