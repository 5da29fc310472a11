use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

struct MaxPoolOp {
    a: Option<usize>,
    argmax: Rc<Vec<usize>>,
    input_len: usize,
}

impl Backward for MaxPoolOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let mut g = vec![0.0; self.input_len];
        for (&src, gv) in self.argmax.iter().zip(grad) {
            g[src] += gv;
        }
        sink.accumulate(self.a, g);
    }
}

impl Tape {
    /// 2x2x2 max pooling with stride 2 over `[N, C, D, H, W]`.
    ///
    /// Returns the pooled tensor and, per output voxel, the flat input index
    /// of its maximum. Ties go to the lowest flat index.
    pub fn maxpool3d(&mut self, x: &Var) -> Result<(Var, Vec<usize>)> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(TensorError::invalid(
                "maxpool3d",
                format!("expected 5-D input, got {s:?}"),
            ));
        }
        if s[2..].iter().any(|e| e % 2 != 0) {
            return Err(TensorError::invalid(
                "maxpool3d",
                format!("spatial extents must be even, got {:?}", &s[2..]),
            ));
        }
        let (d, h, w) = (s[2], s[3], s[4]);
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let planes = s[0] * s[1];
        let data = x.data();
        let mut out = Vec::with_capacity(planes * od * oh * ow);
        let mut argmax = Vec::with_capacity(planes * od * oh * ow);
        for plane in 0..planes {
            let base = plane * d * h * w;
            for i in 0..od {
                for j in 0..oh {
                    for l in 0..ow {
                        let mut best = base + ((2 * i) * h + 2 * j) * w + 2 * l;
                        // window offsets visited in increasing flat-index order
                        for (a, b, c) in WINDOW {
                            let idx = base + ((2 * i + a) * h + 2 * j + b) * w + 2 * l + c;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                        out.push(data[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let shape = vec![s[0], s[1], od, oh, ow];
        let pa = self.parent(x)?;
        let argmax = Rc::new(argmax);
        let indices = argmax.as_ref().clone();
        let input_len = data.len();
        let var = self.push(Tensor::from_parts(shape, out), pa.is_some(), || {
            MaxPoolOp {
                a: pa,
                argmax,
                input_len,
            }
        });
        Ok((var, indices))
    }
}

const WINDOW: [(usize, usize, usize); 7] = [
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];
