use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp {
    kind: Binary,
    a: Option<usize>,
    b: Option<usize>,
    av: Rc<Tensor>,
    bv: Rc<Tensor>,
}

impl Backward for BinaryOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let (a, b) = (self.av.data(), self.bv.data());
        if self.a.is_some() {
            let ga = match self.kind {
                Binary::Add | Binary::Sub => grad.to_vec(),
                Binary::Mul => grad.iter().zip(b).map(|(g, b)| g * b).collect(),
                Binary::Div => grad.iter().zip(b).map(|(g, b)| g / b).collect(),
            };
            sink.accumulate(self.a, ga);
        }
        if self.b.is_some() {
            let gb = match self.kind {
                Binary::Add => grad.to_vec(),
                Binary::Sub => grad.iter().map(|g| -g).collect(),
                Binary::Mul => grad.iter().zip(a).map(|(g, a)| g * a).collect(),
                Binary::Div => grad
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect(),
            };
            sink.accumulate(self.b, gb);
        }
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Scale(f64),
    Shift,
    Relu,
    Gelu,
    Exp,
}

struct UnaryOp {
    kind: Unary,
    a: Option<usize>,
    input: Rc<Tensor>,
    output: Option<Rc<Tensor>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Backward for UnaryOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let x = self.input.data();
        let g: Vec<f64> = match self.kind {
            Unary::Scale(k) => grad.iter().map(|g| g * k).collect(),
            Unary::Shift => grad.to_vec(),
            // subgradient at exactly zero is zero
            Unary::Relu => grad
                .iter()
                .zip(x)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
            Unary::Gelu => grad.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect(),
            Unary::Exp => {
                let y = self.output.as_ref().expect("exp saves its output");
                grad.iter().zip(y.data()).map(|(g, y)| g * y).collect()
            }
        };
        sink.accumulate(self.a, g);
    }
}

struct SumOp {
    a: Option<usize>,
    numel: usize,
    scale: f64,
}

impl Backward for SumOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        sink.accumulate(self.a, vec![grad[0] * self.scale; self.numel]);
    }
}

struct ChannelSumOp {
    a: Option<usize>,
    shape: Vec<usize>,
}

impl Backward for ChannelSumOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let (n, c) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut g = vec![0.0; n * c * inner];
        for (chunk_index, chunk) in g.chunks_mut(inner).enumerate() {
            chunk.fill(grad[chunk_index % c]);
        }
        sink.accumulate(self.a, g);
    }
}

impl Tape {
    fn binary(&mut self, kind: Binary, a: &Var, b: &Var) -> Result<Var> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        if a.shape() != b.shape() {
            return Err(TensorError::mismatch(op, a.shape(), b.shape()));
        }
        let [pa, pb] = self.parents([a, b])?;
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.push(value, pa.is_some() || pb.is_some(), || BinaryOp {
            kind,
            a: pa,
            b: pb,
            av: a.value_rc(),
            bv: b.value_rc(),
        }))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: &Var) -> Result<Var> {
        let pa = self.parent(a)?;
        let value = match kind {
            Unary::Scale(k) => a.value().map(|x| x * k),
            Unary::Shift => unreachable!("shift is built by add_scalar"),
            Unary::Relu => a.value().map(|x| if x > 0.0 { x } else { 0.0 }),
            Unary::Gelu => a.value().map(gelu),
            Unary::Exp => a.value().map(f64::exp),
        };
        let output = matches!(kind, Unary::Exp).then(|| Rc::new(value.clone()));
        Ok(self.push(value, pa.is_some(), || UnaryOp {
            kind,
            a: pa,
            input: a.value_rc(),
            output,
        }))
    }

    pub fn mul_scalar(&mut self, a: &Var, k: f64) -> Result<Var> {
        self.unary(Unary::Scale(k), a)
    }

    pub fn add_scalar(&mut self, a: &Var, k: f64) -> Result<Var> {
        let pa = self.parent(a)?;
        let value = a.value().map(|x| x + k);
        Ok(self.push(value, pa.is_some(), || UnaryOp {
            kind: Unary::Shift,
            a: pa,
            input: a.value_rc(),
            output: None,
        }))
    }

    pub fn relu(&mut self, a: &Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: &Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    pub fn exp(&mut self, a: &Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    /// Sum of all elements, as a scalar. Summation runs in index order.
    pub fn sum(&mut self, a: &Var) -> Result<Var> {
        let pa = self.parent(a)?;
        let value = Tensor::scalar(a.data().iter().sum());
        let numel = a.value().numel();
        Ok(self.push(value, pa.is_some(), || SumOp {
            a: pa,
            numel,
            scale: 1.0,
        }))
    }

    pub fn mean(&mut self, a: &Var) -> Result<Var> {
        let pa = self.parent(a)?;
        let numel = a.value().numel();
        let value = Tensor::scalar(a.data().iter().sum::<f64>() / numel as f64);
        Ok(self.push(value, pa.is_some(), || SumOp {
            a: pa,
            numel,
            scale: 1.0 / numel as f64,
        }))
    }

    /// Reduces `[N, C, ...]` to `[C]` by summing every axis except the channel axis.
    pub fn channel_sum(&mut self, a: &Var) -> Result<Var> {
        let shape = a.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::invalid(
                "channel_sum",
                format!("expected at least 2 axes, got {shape:?}"),
            ));
        }
        let pa = self.parent(a)?;
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut out = vec![0.0; c];
        for (chunk_index, chunk) in a.data().chunks(inner).enumerate() {
            out[chunk_index % c] += chunk.iter().sum::<f64>();
        }
        Ok(self.push(Tensor::from_parts(vec![c], out), pa.is_some(), || {
            ChannelSumOp { a: pa, shape }
        }))
    }
}
