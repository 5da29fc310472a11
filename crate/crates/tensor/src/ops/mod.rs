pub mod conv;
pub(crate) mod elementwise;
mod gemm;
pub(crate) mod linalg;
pub mod norm;
pub(crate) mod pool;
pub(crate) mod shape;
pub mod softmax;
