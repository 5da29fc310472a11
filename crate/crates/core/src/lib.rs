//! Federated training of a hybrid convolution/transformer segmentation
//! network on synthetic multi-modal volumes, with per-client fine-tuned
//! digital twins and evaluation reports.

pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod seed;

pub use error::{Error, Result};
