//! Network definition, initialisation and training losses.

mod config;
mod loss;
mod net;

pub use config::{ModelConfig, VitConfig};
pub use loss::{composite_loss, cross_entropy, dice_loss, one_hot, LossMode, DICE_EPS};
pub use net::{EntryKind, ForwardPass, LayerEntry, TwinSegNet};

/// Class indices of the label volumes.
pub const CLASS_NAMES: [&str; 4] = ["background", "edema", "tumor_core", "enhancing_tumor"];
