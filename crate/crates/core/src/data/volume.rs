use twinseg_tensor::Tensor;

use crate::error::{Error, Result};

pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];
pub const NUM_CLASSES: usize = 4;

/// One subject: a four-modality image and its voxel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    /// `[modalities, S, S, S]`.
    pub image: Tensor,
    /// `S³` labels in `0..NUM_CLASSES`, same voxel order as each image channel.
    pub labels: Vec<u8>,
    pub preprocessed: bool,
}

impl Volume {
    pub fn new(subject_id: String, image: Tensor, labels: Vec<u8>) -> Result<Self> {
        let v = Volume {
            subject_id,
            image,
            labels,
            preprocessed: false,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn extent(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        let v = self.voxels();
        &self.image.data()[m * v..(m + 1) * v]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 4 || s[0] != MODALITIES.len() || s[1] != s[2] || s[2] != s[3] {
            return Err(Error::Data(format!(
                "{}: image shape {s:?} is not [4, S, S, S]",
                self.subject_id
            )));
        }
        if self.labels.len() != s[1] * s[2] * s[3] {
            return Err(Error::Data(format!(
                "{}: {} labels for extent {}",
                self.subject_id,
                self.labels.len(),
                s[1]
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("{}: label {bad} out of range", self.subject_id)));
        }
        if !self.image.is_finite() {
            return Err(Error::Data(format!("{}: non-finite intensity", self.subject_id)));
        }
        Ok(())
    }
}
