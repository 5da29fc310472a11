//! Synthetic multi-modal phantoms, preprocessing, augmentation and client partitioning.

mod augment;
mod cohort;
mod phantom;
mod preprocess;
mod volume;

pub use augment::{affine, augment, bias_field, elastic, flip, AugmentConfig};
pub use cohort::{
    partition_noniid, scaled_counts, split_sizes, Clamp, ClientDataset, ClientManifest, Cohort,
    CohortManifest, CohortSpec, MIN_CLIENT_SAMPLES, REFERENCE_SITES,
};
pub use phantom::{
    client_signatures, generate_phantom, generate_phantom_with_geometry, signature_perturbation,
    ClientSpec, TumorGeometry, SIGNATURES,
};
pub use preprocess::{preprocess, resize, resize_image, resize_labels, rescale_intensity, z_normalize};
pub use volume::{Volume, MODALITIES, NUM_CLASSES};
