//! Loss terms: coarse appearance, border, latent regularizer, region
//! preservation, the random-feature perceptual distance and seam energy.

mod features;
mod losses;
mod region;

pub use features::{perceptual_distance, perceptual_distance_var, FeatureExtractor};
pub use losses::{
    border_l1, border_loss, coarse_appearance_loss, downsample_64, l1_loss, latent_regularizer,
    region_preservation_loss, BodyWeights, FaceWeights, LambdaTable, COARSE_SIDE,
};
pub use region::{
    border_indices, border_region, border_region_var, seam_energy, Region, BORDER_WIDTH,
};
