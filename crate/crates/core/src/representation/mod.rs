//! Network inputs derived from raw modalities: SBT event voxels, the
//! channel-max illumination prior and Retinex helpers, plus the image and
//! tensor file formats.

mod image;
mod retinex;
pub mod tns;
mod voxel;

pub use self::image::Image;
pub use retinex::{
    apply_litup, illumination_prior, synthesize_lowlight, IlluminationPrior, LowLightParams, RetinexPair,
};
pub use voxel::{voxelize_sbt, EventVoxel};
