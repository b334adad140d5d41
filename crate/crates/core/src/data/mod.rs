//! Dataset handling: manifests, patient-grouped stratified splitting,
//! target-count resampling and class-conditional augmentation.

mod augment;
mod manifest;
mod resample;
mod split;

pub use augment::{augment, augment_batch, AugmentParams, AugmentationConfig, RgbImage};
pub use manifest::{load_manifest, load_resampled_manifest, manifest_to_csv, parse_manifest, write_manifest, ImageRecord, Manifest, MANIFEST_HEADER};
pub use resample::{resample, ResampleSpec, ResampleSummary};
pub use split::{stratified_split, SplitOutput, SplitSpec, SplitSummary};
