//! Diabetic-retinopathy grading over precomputed encoder embeddings.
//!
//! The crate provides three grading heads that sit on top of a frozen
//! vision-language encoder:
//!
//! - a zero-shot classifier that picks the grade whose prompt embedding has the
//!   highest cosine similarity with the image embedding,
//! - a supervised FCN decoder with CBAM attention over encoder feature maps,
//! - a ranking-aware prompt head whose learnable per-grade prompts are trained
//!   with a combined cross-entropy and ordinal ranking loss.
//!
//! Around the heads sit the data pipeline (manifest ingestion, patient-grouped
//! stratified splitting, target-count resampling, augmentation), per-class
//! threshold calibration, the evaluation suite and the embedding interchange
//! container.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default). Every parallel path has a sequential twin selected through
//! [`Backend`], and both produce bitwise-identical results.

pub mod calibration;
pub mod data;
pub mod error;
pub mod grade;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use grade::{Grade, NUM_GRADES};
pub use parallel::Backend;
pub use tensor::Tensor;
