//! One-vs-rest action recognition for laparoscopic surgery video.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! * [`dataset`] parses video manifests, tiles annotated intervals into
//!   fixed-length clips and splits them into target-vs-rest datasets.
//! * [`augment`] implements the photometric/geometric clip transforms and the
//!   offline plan that brings the target class up to the rest-class count.
//! * [`sampler`] turns a variable-length clip into a fixed-length frame
//!   sequence by drawing one frame per segment.
//! * [`network`] holds the CNN backbone, the static and recurrent heads, and
//!   their hand-written backward passes.
//! * [`trainer`] trains one binary model per action with BCE + Adam and
//!   early stopping.
//! * [`evaluator`] computes clip-level metrics, video timelines and the
//!   comparison tables.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod fixture;
pub mod frames;
pub mod network;
pub mod sampler;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
