//! Phrase-level point cloud segmentation toolkit.
//!
//! Everything needed to go from annotated descriptions and point cloud
//! scenes to per-phrase segmentation masks on one desk: the tagged
//! annotation format, superpoint pooling, a query-based mask decoder with
//! its loss suite and trainer, the evaluation metrics, and a synthetic
//! benchmark generator that stands in for external datasets and pretrained
//! backbones.

pub mod annotation;
mod autodiff;
pub mod model;
pub mod pipeline;
mod losses;
pub mod mask;
pub mod metrics;
pub mod superpoint;
pub mod synth;
pub mod training;
mod util;

pub use annotation::{AnnotatedDescription, DatasetSummary, PhraseTarget};
pub use mask::{PhraseMaskSet, PointMask, Scene, ScenePoint};
pub use superpoint::{SuperpointConfig, SuperpointPartition};
