//! Desk-scale toolkit for studying backdoor data poisoning of small image
//! classifiers and the patch-processing defense that detects and removes
//! poisoned samples.
//!
//! The crate is organized around the pipeline:
//! ingest ([`data`]) → poison ([`poison`]) → train ([`models`]) →
//! calibrate/detect ([`defense`]) → evaluate ([`eval`]), with the patch
//! transforms in [`patchproc`] and the numeric core in [`tensor`].

pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod models;
pub mod patchproc;
pub mod poison;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use data::{DatasetManifest, LabeledDataset, SplitTag};
pub use defense::{Decision, DetectionProfile, FlipCounts, Thresholds, Verdict};
pub use error::{Error, Result};
pub use eval::MetricsRecord;
pub use models::{Classifier, ClassifierModel, ModelConfig, TinyCnnConfig, TinyViTConfig};
pub use patchproc::{PatchGrid, PatchTransformOutcome};
pub use poison::{PoisonRecord, PoisonedDataset, TriggerConfig, TriggerFamily, TriggerSpec};
pub use tensor::{ImageTensor, Parameter, Tensor};
