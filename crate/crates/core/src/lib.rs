//! Early-smoke segmentation at desk scale: a focus-and-separation network,
//! a synthetic smoke compositor that provides ground-truth backgrounds and
//! alpha maps, and the training/evaluation machinery around them.
//!
//! The crate is organized around the pipeline stages:
//!
//! * [`backbone`] — four-stage hierarchical feature extractor.
//! * [`focus`] — bidirectional cascade generator producing the focus map.
//! * [`separation`] — weight-shared inpainting branches whose scaled
//!   absolute difference isolates smoke-foreground features.
//! * [`fusion`] — per-stage MLP merge of origin/foreground domains and the
//!   decode head.
//! * [`loss`] — focus loss and total training objective.
//! * [`compositor`] — alpha-compositing synthetic data generator.
//! * [`metrics`] — F_beta / mIoU / M evaluation with the delta-based
//!   small/medium/large split.
//! * [`data`] — dataset indexing, augmentation and batching.
//! * [`trainer`] — optimization loop, checkpointing and the ablation runner.
//!
//! The numeric substrate lives in [`autodiff`] and [`nn`]: a small
//! reverse-mode tape over `ndarray` that is generic over `f32`/`f64` so the
//! same code path can be trained fast and gradient-checked in double
//! precision.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod compositor;
pub mod config;
pub mod data;
pub mod error;
pub mod focus;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod separation;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{FeaturePyramid, FocusMap, ImageTensor, MaskTensor, Real};
