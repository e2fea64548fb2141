//! Bitemporal SAR change detection with a multi-scale spatial pooling network.
//!
//! The crate is organized around a small set of explicit building blocks:
//!
//! * [`tensor`] — dense rank-1..4 tensors in channels-last layout, the carrier
//!   of all layer math (f32 for training, f64 for oracle paths).
//! * [`layers`] — each layer type as an explicit forward/backward pair; no
//!   computation graph, caches are returned rather than hidden.
//! * [`model`] — the fixed network topology: three 3x3 convolutions, a 2x2
//!   max-pool, four parallel pooled branches (scales 2/4/8/16, each 1x1 conv +
//!   transposed-conv upsampling), channel concatenation, and a two-class head.
//! * [`optim`] — Adam and the training loop.
//! * [`plane`]/[`pgm`]/[`di`]/[`sampling`]/[`synth`]/[`scene`] — the data
//!   pipeline: difference images, boundary-guided patch sampling, synthetic
//!   speckled scenes, PGM image I/O and scene manifests.
//! * [`infer`]/[`eval`]/[`xval`] — stitched whole-scene inference, confusion
//!   metrics (pFA/pMA/kappa) and the leave-one-out cross-scene harness.

pub mod checkpoint;
pub mod di;
pub mod error;
pub mod eval;
pub mod infer;
pub mod layers;
pub mod model;
pub mod optim;
pub mod pgm;
pub mod plane;
pub mod rng;
pub mod sampling;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod xval;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
