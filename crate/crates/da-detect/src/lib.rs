//! Domain-adaptive two-stage object detection at desk scale.
//!
//! A compact Faster-RCNN-style detector augmented with unsupervised domain
//! adaptation machinery: adversarial image-level and instance-level domain
//! classifiers behind gradient reversal, a consistency regularizer between
//! them, squeeze-excitation adaptor banks with domain attention in the
//! backbone, and source/target center losses trained by a second, masked
//! optimizer.
//!
//! Everything runs on a small f64 reverse-mode tape ([`tape`]) so analytic
//! gradients can be checked against finite differences and the exactness
//! contracts (gradient reversal, center-loss masking) hold to the last bit.

pub mod error;
pub mod gradcheck;
pub mod grl;
pub mod losses;
pub mod ops;
pub mod tape;

pub use error::{Error, Result};
