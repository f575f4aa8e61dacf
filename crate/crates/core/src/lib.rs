//! Numerical core of a cross-domain ship-wake detection pipeline.
//!
//! The crate covers the closed-form parts of an optical-to-SAR adaptation
//! loop: spectral style-transfer losses ([`spectral`]), target-similar source
//! filtering ([`simfilter`]), memory-guided pseudo-label calibration
//! ([`membank`]), confidence-driven region mixing ([`mixer`]) and detection
//! evaluation plus CLI plumbing ([`harness`]). Shared primitives live in
//! [`tensor`], [`geom`] and [`ops`].

pub mod error;
pub mod formats;
pub mod geom;
pub mod harness;
pub mod membank;
pub mod mixer;
pub mod ops;
pub mod simfilter;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use geom::{iou, BBox, Detection};
pub use tensor::Tensor;
