//! Marker-driven selective segmentation.
//!
//! The crate bundles the per-image data terms (`fidelity`, `geodesic`), the
//! explicitly regularised variational solvers (`varsolver`), a small reverse
//! mode autodiff engine (`autodiff`), the two-network training scheme built on
//! it (`nets`), and overlap metrics (`metrics`).

pub mod autodiff;
pub mod error;
pub mod fidelity;
pub mod geodesic;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod synth;
pub mod varsolver;

pub use error::{Error, Result};
pub use image::{FieldKind, Image, MarkerSet, ScalarField};
