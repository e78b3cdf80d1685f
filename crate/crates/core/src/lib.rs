//! Quality-control engine for cervical cytopathology whole-slide images.
//!
//! The crate tiles a pyramidal slide at two magnifications, computes eight
//! slide-quality metrics (grid artifacts, focus, marker and bubble
//! occlusion, staining standardness, cell count, cell-mass count,
//! neutrophil coverage), fuses them with a gradient-boosted tree model
//! into a 0-10 score, and derives an archive / re-prepare / re-scan
//! decision.
//!
//! Numeric code is generic over the scalar type through [`num::Real`];
//! the aliases below pin the `f64` instantiation the pipeline uses.

pub mod artifact;
pub mod content;
pub mod focus;
pub mod gbdt;
pub mod grid;
pub mod metrics;
pub mod num;
pub mod pyramid;
pub mod raster;
pub mod stain;
pub mod stats;

/// Scalar type used by the shipped pipeline.
pub type Scalar = f64;

/// Metric vector over the pipeline scalar.
pub type MetricVector = metrics::MetricVector<Scalar>;
