//! Geometry-aware volumes, sampling, cropping and intensity normalisation.

pub mod filter;
mod grid;
pub mod stats;
mod volume;

pub use grid::{BoundingBox, Grid};
pub(crate) use grid::apply_affine;
pub(crate) use volume::trilinear;
pub use volume::{propagate_crop_box, robust_normalize, Interpolation, LabelVolume, Volume3D};

/// Default crop margin around the propagated template box.
pub const DEFAULT_CROP_MARGIN_MM: f64 = 8.0;
/// Default robust-normalisation percentiles.
pub const DEFAULT_PERCENTILES: (f64, f64) = (1.0, 99.0);
