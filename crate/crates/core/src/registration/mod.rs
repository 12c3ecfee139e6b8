//! Affine and diffeomorphic registration, transforms and resampling.

mod affine;
mod demons;
mod metric;
mod params;
mod transform;

pub use affine::{register_affine, AffineRegistration};
pub use demons::{exponentiate, register_diffeomorphic, DiffeomorphicRegistration};
pub use metric::{local_ncc, local_ncc_raw};
pub use params::{DemonsNormalizer, RegistrationParams, SQUARINGS};
pub use transform::{
    compose, warp_image, warp_labels, warp_pair, AffineTransform, DisplacementField, Transform, TransformChain,
};

use crate::error::Result;
use crate::image::Volume3D;

/// Affine alignment followed by diffeomorphic refinement of `moving` onto
/// `fixed`. The returned field lives on the fixed grid and includes the
/// affine part.
pub fn register(fixed: &Volume3D, moving: &Volume3D, params: &RegistrationParams) -> Result<DiffeomorphicRegistration> {
    let affine = register_affine(fixed, moving, params)?;
    register_diffeomorphic(fixed, moving, &affine.transform, params)
}
