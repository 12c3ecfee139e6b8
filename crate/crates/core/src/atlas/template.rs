//! Groupwise template construction and prior→template warp precomputation.

use rayon::prelude::*;

use super::{AtlasBundle, AtlasPrior};
use crate::error::{Error, Result};
use crate::hips::{background_cutoff, estimate_target_landmarks_with_cutoff};
use crate::image::{
    robust_normalize, BoundingBox, Grid, Interpolation, Volume3D, DEFAULT_CROP_MARGIN_MM, DEFAULT_PERCENTILES,
};
use crate::labels::LabelDictionary;
use crate::registration::{
    register, register_affine, warp_image, warp_labels, DisplacementField, RegistrationParams, TransformChain,
};

/// Fixed-point iterations used to invert the mean displacement.
const RECENTER_ITERATIONS: usize = 20;

fn mean_volume(grid: &Grid, volumes: &[Volume3D]) -> Volume3D {
    let n = volumes.len() as f64;
    Volume3D::from_fn(grid.clone(), |i, j, k| {
        let idx = grid.index(i, j, k);
        volumes.iter().map(|v| v.data()[idx]).sum::<f64>() / n
    })
}

fn mean_field(grid: &Grid, fields: &[DisplacementField]) -> DisplacementField {
    let n = fields.len() as f64;
    DisplacementField::from_fn(grid.clone(), |c| {
        let idx = grid.index(c[0], c[1], c[2]);
        let mut m = [0.0; 3];
        for f in fields {
            let d = f.at(idx);
            for a in 0..3 {
                m[a] += d[a];
            }
        }
        m.map(|v| v / n)
    })
}

/// Iterative groupwise template on the grid of `priors[0]`.
///
/// Iteration 0 averages the priors after affine alignment to the first one
/// (the only order-dependent step). Each further iteration registers every
/// prior to the current template, averages the warped priors and shifts the
/// average by the inverse of the mean displacement so the template sits at
/// the group's mean shape.
pub fn build_template(priors: &[Volume3D], iterations: usize, params: &RegistrationParams) -> Result<Volume3D> {
    let reference = priors.first().ok_or(Error::EmptyPriorSet)?;
    if iterations == 0 {
        return Err(Error::InvalidParameter("template iterations must be >= 1".into()));
    }
    params.validate()?;
    let grid = reference.grid().clone();
    let aligned = priors
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if i == 0 {
                return Ok(p.clone());
            }
            let a = register_affine(reference, p, params)?;
            Ok(warp_image(p, &TransformChain::from_affine(a.transform), &grid, Interpolation::Trilinear))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut template = mean_volume(&grid, &aligned);

    for _ in 0..iterations {
        let fields = priors
            .par_iter()
            .map(|p| register(&template, p, params).map(|r| r.field))
            .collect::<Result<Vec<_>>>()?;
        let warped: Vec<Volume3D> = fields
            .iter()
            .zip(priors)
            .map(|(f, p)| warp_image(p, &TransformChain::from_field(f.clone()), &grid, Interpolation::Trilinear))
            .collect();
        let average = mean_volume(&grid, &warped);
        let shift = mean_field(&grid, &fields).inverse(RECENTER_ITERATIONS);
        template = warp_image(&average, &TransformChain::from_field(shift), &grid, Interpolation::Trilinear);
    }
    Ok(template)
}

/// Register every prior to the template and store the resulting W_pIT.
/// Existing warps are recomputed, so repeated runs give identical bundles.
pub fn precompute_prior_warps(bundle: &AtlasBundle, params: &RegistrationParams) -> Result<AtlasBundle> {
    params.validate()?;
    let fields = bundle
        .priors
        .par_iter()
        .map(|p| register(&bundle.template, &p.image, params).map(|r| r.field))
        .collect::<Result<Vec<_>>>()?;
    let mut out = bundle.clone();
    for (p, f) in out.priors.iter_mut().zip(fields) {
        p.warp_to_template = Some(f);
    }
    Ok(out)
}

/// Template-space box around all prior labels (both hemispheres), pulled
/// into the template through the stored warps, dilated by `margin` voxels.
pub fn crop_box_from_priors(bundle: &AtlasBundle, margin: usize) -> Result<BoundingBox> {
    bundle.require_precomputed()?;
    let tg = bundle.template.grid();
    let mut hull: Option<BoundingBox> = None;
    for p in &bundle.priors {
        let chain = TransformChain::from_field(p.warp_to_template.clone().expect("checked above"));
        for lv in [&p.labels_left, &p.labels_right] {
            if let Some(b) = warp_labels(lv, &chain, tg).foreground_box() {
                hull = Some(match hull {
                    None => b,
                    Some(h) => BoundingBox::new(
                        [0, 1, 2].map(|a| h.min[a].min(b.min[a])),
                        [0, 1, 2].map(|a| h.max[a].max(b.max[a])),
                    ),
                });
            }
        }
    }
    let hull = hull.ok_or(Error::EmptyBox)?;
    hull.dilated([margin as i64; 3]).clamped(tg)
}

/// HIPS target landmarks from the template region an input crop would
/// cover: the crop box plus the default crop margin.
pub fn target_landmarks_for(template: &Volume3D, crop_box: &BoundingBox) -> Result<Vec<f64>> {
    let sp = template.grid().spacing();
    let margin = [0, 1, 2].map(|a| (DEFAULT_CROP_MARGIN_MM / sp[a]).ceil() as i64);
    let region = crop_box.dilated(margin).clamped(template.grid())?;
    estimate_target_landmarks_with_cutoff(&template.crop(&region)?, background_cutoff(template)?)
}

/// Crop box margin (voxels) around the warped prior labels used by
/// [`build_atlas`].
pub const ATLAS_CROP_MARGIN: usize = 2;

/// Full bundle from labelled priors: normalise the images, build the
/// template, precompute the warps, then derive the crop box and the HIPS
/// target landmarks from them.
pub fn build_atlas(
    priors: Vec<AtlasPrior>,
    dictionary: LabelDictionary,
    iterations: usize,
    params: &RegistrationParams,
) -> Result<AtlasBundle> {
    let (plo, phi) = DEFAULT_PERCENTILES;
    let priors = priors
        .into_iter()
        .map(|mut p| {
            p.image = robust_normalize(&p.image, plo, phi)?;
            p.warp_to_template = None;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Volume3D> = priors.iter().map(|p| p.image.clone()).collect();
    let template = robust_normalize(&build_template(&images, iterations, params)?, plo, phi)?;
    let full = BoundingBox::full(template.grid());
    let draft = AtlasBundle::new(template, full, priors, dictionary, Vec::new())?;
    let mut bundle = precompute_prior_warps(&draft, params)?;
    bundle.crop_box = crop_box_from_priors(&bundle, ATLAS_CROP_MARGIN)?;
    bundle.target_landmarks = target_landmarks_for(&bundle.template, &bundle.crop_box)?;
    bundle.validate()?;
    Ok(bundle)
}
