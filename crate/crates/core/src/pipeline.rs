//! End-to-end segmentation: crop, optional HIPS, template registration,
//! prior warp composition, per-hemisphere fusion, volumes and QC.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::atlas::AtlasBundle;
use crate::error::{Error, Result};
use crate::fusion::{fuse, AtlasVote, FusionParams};
use crate::hips::{background_cutoff, fit_hips_with_cutoff, synthesize_wmn, PolynomialTransform};
use crate::image::{
    propagate_crop_box, robust_normalize, BoundingBox, Interpolation, LabelVolume, Volume3D, DEFAULT_CROP_MARGIN_MM,
    DEFAULT_PERCENTILES,
};
use crate::labels::{structure_members, LabelDictionary, GLOBUS_PALLIDUS, THALAMUS};
use crate::nifti::{self, Datatype};
use crate::qc::render_qc;
use crate::registration::{
    compose, register_affine, register_diffeomorphic, warp_image, warp_labels, DisplacementField, RegistrationParams,
    TransformChain,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputContrast {
    T1,
    Wmn,
}

impl std::str::FromStr for InputContrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t1" => Ok(InputContrast::T1),
            "wmn" => Ok(InputContrast::Wmn),
            other => Err(Error::InvalidParameter(format!("contrast must be t1 or wmn, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for InputContrast {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputContrast::T1 => "t1",
            InputContrast::Wmn => "wmn",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationRequest<'a> {
    pub input: &'a Volume3D,
    pub contrast: InputContrast,
    pub atlas: &'a AtlasBundle,
    pub fusion: FusionParams,
    pub registration: RegistrationParams,
    /// Keep intermediate volumes for a `debug/` dump.
    pub debug: bool,
}

impl<'a> SegmentationRequest<'a> {
    pub fn new(input: &'a Volume3D, contrast: InputContrast, atlas: &'a AtlasBundle) -> Self {
        SegmentationRequest {
            input,
            contrast,
            atlas,
            fusion: FusionParams::default(),
            registration: RegistrationParams::default(),
            debug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeEntry {
    pub index: u16,
    pub name: String,
    pub volume_mm3: f64,
}

impl VolumeEntry {
    /// `<index>-<NAME> <volume with six decimals>`.
    pub fn line(&self) -> String {
        format!("{}-{} {:.6}", self.index, self.name, self.volume_mm3)
    }
}

/// Text table, one [`VolumeEntry::line`] per structure.
pub fn volume_lines(table: &[VolumeEntry]) -> String {
    table.iter().map(|e| e.line() + "\n").collect()
}

pub fn volume_tsv(table: &[VolumeEntry]) -> String {
    let mut s = String::from("index\tname\tvolume_mm3\n");
    for e in table {
        let _ = writeln!(s, "{}\t{}\t{:.6}", e.index, e.name, e.volume_mm3);
    }
    s
}

/// Per-structure volumes in dictionary order. Whole thalamus and whole GP
/// count the union of their constituents (and any dedicated label); they
/// are appended when the dictionary lacks them.
pub fn compute_volumes(labels: &LabelVolume) -> Vec<VolumeEntry> {
    let mut counts = vec![0usize; u16::MAX as usize + 1];
    for &l in labels.labels() {
        counts[l as usize] += 1;
    }
    let voxel = labels.grid().voxel_volume();
    let entry = |index: u16, name: &str| VolumeEntry {
        index,
        name: name.to_string(),
        volume_mm3: structure_members(index).iter().map(|&m| counts[m as usize]).sum::<usize>() as f64 * voxel,
    };
    let dict = labels.dictionary();
    let mut out: Vec<VolumeEntry> = dict.iter().map(|(i, n)| entry(i, n)).collect();
    let std = LabelDictionary::standard();
    for agg in [THALAMUS, GLOBUS_PALLIDUS] {
        if !dict.contains(agg) {
            out.push(entry(agg, std.name(agg).expect("aggregate in standard dictionary")));
        }
    }
    out
}

/// Intermediate volumes kept when `debug` is requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates {
    pub cropped_input: Volume3D,
    /// HIPS output, or the cropped input for WMn runs.
    pub fusion_target: Volume3D,
    pub warped_template: Volume3D,
    pub cropped_left: LabelVolume,
    pub cropped_right: LabelVolume,
    /// R: resolves cropped-input points to template points.
    pub template_warp: DisplacementField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub atlas_version: String,
    pub priors: Vec<String>,
    pub contrast: InputContrast,
    /// Every fusion and registration parameter as key/value pairs.
    pub parameters: Vec<(String, String)>,
    pub crop_box: BoundingBox,
    pub affine_metric: (f64, f64),
    pub nonlinear_metric: (f64, f64),
    pub min_jacobian: f64,
    pub hips: Option<PolynomialTransform>,
    pub timings: Vec<(String, Duration)>,
}

impl Provenance {
    /// Deterministic body (no timings).
    pub fn body(&self) -> String {
        let b = self.crop_box;
        let mut s = String::new();
        let _ = writeln!(s, "program nucleiseg {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "atlas_version {}", self.atlas_version);
        let _ = writeln!(s, "atlas_priors {}", self.priors.join(","));
        let _ = writeln!(s, "contrast {}", self.contrast);
        for (k, v) in &self.parameters {
            let _ = writeln!(s, "{k} {v}");
        }
        let _ = writeln!(
            s,
            "crop_box {} {} {} {} {} {}",
            b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
        );
        let _ = writeln!(s, "crop_margin_mm {DEFAULT_CROP_MARGIN_MM}");
        let _ = writeln!(s, "normalize_percentiles {} {}", DEFAULT_PERCENTILES.0, DEFAULT_PERCENTILES.1);
        let _ = writeln!(s, "affine_lncc {:.6} {:.6}", self.affine_metric.0, self.affine_metric.1);
        let _ = writeln!(s, "nonlinear_lncc {:.6} {:.6}", self.nonlinear_metric.0, self.nonlinear_metric.1);
        let _ = writeln!(s, "min_jacobian {:.6}", self.min_jacobian);
        match &self.hips {
            Some(p) => {
                let c: Vec<String> = p.coefficients().iter().map(|v| format!("{v:.9e}")).collect();
                let _ = writeln!(s, "hips_coefficients {}", c.join(" "));
                let _ = writeln!(s, "hips_residual {:.6e}", p.residual);
                let _ = writeln!(s, "hips_fell_back {}", p.fell_back);
            }
            None => {
                let _ = writeln!(s, "hips skipped");
            }
        }
        s
    }

    /// Body, its SHA-256, then wall-clock timings.
    pub fn render(&self) -> String {
        let body = self.body();
        let mut s = body.clone();
        let _ = writeln!(s, "body_sha256 {}", hex::encode(Sha256::digest(body.as_bytes())));
        for (stage, d) in &self.timings {
            let _ = writeln!(s, "time_s {stage} {:.3}", d.as_secs_f64());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// Fused labels on the full input grid.
    pub labels_left: LabelVolume,
    pub labels_right: LabelVolume,
    pub volumes_left: Vec<VolumeEntry>,
    pub volumes_right: Vec<VolumeEntry>,
    /// Crop box in input voxel indices.
    pub crop_box: BoundingBox,
    pub qc_png: Vec<u8>,
    pub provenance: Provenance,
    pub debug: Option<Intermediates>,
}

fn paste(cropped: &LabelVolume, full: &crate::image::Grid, bbox: &BoundingBox) -> LabelVolume {
    let d = full.dims();
    let cd = cropped.dims();
    let mut labels = vec![0u16; full.len()];
    for k in 0..cd[2] {
        for j in 0..cd[1] {
            let src = cd[0] * (j + cd[1] * k);
            let z = k + bbox.min[2] as usize;
            let y = j + bbox.min[1] as usize;
            let dst = bbox.min[0] as usize + d[0] * (y + d[1] * z);
            labels[dst..dst + cd[0]].copy_from_slice(&cropped.labels()[src..src + cd[0]]);
        }
    }
    LabelVolume::from_parts_unchecked(full.clone(), labels, cropped.dictionary().clone())
}

struct Clock(Vec<(String, Duration)>, Instant);

impl Clock {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.0.push((stage.to_string(), now - self.1));
        self.1 = now;
    }
}

/// Run the full pipeline on one input.
pub fn segment(req: &SegmentationRequest<'_>) -> Result<SegmentationResult> {
    let atlas = req.atlas;
    atlas.validate()?;
    atlas.require_precomputed()?;
    req.fusion.validate()?;
    req.registration.validate()?;
    let mut clock = Clock(Vec::new(), Instant::now());
    let (plo, phi) = DEFAULT_PERCENTILES;

    // 1-2: normalise, affine template alignment, crop
    let input = robust_normalize(req.input, plo, phi)?;
    let template = &atlas.template;
    let affine = register_affine(&input, template, &req.registration)?;
    let template_to_input = affine.transform.inverse()?;
    let crop_box = propagate_crop_box(
        &atlas.crop_box,
        template.grid(),
        &template_to_input,
        DEFAULT_CROP_MARGIN_MM,
        input.grid(),
    )?;
    let cropped = input.crop(&crop_box)?;
    let cgrid = cropped.grid().clone();
    clock.lap("affine_crop");

    // 3: contrast synthesis
    let (target, hips) = match req.contrast {
        InputContrast::T1 => {
            let h = fit_hips_with_cutoff(&cropped, &atlas.target_landmarks, background_cutoff(&input)?)?;
            let syn = synthesize_wmn(&cropped, &h.polynomial, h.landmarks.background_cutoff());
            (syn, Some(h.polynomial))
        }
        InputContrast::Wmn => (cropped.clone(), None),
    };
    clock.lap("hips");

    // 4: template → input nonlinear registration (R)
    let tsp = template.grid().spacing();
    let tmargin = [0, 1, 2].map(|a| (2.0 * DEFAULT_CROP_MARGIN_MM / tsp[a]).ceil() as i64);
    let tbox = atlas.crop_box.dilated(tmargin).clamped(template.grid())?;
    let template_crop = template.crop(&tbox)?;
    let reg = register_diffeomorphic(&target, &template_crop, &affine.transform, &req.registration)?;
    let r = TransformChain::from_field(reg.field.clone());
    clock.lap("nonlinear");

    // 5: priors → input through W_pIT ∘ R
    let warped: Vec<(String, Volume3D, LabelVolume, LabelVolume)> = atlas
        .priors
        .par_iter()
        .map(|p| {
            let w = p.warp_to_template.clone().ok_or_else(|| Error::AtlasNotPrecomputed(p.id.clone()))?;
            let chain = compose(&TransformChain::from_field(w), &r);
            Ok((
                p.id.clone(),
                warp_image(&p.image, &chain, &cgrid, Interpolation::Trilinear),
                warp_labels(&p.labels_left, &chain, &cgrid),
                warp_labels(&p.labels_right, &chain, &cgrid),
            ))
        })
        .collect::<Result<_>>()?;
    clock.lap("warp_priors");

    // 6: fuse each hemisphere
    let mut fused = Vec::with_capacity(2);
    for side in 0..2 {
        let votes = warped
            .iter()
            .map(|(id, img, l, rr)| AtlasVote::new(id.clone(), img.clone(), if side == 0 { l.clone() } else { rr.clone() }))
            .collect::<Result<Vec<_>>>()?;
        fused.push(fuse(&target, &votes, &req.fusion)?.with_dictionary(atlas.dictionary.clone())?);
    }
    let cropped_right = fused.pop().expect("two hemispheres");
    let cropped_left = fused.pop().expect("two hemispheres");
    clock.lap("fusion");

    // 7-8: paste back and tabulate
    let labels_left = paste(&cropped_left, input.grid(), &crop_box);
    let labels_right = paste(&cropped_right, input.grid(), &crop_box);
    let volumes_left = compute_volumes(&labels_left);
    let volumes_right = compute_volumes(&labels_right);

    // 9: QC
    let warped_template = warp_image(template, &r, &cgrid, Interpolation::Trilinear);
    let both: Vec<u16> = cropped_left
        .labels()
        .iter()
        .zip(cropped_right.labels())
        .map(|(&a, &b)| if a != 0 { a } else { b })
        .collect();
    let both = LabelVolume::from_parts_unchecked(cgrid.clone(), both, atlas.dictionary.clone());
    let qc_png = render_qc(&cropped, &both, &warped_template)?;
    clock.lap("outputs");

    let provenance = Provenance {
        atlas_version: atlas.version.clone(),
        priors: atlas.priors.iter().map(|p| p.id.clone()).collect(),
        contrast: req.contrast,
        parameters: req.fusion.describe().into_iter().chain(req.registration.describe()).collect(),
        crop_box,
        affine_metric: (affine.initial_metric, affine.final_metric),
        nonlinear_metric: (reg.initial_metric, reg.final_metric),
        min_jacobian: reg.min_jacobian,
        hips,
        timings: clock.0,
    };
    let debug = req.debug.then(|| Intermediates {
        cropped_input: cropped,
        fusion_target: target,
        warped_template,
        cropped_left,
        cropped_right,
        template_warp: reg.field,
    });
    Ok(SegmentationResult {
        labels_left,
        labels_right,
        volumes_left,
        volumes_right,
        crop_box,
        qc_png,
        provenance,
        debug,
    })
}

pub const OUTPUT_FILES: [&str; 8] = [
    "labels_left.nii.gz",
    "labels_right.nii.gz",
    "nucleiVols_left.txt",
    "nucleiVols_right.txt",
    "nucleiVols_left.tsv",
    "nucleiVols_right.tsv",
    "qc.png",
    "provenance.txt",
];

/// Write every output under `dir` and return the paths written.
pub fn write_outputs(result: &SegmentationResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| Error::io_at(&p, e))?;
        written.push(p);
        Ok(())
    };
    put(OUTPUT_FILES[0], &nifti::write_labels(&result.labels_left, true)?)?;
    put(OUTPUT_FILES[1], &nifti::write_labels(&result.labels_right, true)?)?;
    put(OUTPUT_FILES[2], volume_lines(&result.volumes_left).as_bytes())?;
    put(OUTPUT_FILES[3], volume_lines(&result.volumes_right).as_bytes())?;
    put(OUTPUT_FILES[4], volume_tsv(&result.volumes_left).as_bytes())?;
    put(OUTPUT_FILES[5], volume_tsv(&result.volumes_right).as_bytes())?;
    put(OUTPUT_FILES[6], &result.qc_png)?;
    put(OUTPUT_FILES[7], result.provenance.render().as_bytes())?;
    if let Some(d) = &result.debug {
        put("debug/cropped_input.nii.gz", &nifti::write_nifti(&d.cropped_input, Datatype::F32, true)?)?;
        put("debug/fusion_target.nii.gz", &nifti::write_nifti(&d.fusion_target, Datatype::F32, true)?)?;
        put("debug/warped_template.nii.gz", &nifti::write_nifti(&d.warped_template, Datatype::F32, true)?)?;
        put("debug/cropped_left.nii.gz", &nifti::write_labels(&d.cropped_left, true)?)?;
        put("debug/cropped_right.nii.gz", &nifti::write_labels(&d.cropped_right, true)?)?;
        put("debug/template_warp.nii.gz", &nifti::write_field(&d.template_warp, true)?)?;
    }
    Ok(written)
}
