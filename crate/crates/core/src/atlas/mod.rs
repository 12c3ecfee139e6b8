//! Atlas bundles: template, crop box, labelled priors and their
//! precomputed prior→template warps.

pub mod phantom;
mod store;
mod synthetic;
mod template;

use crate::error::{Error, Result};
use crate::image::{BoundingBox, LabelVolume, Volume3D};
use crate::labels::LabelDictionary;
use crate::registration::DisplacementField;

pub use store::{load_bundle, load_prior_dir, save_bundle, MANIFEST};
pub use synthetic::{build_synthetic_atlas, build_synthetic_atlas_with, SyntheticAtlas, SyntheticOptions};
pub use template::{
    build_atlas, build_template, crop_box_from_priors, precompute_prior_warps, target_landmarks_for, ATLAS_CROP_MARGIN,
};

/// Bundle format version written to the manifest.
pub const BUNDLE_VERSION: &str = "1";

/// One manually labelled atlas subject.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasPrior {
    pub id: String,
    /// WMn-contrast image.
    pub image: Volume3D,
    pub labels_left: LabelVolume,
    pub labels_right: LabelVolume,
    /// Field on the template grid resolving template points to prior
    /// points (W_pIT); `None` until precomputed.
    pub warp_to_template: Option<DisplacementField>,
}

impl AtlasPrior {
    pub fn new(id: impl Into<String>, image: Volume3D, labels_left: LabelVolume, labels_right: LabelVolume) -> Result<Self> {
        let id = id.into();
        check_id(&id)?;
        image.grid().check_same(labels_left.grid(), &format!("prior {id} left labels"))?;
        image.grid().check_same(labels_right.grid(), &format!("prior {id} right labels"))?;
        Ok(AtlasPrior {
            id,
            image,
            labels_left,
            labels_right,
            warp_to_template: None,
        })
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("prior id {id:?} must be [A-Za-z0-9_-]+")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasBundle {
    pub version: String,
    /// Mean WMn template.
    pub template: Volume3D,
    /// Deep grey nuclei box in template voxel indices.
    pub crop_box: BoundingBox,
    pub priors: Vec<AtlasPrior>,
    pub dictionary: LabelDictionary,
    /// HIPS target landmark intensities taken from the cropped template.
    pub target_landmarks: Vec<f64>,
}

impl AtlasBundle {
    /// Assemble and validate a bundle; prior label volumes adopt the bundle
    /// dictionary.
    pub fn new(
        template: Volume3D,
        crop_box: BoundingBox,
        priors: Vec<AtlasPrior>,
        dictionary: LabelDictionary,
        target_landmarks: Vec<f64>,
    ) -> Result<Self> {
        let priors = priors
            .into_iter()
            .map(|mut p| {
                p.labels_left = p.labels_left.with_dictionary(dictionary.clone())?;
                p.labels_right = p.labels_right.with_dictionary(dictionary.clone())?;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let b = AtlasBundle {
            version: BUNDLE_VERSION.to_string(),
            template,
            crop_box,
            priors,
            dictionary,
            target_landmarks,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.priors.is_empty() {
            return Err(Error::EmptyPriorSet);
        }
        let tg = self.template.grid();
        if self.crop_box.is_empty() || self.crop_box.clamped(tg)? != self.crop_box {
            return Err(Error::InvalidParameter(format!(
                "crop box {:?} does not lie inside the template grid",
                self.crop_box
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        for p in &self.priors {
            check_id(&p.id)?;
            if !ids.insert(p.id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate prior id {}", p.id)));
            }
            p.image.grid().check_same(p.labels_left.grid(), &format!("prior {} left labels", p.id))?;
            p.image.grid().check_same(p.labels_right.grid(), &format!("prior {} right labels", p.id))?;
            for lv in [&p.labels_left, &p.labels_right] {
                if let Some(l) = lv.present_labels().into_iter().find(|l| !self.dictionary.contains(*l)) {
                    return Err(Error::DictionaryConflict(format!(
                        "prior {} uses label {l} which is not in the bundle dictionary",
                        p.id
                    )));
                }
            }
            if let Some(w) = &p.warp_to_template {
                tg.check_same(w.grid(), &format!("prior {} warp", p.id))?;
            }
        }
        Ok(())
    }

    pub fn is_precomputed(&self) -> bool {
        self.priors.iter().all(|p| p.warp_to_template.is_some())
    }

    /// Error naming the first prior without a stored warp.
    pub fn require_precomputed(&self) -> Result<()> {
        match self.priors.iter().find(|p| p.warp_to_template.is_none()) {
            Some(p) => Err(Error::AtlasNotPrecomputed(p.id.clone())),
            None => Ok(()),
        }
    }

    /// The same bundle with prior `id` removed (template, crop box and
    /// landmarks unchanged).
    pub fn without_prior(&self, id: &str) -> AtlasBundle {
        AtlasBundle {
            priors: self.priors.iter().filter(|p| p.id != id).cloned().collect(),
            ..self.shallow()
        }
    }

    fn shallow(&self) -> AtlasBundle {
        AtlasBundle {
            version: self.version.clone(),
            template: self.template.clone(),
            crop_box: self.crop_box,
            priors: Vec::new(),
            dictionary: self.dictionary.clone(),
            target_landmarks: self.target_landmarks.clone(),
        }
    }
}
