//! Dice overlap, per-structure reports and leave-one-out cross-validation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::atlas::AtlasBundle;
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::image::LabelVolume;
use crate::labels::{structure_members, LabelDictionary};
use crate::pipeline::{segment, InputContrast, SegmentationRequest};
use crate::registration::RegistrationParams;

/// Reporting conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiceOptions {
    /// [`dice_with`] returns 1.0 for two empty sets if set, 0.0 otherwise.
    /// Reports always skip pairs where a structure is absent from both.
    pub empty_is_one: bool,
    /// Sample (n−1) instead of population standard deviation.
    pub sample_std: bool,
}

impl Default for DiceOptions {
    fn default() -> Self {
        DiceOptions {
            empty_is_one: true,
            sample_std: false,
        }
    }
}

fn overlap(a: &LabelVolume, b: &LabelVolume, in_a: impl Fn(u16) -> bool, in_b: impl Fn(u16) -> bool) -> Result<(usize, usize, usize)> {
    a.grid().check_same(b.grid(), "dice pair")?;
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (p, q) = (in_a(x), in_b(y));
        na += p as usize;
        nb += q as usize;
        both += (p && q) as usize;
    }
    Ok((na, nb, both))
}

fn ratio(na: usize, nb: usize, both: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// `2|A∩B| / (|A|+|B|)` for voxels carrying `label`; 1.0 when both are
/// empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    let (na, nb, both) = overlap(a, b, |x| x == label, |y| y == label)?;
    Ok(ratio(na, nb, both))
}

pub fn dice_with(a: &LabelVolume, b: &LabelVolume, label: u16, opts: &DiceOptions) -> Result<f64> {
    let (na, nb, both) = overlap(a, b, |x| x == label, |y| y == label)?;
    Ok(if na + nb == 0 && !opts.empty_is_one { 0.0 } else { ratio(na, nb, both) })
}

/// Dice of a structure: aggregates (whole thalamus, whole GP) use the union
/// of their constituent labels. `None` when the structure is absent from
/// both volumes.
pub fn structure_dice(a: &LabelVolume, b: &LabelVolume, index: u16) -> Result<Option<f64>> {
    let m = structure_members(index);
    let (na, nb, both) = overlap(a, b, |x| m.contains(&x), |y| m.contains(&y))?;
    Ok((na + nb > 0).then(|| ratio(na, nb, both)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureDice {
    pub index: u16,
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    /// Free-text notes printed above the pretty table.
    pub notes: Vec<String>,
    /// Structures with at least one sample, in dictionary order.
    pub structures: Vec<StructureDice>,
}

impl DiceReport {
    pub fn get(&self, index: u16) -> Option<&StructureDice> {
        self.structures.iter().find(|s| s.index == index)
    }

    /// `structure<TAB>n<TAB>mean<TAB>std`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("structure\tn\tmean\tstd\n");
        for d in &self.structures {
            let _ = writeln!(s, "{}-{}\t{}\t{:.6}\t{:.6}", d.index, d.name, d.values.len(), d.mean, d.std);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        let _ = writeln!(s, "{:<14} {:>3} {:>8} {:>8}", "structure", "n", "mean", "std");
        for d in &self.structures {
            let name = format!("{}-{}", d.index, d.name);
            let _ = writeln!(s, "{:<14} {:>3} {:>8.4} {:>8.4}", name, d.values.len(), d.mean, d.std);
        }
        s
    }
}

fn summarise(index: u16, name: &str, values: Vec<f64>, sample_std: bool) -> StructureDice {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = if sample_std && values.len() > 1 { n - 1.0 } else { n };
    StructureDice {
        index,
        name: name.to_string(),
        values,
        mean,
        std: (ss / denom).sqrt(),
    }
}

/// Per-structure Dice over paired volumes. Structures come from the union
/// of the truth dictionaries; a pair where a structure is absent from both
/// members contributes nothing for it.
pub fn dice_report(auto: &[LabelVolume], truth: &[LabelVolume]) -> Result<DiceReport> {
    dice_report_with(auto, truth, &DiceOptions::default())
}

pub fn dice_report_with(auto: &[LabelVolume], truth: &[LabelVolume], opts: &DiceOptions) -> Result<DiceReport> {
    if auto.len() != truth.len() {
        return Err(Error::LengthMismatch(auto.len(), truth.len()));
    }
    let mut dict = LabelDictionary::new();
    for t in truth {
        for (i, n) in t.dictionary().iter() {
            if !dict.contains(i) {
                dict.insert(i, n);
            }
        }
    }
    let mut structures = Vec::new();
    for (index, name) in dict.iter() {
        let mut values = Vec::new();
        for (a, t) in auto.iter().zip(truth) {
            if let Some(d) = structure_dice(a, t, index)? {
                values.push(d);
            }
        }
        if !values.is_empty() {
            structures.push(summarise(index, name, values, opts.sample_std));
        }
    }
    Ok(DiceReport {
        notes: Vec::new(),
        structures,
    })
}

/// Both hemispheres in one map (left wins where they overlap).
pub fn bilateral(left: &LabelVolume, right: &LabelVolume) -> Result<LabelVolume> {
    left.grid().check_same(right.grid(), "hemispheres")?;
    let labels = left
        .labels()
        .iter()
        .zip(right.labels())
        .map(|(&a, &b)| if a != 0 { a } else { b })
        .collect();
    LabelVolume::new(left.grid().clone(), labels, left.dictionary().clone())
}

/// The reduced bundles used by [`loocv`]: fold `p` holds out prior `p`.
pub fn loocv_folds(bundle: &AtlasBundle) -> Result<Vec<(String, AtlasBundle)>> {
    if bundle.priors.len() < 2 {
        return Err(Error::TooFewPriors(bundle.priors.len()));
    }
    Ok(bundle.priors.iter().map(|p| (p.id.clone(), bundle.without_prior(&p.id))).collect())
}

/// Leave-one-out: each prior's WMn image is segmented with the others and
/// scored bilaterally against its own labels. The template and stored warps
/// are reused, not rebuilt per fold.
pub fn loocv(bundle: &AtlasBundle, reg: &RegistrationParams, fusion: &FusionParams) -> Result<DiceReport> {
    bundle.require_precomputed()?;
    let folds = loocv_folds(bundle)?;
    let pairs = folds
        .par_iter()
        .zip(bundle.priors.par_iter())
        .map(|((held_out, reduced), prior)| {
            debug_assert!(reduced.priors.iter().all(|p| &p.id != held_out));
            let req = SegmentationRequest {
                fusion: fusion.clone(),
                registration: reg.clone(),
                ..SegmentationRequest::new(&prior.image, InputContrast::Wmn, reduced)
            };
            let r = segment(&req)?;
            Ok((
                bilateral(&r.labels_left, &r.labels_right)?,
                bilateral(&prior.labels_left, &prior.labels_right)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (auto, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let mut report = dice_report(&auto, &truth)?;
    report.notes.push(format!("leave-one-out over {} priors", bundle.priors.len()));
    report
        .notes
        .push("template and prior warps are shared across folds (not rebuilt per fold): mildly optimistic".into());
    Ok(report)
}
