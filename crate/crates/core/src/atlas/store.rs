//! On-disk bundle layout with a checksummed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{AtlasBundle, AtlasPrior};
use crate::error::{Error, Result};
use crate::image::BoundingBox;
use crate::labels::LabelDictionary;
use crate::nifti::{self, Datatype};

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "nucleiseg-atlas";
const TEMPLATE: &str = "template.nii.gz";
const CROPBOX: &str = "cropbox.txt";
const LANDMARKS: &str = "landmarks.txt";
const DICTIONARY: &str = "dictionary.txt";

fn prior_file(id: &str, name: &str) -> String {
    format!("priors/{id}/{name}.nii.gz")
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8], manifest: &mut Vec<(String, String)>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io_at(&path, e))?;
    manifest.push((rel.to_string(), digest(bytes)));
    Ok(())
}

/// Write `bundle` under `dir`. Volumes are stored as float64 so a reload is
/// bit-identical.
pub fn save_bundle(bundle: &AtlasBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    let mut files = Vec::new();
    write_file(dir, TEMPLATE, &nifti::write_nifti(&bundle.template, Datatype::F64, true)?, &mut files)?;
    let b = bundle.crop_box;
    let cropbox = format!("{} {} {} {} {} {}\n", b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]);
    write_file(dir, CROPBOX, cropbox.as_bytes(), &mut files)?;
    let landmarks: String = bundle.target_landmarks.iter().map(|v| format!("{v:?}\n")).collect();
    write_file(dir, LANDMARKS, landmarks.as_bytes(), &mut files)?;
    let mut dict = String::new();
    for (i, name) in bundle.dictionary.iter() {
        if name.contains(['\t', '\n']) {
            return Err(Error::InvalidParameter(format!("structure name {name:?} contains a tab or newline")));
        }
        dict.push_str(&format!("{i}\t{name}\n"));
    }
    write_file(dir, DICTIONARY, dict.as_bytes(), &mut files)?;
    for p in &bundle.priors {
        write_file(dir, &prior_file(&p.id, "image"), &nifti::write_nifti(&p.image, Datatype::F64, true)?, &mut files)?;
        write_file(dir, &prior_file(&p.id, "labels_left"), &nifti::write_labels(&p.labels_left, true)?, &mut files)?;
        write_file(dir, &prior_file(&p.id, "labels_right"), &nifti::write_labels(&p.labels_right, true)?, &mut files)?;
        if let Some(w) = &p.warp_to_template {
            write_file(dir, &prior_file(&p.id, "warp"), &nifti::write_field(w, true)?, &mut files)?;
        }
    }

    let mut manifest = format!("format {FORMAT}\nversion {}\n", bundle.version);
    let ids: Vec<&str> = bundle.priors.iter().map(|p| p.id.as_str()).collect();
    manifest.push_str(&format!("priors {}\n", ids.join(",")));
    for (rel, hash) in files {
        manifest.push_str(&format!("sha256 {hash} {rel}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io_at(&path, e))
}

struct Manifest {
    version: String,
    priors: Vec<String>,
    digests: BTreeMap<String, String>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedBundle {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_manifest(path: &Path, text: &str) -> Result<Manifest> {
    let mut format = None;
    let mut version = None;
    let mut priors = None;
    let mut digests = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line.split_once(' ').ok_or_else(|| malformed(path, format!("line {}: {line:?}", n + 1)))?;
        match key {
            "format" => format = Some(rest.to_string()),
            "version" => version = Some(rest.to_string()),
            "priors" => {
                priors = Some(rest.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect())
            }
            "sha256" => {
                let (hash, rel) = rest
                    .split_once(' ')
                    .ok_or_else(|| malformed(path, format!("line {}: expected `sha256 <hex> <file>`", n + 1)))?;
                digests.insert(rel.to_string(), hash.to_ascii_lowercase());
            }
            other => return Err(malformed(path, format!("unknown key {other:?}"))),
        }
    }
    if format.as_deref() != Some(FORMAT) {
        return Err(malformed(path, format!("format must be {FORMAT}")));
    }
    Ok(Manifest {
        version: version.ok_or_else(|| malformed(path, "missing version"))?,
        priors: priors.ok_or_else(|| malformed(path, "missing priors"))?,
        digests,
    })
}

struct Reader<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
}

impl Reader<'_> {
    fn listed(&self, rel: &str) -> bool {
        self.manifest.digests.contains_key(rel)
    }

    /// Read and checksum a manifest entry.
    fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(rel);
        let expected = self
            .manifest
            .digests
            .get(rel)
            .ok_or_else(|| malformed(&self.dir.join(MANIFEST), format!("no checksum for {rel}")))?;
        let bytes = fs::read(&path).map_err(|e| Error::io_at(&path, e))?;
        if &digest(&bytes) != expected {
            return Err(Error::ChecksumMismatch(path));
        }
        Ok(bytes)
    }

    fn read_text(&self, rel: &str) -> Result<(PathBuf, String)> {
        let path = self.dir.join(rel);
        let bytes = self.read(rel)?;
        let text = String::from_utf8(bytes).map_err(|_| malformed(&path, "not UTF-8"))?;
        Ok((path, text))
    }
}

fn parse_cropbox(path: &Path, text: &str) -> Result<BoundingBox> {
    let v: Vec<i64> = text
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| malformed(path, format!("not an integer: {t:?}"))))
        .collect::<Result<_>>()?;
    if v.len() != 6 {
        return Err(malformed(path, format!("expected 6 integers, found {}", v.len())));
    }
    Ok(BoundingBox::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]))
}

fn parse_dictionary(path: &Path, text: &str) -> Result<LabelDictionary> {
    let mut d = LabelDictionary::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (idx, name) = line
            .split_once('\t')
            .ok_or_else(|| malformed(path, format!("expected `<index>\\t<name>`: {line:?}")))?;
        let idx: u16 = idx.trim().parse().map_err(|_| malformed(path, format!("bad index {idx:?}")))?;
        if idx == 0 {
            return Err(Error::DictionaryConflict("index 0 is reserved for background".into()));
        }
        if let Some(prev) = d.insert(idx, name.trim()) {
            return Err(Error::DictionaryConflict(format!("index {idx} listed twice ({prev}, {})", name.trim())));
        }
    }
    Ok(d)
}

/// Load and verify a bundle written by [`save_bundle`].
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<AtlasBundle> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io_at(&mpath, e))?;
    let manifest = parse_manifest(&mpath, &mtext)?;
    let r = Reader { dir, manifest: &manifest };

    let template = nifti::read_nifti(&r.read(TEMPLATE)?)?;
    let (p, t) = r.read_text(CROPBOX)?;
    let crop_box = parse_cropbox(&p, &t)?;
    let (p, t) = r.read_text(LANDMARKS)?;
    let target_landmarks = t
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| malformed(&p, format!("not a number: {v:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let (p, t) = r.read_text(DICTIONARY)?;
    let dictionary = parse_dictionary(&p, &t)?;

    let mut priors = Vec::with_capacity(manifest.priors.len());
    for id in &manifest.priors {
        let image = nifti::read_nifti(&r.read(&prior_file(id, "image"))?)?;
        let left = nifti::read_labels(&r.read(&prior_file(id, "labels_left"))?)?;
        let right = nifti::read_labels(&r.read(&prior_file(id, "labels_right"))?)?;
        let mut prior = AtlasPrior::new(id.clone(), image, left, right)?;
        let warp = prior_file(id, "warp");
        if r.listed(&warp) {
            prior.warp_to_template = Some(nifti::read_field(&r.read(&warp)?)?);
        }
        priors.push(prior);
    }
    let mut bundle = AtlasBundle::new(template, crop_box, priors, dictionary, target_landmarks)?;
    bundle.version = manifest.version;
    Ok(bundle)
}

/// Read unprocessed priors laid out as `<dir>/<id>/image.nii.gz`,
/// `labels_left.nii.gz` and `labels_right.nii.gz`, in id order, plus an
/// optional `<dir>/dictionary.txt` (standard dictionary otherwise).
pub fn load_prior_dir(dir: impl AsRef<Path>) -> Result<(Vec<AtlasPrior>, LabelDictionary)> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io_at(dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io_at(dir, e))?;
        if e.path().is_dir() {
            ids.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    let mut priors = Vec::with_capacity(ids.len());
    for id in ids {
        let sub = dir.join(&id);
        let image = nifti::load_volume(sub.join("image.nii.gz"))?;
        let left = nifti::load_labels(sub.join("labels_left.nii.gz"))?;
        let right = nifti::load_labels(sub.join("labels_right.nii.gz"))?;
        priors.push(AtlasPrior::new(id, image, left, right)?);
    }
    if priors.is_empty() {
        return Err(Error::EmptyPriorSet);
    }
    let dpath = dir.join(DICTIONARY);
    let dictionary = if dpath.exists() {
        let text = fs::read_to_string(&dpath).map_err(|e| Error::io_at(&dpath, e))?;
        parse_dictionary(&dpath, &text)?
    } else {
        LabelDictionary::standard()
    };
    Ok((priors, dictionary))
}
