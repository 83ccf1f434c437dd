use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Annotation, ImageRef, PixelBox};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub path: PathBuf,
    pub device_tag: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub image_id: String,
    pub annotator_ids: Vec<String>,
    pub consensus: bool,
    pub boxes: Vec<PixelBox>,
}

impl From<AnnotationEntry> for Annotation {
    fn from(e: AnnotationEntry) -> Self {
        Annotation { image_id: e.image_id, boxes: e.boxes, annotator_ids: e.annotator_ids, consensus: e.consensus }
    }
}

impl From<&Annotation> for AnnotationEntry {
    fn from(a: &Annotation) -> Self {
        AnnotationEntry {
            image_id: a.image_id.clone(),
            annotator_ids: a.annotator_ids.clone(),
            consensus: a.consensus,
            boxes: a.boxes.clone(),
        }
    }
}

impl Manifest {
    pub fn empty() -> Self {
        Self { version: MANIFEST_VERSION, images: Vec::new(), annotations: Vec::new() }
    }
}

/// A validated manifest with image paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub root: PathBuf,
    pub images: Vec<ImageRef>,
    pub annotations: Vec<Annotation>,
}

impl Corpus {
    pub fn image(&self, id: &str) -> Option<&ImageRef> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Consensus annotation for an image; images without one are normal.
    pub fn consensus_for(&self, id: &str) -> Annotation {
        self.annotations
            .iter()
            .find(|a| a.image_id == id && a.consensus)
            .cloned()
            .unwrap_or_else(|| Annotation::normal(id))
    }

    pub fn consensus_annotations(&self) -> Vec<Annotation> {
        self.images.iter().map(|i| self.consensus_for(&i.id)).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }
}

/// Reads and validates a manifest.
///
/// Every referenced image file must exist, ids must be unique, annotations
/// must reference known images, and each box must be non-degenerate and lie
/// inside its image.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(format!("manifest {}", path.display()), e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    corpus_from_manifest(manifest, root)
}

pub(crate) fn corpus_from_manifest(manifest: Manifest, root: PathBuf) -> Result<Corpus> {
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version { what: "manifest", found: manifest.version, expected: MANIFEST_VERSION });
    }

    let mut seen = HashSet::new();
    let mut dims = HashMap::new();
    let mut images = Vec::with_capacity(manifest.images.len());
    for entry in manifest.images {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Validation(format!("duplicate image id {:?}", entry.id)));
        }
        if entry.width == 0 || entry.height == 0 {
            return Err(Error::Validation(format!("image {:?} has zero size", entry.id)));
        }
        let full = if entry.path.is_absolute() { entry.path.clone() } else { root.join(&entry.path) };
        if !full.is_file() {
            return Err(Error::ImageLoad { id: entry.id, path: full, reason: "file not found".into() });
        }
        dims.insert(entry.id.clone(), (entry.width, entry.height));
        images.push(ImageRef {
            id: entry.id,
            path: full,
            device_tag: entry.device_tag,
            width: entry.width,
            height: entry.height,
        });
    }

    let mut annotations = Vec::with_capacity(manifest.annotations.len());
    for entry in manifest.annotations {
        let Some(&(w, h)) = dims.get(&entry.image_id) else {
            return Err(Error::Validation(format!("annotation references unknown image {:?}", entry.image_id)));
        };
        for b in &entry.boxes {
            b.validate_within(w as f64, h as f64)?;
        }
        annotations.push(Annotation::from(entry));
    }

    Ok(Corpus { root, images, annotations })
}

/// Writes the manifest atomically: the document is written to a sibling
/// temporary file and renamed over the target.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json("manifest", e))?;
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
