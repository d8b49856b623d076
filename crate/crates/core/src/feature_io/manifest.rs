//! `manifest.json` dataset descriptors.
//!
//! ```json
//! {
//!   "dataset_name": "holidays",
//!   "ground_truth_kind": "holidays",
//!   "ground_truth_path": "groups.json",
//!   "images": [
//!     {
//!       "image_id": "100000",
//!       "features": [{ "layer": "inception_3a", "scale": 1, "path": "features/100000_inception_3a_s1.cfmp" }],
//!       "images": [{ "scale": 1, "path": "images/100000_s1.ppm" }]
//!     }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. `ground_truth_kind` is
//! `holidays` (a groups file, or the id/100 convention when the path is
//! empty) or `oxford` (a directory of `*_query.txt` / `*_good.txt` /
//! `*_ok.txt` / `*_junk.txt` files).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruthKind {
    #[default]
    Holidays,
    Oxford,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub layer: String,
    pub scale: u32,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub scale: u32,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    pub features: Vec<FeatureEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    #[serde(default)]
    pub ground_truth_kind: GroundTruthKind,
    #[serde(default)]
    pub ground_truth_path: String,
    pub images: Vec<ManifestImage>,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Explicit Holidays-style grouping; the first member of each group is the
/// query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupsFile {
    pub groups: Vec<GroupSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub members: Vec<String>,
}

impl DatasetManifest {
    pub fn new(dataset_name: impl Into<String>, images: Vec<ManifestImage>) -> Self {
        DatasetManifest {
            dataset_name: dataset_name.into(),
            ground_truth_kind: GroundTruthKind::Holidays,
            ground_truth_path: String::new(),
            images,
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut paths = HashSet::new();
        for img in &self.images {
            if !ids.insert(img.image_id.as_str()) {
                return Err(Error::DuplicateId(img.image_id.clone()));
            }
            let referenced = img
                .features
                .iter()
                .map(|f| (f.scale, &f.path))
                .chain(img.images.iter().map(|i| (i.scale, &i.path)));
            for (scale, p) in referenced {
                if !(1..=2).contains(&scale) {
                    return Err(Error::invalid(
                        "manifest",
                        format!("image {}: scale must be 1 or 2, got {scale}", img.image_id),
                    ));
                }
                if !paths.insert(p.as_str()) {
                    return Err(Error::invalid("manifest", format!("path {p:?} referenced twice")));
                }
            }
        }
        Ok(())
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.iter().map(|i| i.image_id.as_str())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn feature_path(&self, image_id: &str, layer: &str, scale: u32) -> Option<PathBuf> {
        let img = self.images.iter().find(|i| i.image_id == image_id)?;
        img.features
            .iter()
            .find(|f| f.layer == layer && f.scale == scale)
            .map(|f| self.resolve(&f.path))
    }

    pub fn image_path(&self, image_id: &str, scale: u32) -> Option<PathBuf> {
        let img = self.images.iter().find(|i| i.image_id == image_id)?;
        img.images.iter().find(|i| i.scale == scale).map(|i| self.resolve(&i.path))
    }

    /// Every feature file needed for `layers` x `scales` that is either not
    /// declared or not on disk. Undeclared files are reported by the path
    /// they would have under the default naming.
    pub fn missing_feature_files(&self, layers: &[String], scales: &[u32]) -> Vec<PathBuf> {
        let mut missing = Vec::new();
        for img in &self.images {
            for layer in layers {
                for &scale in scales {
                    match self.feature_path(&img.image_id, layer, scale) {
                        Some(p) if p.is_file() => {}
                        Some(p) => missing.push(p),
                        None => missing.push(self.resolve(&format!(
                            "<undeclared: {} {} scale {}>",
                            img.image_id, layer, scale
                        ))),
                    }
                }
            }
        }
        missing
    }

    pub fn ground_truth_location(&self) -> Option<PathBuf> {
        if self.ground_truth_path.is_empty() {
            None
        } else {
            Some(self.resolve(&self.ground_truth_path))
        }
    }
}

impl GroupsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("groups serialize");
        s.push('\n');
        s
    }
}
