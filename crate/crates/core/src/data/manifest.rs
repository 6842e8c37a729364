use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::registry::{FeatureRegistry, FeatureSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub n_frames: usize,
    pub label_file: String,
    /// Feature-set name to `MMFT` file path.
    pub features: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
}

/// Dataset description. Relative paths resolve against the manifest's
/// directory. `feature_sets` declares feature sets beyond the built-in
/// registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<VideoEntry>,
    #[serde(default)]
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub feature_sets: BTreeMap<String, FeatureSpec>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(videos: Vec<VideoEntry>, splits: Splits, base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            videos,
            splits,
            feature_sets: BTreeMap::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Manifest = crate::io::read_json(path)?;
        m.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(v.id.as_str()) {
                return Err(Error::validation(format!("manifest: duplicate video id `{}`", v.id)));
            }
            if v.n_frames == 0 {
                return Err(Error::validation(format!("manifest: video `{}` has no frames", v.id)));
            }
        }
        for (split, list) in [("train", &self.splits.train), ("val", &self.splits.val)] {
            for id in list {
                if !ids.contains(id.as_str()) {
                    return Err(Error::validation(format!(
                        "manifest: {split} split names unknown video `{id}`"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Built-in registry extended with this manifest's `feature_sets`.
    pub fn registry(&self) -> Result<FeatureRegistry> {
        let mut reg = FeatureRegistry::default();
        for (name, spec) in &self.feature_sets {
            reg.register(name, *spec)?;
        }
        Ok(reg)
    }

    pub fn video(&self, id: &str) -> Result<&VideoEntry> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::validation(format!("manifest has no video `{id}`")))
    }

    /// Video ids of a split; `all` lists every video.
    pub fn split(&self, name: &str) -> Result<Vec<String>> {
        match name {
            "train" => Ok(self.splits.train.clone()),
            "val" => Ok(self.splits.val.clone()),
            "all" => Ok(self.videos.iter().map(|v| v.id.clone()).collect()),
            other => Err(Error::config(format!(
                "unknown split `{other}` (expected train, val or all)"
            ))),
        }
    }
}
