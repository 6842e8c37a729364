use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub dim: usize,
    pub modality: Modality,
}

/// Known per-frame feature sets and their dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRegistry {
    entries: BTreeMap<String, FeatureSpec>,
}

const DEFAULTS: &[(&str, usize, Modality)] = &[
    ("densenet", 342, Modality::Visual),
    ("mae", 768, Modality::Visual),
    ("ires100", 512, Modality::Visual),
    ("fau", 512, Modality::Visual),
    ("mobilenet", 512, Modality::Visual),
    ("egemaps", 23, Modality::Audio),
    ("compare", 130, Modality::Audio),
    ("fbank", 80, Modality::Audio),
    ("wav2vec", 1024, Modality::Audio),
    ("ecapatdnn", 512, Modality::Audio),
    ("vggish", 128, Modality::Audio),
    ("hubert", 512, Modality::Audio),
];

impl Default for FeatureRegistry {
    fn default() -> Self {
        FeatureRegistry {
            entries: DEFAULTS
                .iter()
                .map(|&(name, dim, modality)| (name.to_string(), FeatureSpec { dim, modality }))
                .collect(),
        }
    }
}

impl FeatureRegistry {
    pub fn empty() -> Self {
        FeatureRegistry {
            entries: BTreeMap::new(),
        }
    }

    /// Adds an entry. Re-registering an identical entry is a no-op;
    /// conflicting redefinitions are rejected.
    pub fn register(&mut self, name: &str, spec: FeatureSpec) -> Result<()> {
        if spec.dim == 0 {
            return Err(Error::config(format!("feature set `{name}` has zero dimension")));
        }
        match self.entries.get(name) {
            Some(existing) if *existing != spec => Err(Error::config(format!(
                "feature set `{name}` already registered as {existing:?}, not {spec:?}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(name.to_string(), spec);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<FeatureSpec> {
        self.entries
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown feature set `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, FeatureSpec)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Checks that `names` exist and carry the expected modality; returns
    /// their summed dimension.
    pub fn total_dim(&self, names: &[String], modality: Modality) -> Result<usize> {
        let mut total = 0;
        for name in names {
            let spec = self.get(name)?;
            if spec.modality != modality {
                return Err(Error::config(format!(
                    "feature set `{name}` is {:?}, requested as {modality:?}",
                    spec.modality
                )));
            }
            total += spec.dim;
        }
        Ok(total)
    }
}
