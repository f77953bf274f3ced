//! Dataset manifest: a TOML document describing the generator config, each
//! subject's volume files and labels, and optionally the fold assignment.
//!
//! ```toml
//! format = "lpcl-dataset"
//! version = 1
//!
//! [generator]          # every SynthConfig field
//! extent = 16
//! ...
//!
//! [[subjects]]
//! id = "s0000"
//! role = "control"     # control | positive | consistency_only
//! visits = 3
//! volumes = ["volumes/s0000_v1.lvol", ...]   # relative to the manifest
//! labels = [0, 0, 0]
//! progression_rate = 0.0
//! onset = 0
//!
//! [split]              # optional, subject ids
//! validation = ["s0004", ...]
//! folds = [["s0001", ...], ...]
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_volume, write_volume, Dataset, Split, Subject, SynthConfig};
use crate::error::{Error, Result};
use crate::objectives::CohortRole;

pub const MANIFEST_FILE: &str = "manifest.toml";
const FORMAT: &str = "lpcl-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub id: String,
    pub role: CohortRole,
    pub visits: usize,
    pub volumes: Vec<String>,
    pub labels: Vec<u8>,
    pub progression_rate: f32,
    pub onset: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecord {
    pub validation: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub generator: SynthConfig,
    pub subjects: Vec<SubjectRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRecord>,
}

impl DatasetManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if m.format != FORMAT {
            return Err(Error::Mismatch(format!(
                "{}: format {:?}, expected {FORMAT:?}",
                path.display(),
                m.format
            )));
        }
        if m.version != 1 {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: m.version,
            });
        }
        for s in &m.subjects {
            if s.visits == 0 || s.volumes.len() != s.visits || s.labels.len() != s.visits {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    detail: format!("subject {}: visits, volumes and labels disagree", s.id),
                });
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Resolves the optional split record to subject indices.
    pub fn split(&self) -> Result<Option<Split>> {
        let Some(rec) = &self.split else {
            return Ok(None);
        };
        let index: HashMap<&str, usize> = self
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let resolve = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Mismatch(format!("split names unknown subject {id}")))
                })
                .collect()
        };
        Ok(Some(Split {
            validation: resolve(&rec.validation)?,
            folds: rec
                .folds
                .iter()
                .map(|f| resolve(f))
                .collect::<Result<_>>()?,
        }))
    }
}

fn volume_name(id: &str, t: usize) -> String {
    format!("volumes/{id}_v{}.lvol", t + 1)
}

/// Writes every volume under `dir/volumes/` and the manifest to
/// `dir/manifest.toml`.
pub fn save_dataset(dir: &Path, data: &Dataset, split: Option<&Split>) -> Result<DatasetManifest> {
    let vol_dir = dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut subjects = Vec::with_capacity(data.subjects.len());
    for s in &data.subjects {
        let mut names = Vec::with_capacity(s.visits());
        for (t, v) in s.volumes.iter().enumerate() {
            let name = volume_name(&s.id, t);
            write_volume(&dir.join(&name), v)?;
            names.push(name);
        }
        subjects.push(SubjectRecord {
            id: s.id.clone(),
            role: s.role,
            visits: s.visits(),
            volumes: names,
            labels: s.labels.iter().map(|&y| y as u8).collect(),
            progression_rate: s.progression_rate,
            onset: s.onset,
        });
    }
    let ids = |idx: &[usize]| {
        idx.iter()
            .map(|&i| data.subjects[i].id.clone())
            .collect::<Vec<_>>()
    };
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: 1,
        generator: data.config.clone(),
        subjects,
        split: split.map(|s| SplitRecord {
            validation: ids(&s.validation),
            folds: s.folds.iter().map(|f| ids(f)).collect(),
        }),
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a manifest (file or directory containing `manifest.toml`) and all
/// of its volumes.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Dataset)> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = file.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest = DatasetManifest::parse(&text, &file)?;
    let subjects = manifest
        .subjects
        .iter()
        .map(|r| {
            let volumes = r
                .volumes
                .iter()
                .map(|v| read_volume(&dir.join(v)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Subject {
                id: r.id.clone(),
                role: r.role,
                volumes,
                labels: r.labels.iter().map(|&y| y != 0).collect(),
                progression_rate: r.progression_rate,
                onset: r.onset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        config: manifest.generator.clone(),
        subjects,
    };
    Ok((manifest, dataset))
}
