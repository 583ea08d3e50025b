//! Cohort manifests: subject files, attributes and optional phantom truth.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vct_core::phantom::{bin_attributes, AttributeBins, PhantomTruth, RawAttributes, Sex, SexCategory};
use vct_core::volume::{LabelKind, LabelMap, Volume};

use crate::error::{self, Result, VctError};
use crate::{ctv, nifti};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PopulationTag {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "unsplit")]
    Unsplit,
}

/// Raw attributes as written to a manifest: sex is `"M"`, `"F"` or
/// `"none"`, missing numbers are `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attributes {
    pub sex: SexCategory,
    pub age_years: Option<f64>,
    pub height_cm: Option<f64>,
    pub weight_kg: Option<f64>,
}

impl From<RawAttributes> for Attributes {
    fn from(r: RawAttributes) -> Self {
        Self {
            sex: r.sex.into(),
            age_years: r.age_years,
            height_cm: r.height_cm,
            weight_kg: r.weight_kg,
        }
    }
}

impl From<Attributes> for RawAttributes {
    fn from(a: Attributes) -> Self {
        Self {
            sex: match a.sex {
                SexCategory::M => Some(Sex::M),
                SexCategory::F => Some(Sex::F),
                SexCategory::Unknown => None,
            },
            age_years: a.age_years,
            height_cm: a.height_cm,
            weight_kg: a.weight_kg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    /// Paths are relative to the manifest's directory unless absolute.
    pub image: String,
    pub tissue: String,
    pub structure: String,
    pub attributes: Attributes,
    /// Categories derived from `attributes`; recomputed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<AttributeBins>,
    pub population: PopulationTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PhantomTruth>,
}

impl ManifestSubject {
    pub fn raw_attributes(&self) -> RawAttributes {
        self.attributes.into()
    }

    pub fn bins(&self) -> AttributeBins {
        self.categories.unwrap_or_else(|| bin_attributes(&self.raw_attributes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<ManifestSubject>,
    pub seed: u64,
    pub spacing_mm: [f64; 3],
}

/// The three volumes of one subject.
#[derive(Debug, Clone)]
pub struct SubjectVolumes {
    pub image: Volume,
    pub tissue: LabelMap,
    pub structure: LabelMap,
}

fn load_image(path: &Path) -> Result<Volume> {
    if nifti::is_nifti(path) {
        nifti::load_nifti_volume(path)
    } else {
        ctv::load_volume(path)
    }
}

pub(crate) fn load_labels(path: &Path, kind: LabelKind) -> Result<LabelMap> {
    let map = if nifti::is_nifti(path) {
        nifti::load_nifti_labels(path, kind)?
    } else {
        ctv::load_labelmap(path)?
    };
    if map.kind() != kind {
        return Err(VctError::format(path, format!("expected a {kind:?} map")));
    }
    Ok(map)
}

/// A manifest together with the directory its relative paths resolve
/// against.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base: PathBuf,
}

impl LoadedManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = error::read(path)?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| VctError::config(format!("{}: {e}", path.display())))?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &manifest.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(VctError::config(format!("{}: duplicate subject id {}", path.display(), s.id)));
            }
        }
        Ok(Self {
            manifest,
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    pub fn volumes(&self, s: &ManifestSubject) -> Result<SubjectVolumes> {
        Ok(SubjectVolumes {
            image: load_image(&self.resolve(&s.image))?,
            tissue: load_labels(&self.resolve(&s.tissue), LabelKind::Tissue)?,
            structure: load_labels(&self.resolve(&s.structure), LabelKind::Structure)?,
        })
    }
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        json.push(b'\n');
        error::write(path, &json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attributes_serialize_with_none_category() {
        let a = Attributes::from(RawAttributes {
            sex: None,
            age_years: Some(44.0),
            height_cm: None,
            weight_kg: Some(70.0),
        });
        let j = serde_json::to_string(&a).unwrap();
        assert_eq!(j, r#"{"sex":"none","age_years":44.0,"height_cm":null,"weight_kg":70.0}"#);
        let back: Attributes = serde_json::from_str(&j).unwrap();
        assert_eq!(RawAttributes::from(back).sex, None);
    }

    #[test]
    fn population_tags() {
        let t: Vec<PopulationTag> = serde_json::from_str(r#"["ID","OOD","unsplit"]"#).unwrap();
        assert_eq!(t, vec![PopulationTag::Id, PopulationTag::Ood, PopulationTag::Unsplit]);
    }

    #[test]
    fn duplicate_ids_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = ManifestSubject {
            id: "a".into(),
            image: "a.ctv.json".into(),
            tissue: "t".into(),
            structure: "s".into(),
            attributes: RawAttributes::default().into(),
            categories: None,
            population: PopulationTag::Unsplit,
            truth: None,
        };
        let m = Manifest {
            subjects: vec![s.clone(), s],
            seed: 1,
            spacing_mm: [1.0; 3],
        };
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(LoadedManifest::load(&p).unwrap_err().exit_code(), 2);
    }
}
