//! Anatomical consistency between two manifests.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vct_core::anatomy::{cohort_consistency, measure_anatomy, per_class_dice, ConsistencyTable, SubjectAnatomy};
use vct_core::volume::structure::ORGANS;
use vct_core::volume::{LabelKind, LabelMap};

use crate::error::{Result, VctError};
use crate::manifest::{LoadedManifest, ManifestSubject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Subjects matched by position; Dice is reported.
    Paired,
    /// Unpaired cohorts; only Q–Q correlations.
    Cohort,
}

fn organs_only(mut a: SubjectAnatomy) -> SubjectAnatomy {
    a.volumes_ml.retain(|id, _| ORGANS.contains(id));
    a.centroids.retain(|id, _| ORGANS.contains(id));
    a
}

fn labels(m: &LoadedManifest, s: &ManifestSubject) -> Result<(LabelMap, LabelMap)> {
    let tissue = crate::manifest::load_labels(&m.resolve(&s.tissue), LabelKind::Tissue)?;
    let structure = crate::manifest::load_labels(&m.resolve(&s.structure), LabelKind::Structure)?;
    Ok((tissue, structure))
}

fn anatomy(tissue: &LabelMap, structure: &LabelMap, id: &str) -> Result<SubjectAnatomy> {
    measure_anatomy(structure, tissue)
        .map(organs_only)
        .map_err(|e| VctError::config(format!("{id}: {e}")))
}

pub fn compare(a: &LoadedManifest, b: &LoadedManifest, mode: Mode) -> Result<ConsistencyTable> {
    let (sa, sb) = (&a.manifest.subjects, &b.manifest.subjects);
    if sa.is_empty() || sb.is_empty() {
        return Err(VctError::config("both manifests need subjects"));
    }
    match mode {
        Mode::Cohort => {
            let measure = |m: &LoadedManifest, list: &[ManifestSubject]| -> Result<Vec<SubjectAnatomy>> {
                list.par_iter()
                    .map(|s| {
                        let (t, st) = labels(m, s)?;
                        anatomy(&t, &st, &s.id)
                    })
                    .collect()
            };
            let (ra, rb) = (measure(a, sa)?, measure(b, sb)?);
            Ok(cohort_consistency(&ra, &rb, None)?)
        }
        Mode::Paired => {
            if sa.len() != sb.len() {
                return Err(VctError::config(format!("paired mode needs equal cohorts, got {} and {}", sa.len(), sb.len())));
            }
            type Pair = (SubjectAnatomy, SubjectAnatomy, BTreeMap<u16, f64>);
            let pairs: Vec<Pair> = sa
                .par_iter()
                .zip(sb.par_iter())
                .map(|(x, y)| {
                    let (tx, sx) = labels(a, x)?;
                    let (ty, sy) = labels(b, y)?;
                    if !sx.grid().same_as(sy.grid()) {
                        return Err(VctError::config(format!("{} and {} are on different grids", x.id, y.id)));
                    }
                    let mut dice = per_class_dice(&sx, &sy)?;
                    dice.retain(|id, _| ORGANS.contains(id));
                    Ok((anatomy(&tx, &sx, &x.id)?, anatomy(&ty, &sy, &y.id)?, dice))
                })
                .collect::<Result<_>>()?;
            let ra: Vec<SubjectAnatomy> = pairs.iter().map(|p| p.0.clone()).collect();
            let rb: Vec<SubjectAnatomy> = pairs.iter().map(|p| p.1.clone()).collect();
            let dice: Vec<BTreeMap<u16, f64>> = pairs.into_iter().map(|p| p.2).collect();
            Ok(cohort_consistency(&ra, &rb, Some(&dice))?)
        }
    }
}
