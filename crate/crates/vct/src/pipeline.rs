//! Cohort generation, measurement and the full trial, parallel per subject.
//!
//! Work items are independent and collected in input order, so results do
//! not depend on the thread count.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vct_core::composition::{measure_composition, CompositionReport, DensityConfig};
use vct_core::geometry::measure_height;
use vct_core::phantom::{generate_phantom, subject_seed, AttributeBins, Phantom, PhantomTruth, RawAttributes};
use vct_core::rng::SplitMix64;
use vct_core::trial::{
    build_biased_split, build_predictor, fit_ood_classifier, oversample_attributes, run_trial, BiasBoundary, BiasedSplit,
    GenerationRequest, PredictionTable, PredictorSpec, Subject, TrialInputs, TrialOptions, TrialReport, Weighting,
};
use vct_core::volume::{LabelMap, Volume};

use crate::config::{CohortConfig, ResolvedSeeds, RunConfig};
use crate::ctv;
use crate::error::{self, Result, VctError};
use crate::manifest::{LoadedManifest, Manifest, ManifestSubject, PopulationTag};

/// Run `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| VctError::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Composition plus height of one subject. A failed height measurement is
/// logged and left out rather than failing the subject.
pub fn measure_subject(image: &Volume, tissue: &LabelMap, structure: &LabelMap, density: &DensityConfig, id: &str) -> Result<CompositionReport> {
    let mut r = measure_composition(image, tissue, density)?;
    match measure_height(tissue, structure) {
        Ok(h) => r.height = Some(h),
        Err(e) => log::warn!("{id}: height not measured: {e}"),
    }
    Ok(r)
}

pub fn subject_id(index: usize) -> String {
    format!("P{index:04}")
}

/// A generated phantom with the attributes it was drawn for.
pub struct Generated {
    pub attributes: RawAttributes,
    pub phantom: Phantom,
}

fn generate_one(cfg: &CohortConfig, seed: u64, bins: Option<&AttributeBins>) -> Result<Generated> {
    let mut rng = SplitMix64::new(seed);
    let draw = match bins {
        Some(b) => cfg.population.draw_conditioned(b, &mut rng)?,
        None => cfg.population.draw(&mut rng)?,
    };
    let mut spec = cfg.population.spec(&draw, cfg.spacing_mm, rng.next_u64());
    spec.knee_bend_deg = cfg.knee_bend_deg;
    Ok(Generated {
        attributes: draw.attributes(),
        phantom: generate_phantom(&spec)?,
    })
}

/// Phantom `index` of a cohort seeded with `seed`.
pub fn cohort_phantom(cfg: &CohortConfig, seed: u64, index: usize) -> Result<Generated> {
    generate_one(cfg, subject_seed(seed, index as u64), None)
}

/// Write `n` phantoms and their manifest into `out`.
pub fn write_cohort(out: &Path, cfg: &CohortConfig, seed: u64) -> Result<Manifest> {
    error::create_dir(out)?;
    let subjects = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let id = subject_id(i);
            let g = cohort_phantom(cfg, seed, i)?;
            let name = |part: &str| format!("{id}.{part}{}", ctv::HEADER_SUFFIX);
            let p = &g.phantom;
            ctv::save_volume(&p.image, &out.join(name("image")))?;
            ctv::save_labelmap(&p.tissue, &out.join(name("tissue")))?;
            ctv::save_labelmap(&p.structure, &out.join(name("structure")))?;
            log::info!("{id} written");
            Ok(ManifestSubject {
                image: name("image"),
                tissue: name("tissue"),
                structure: name("structure"),
                attributes: g.attributes.into(),
                categories: Some(vct_core::phantom::bin_attributes(&g.attributes)),
                population: PopulationTag::Unsplit,
                truth: Some(g.phantom.truth.clone()),
                id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        subjects,
        seed,
        spacing_mm: cfg.spacing_mm,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// A measured subject and, for phantoms, its construction truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredSubject {
    pub subject: Subject,
    pub truth: Option<PhantomTruth>,
}

fn measure_generated(id: String, g: Generated, density: &DensityConfig) -> Result<MeasuredSubject> {
    let p = &g.phantom;
    let report = measure_subject(&p.image, &p.tissue, &p.structure, density, &id)?;
    Ok(MeasuredSubject {
        subject: Subject {
            id,
            attributes: g.attributes,
            report,
        },
        truth: Some(g.phantom.truth),
    })
}

/// Generate and measure a cohort in memory; volumes are dropped after
/// measurement.
pub fn measured_cohort(cfg: &CohortConfig, density: &DensityConfig, seed: u64) -> Result<Vec<MeasuredSubject>> {
    (0..cfg.n)
        .into_par_iter()
        .map(|i| measure_generated(subject_id(i), cohort_phantom(cfg, seed, i)?, density))
        .collect()
}

/// Generate and measure one synthetic phantom per request, conditioned on
/// the attribute bins of its source subject.
pub fn synthesize(
    requests: &[GenerationRequest],
    sources: &[Subject],
    cfg: &CohortConfig,
    density: &DensityConfig,
) -> Result<Vec<MeasuredSubject>> {
    requests
        .par_iter()
        .map(|r| {
            let src = &sources[r.source];
            let g = generate_one(cfg, r.seed, Some(&src.bins()))?;
            measure_generated(format!("{}-syn{}", src.id, r.replicate), g, density)
        })
        .collect()
}

/// Measure every manifest subject. Failures are kept per subject.
pub fn measure_manifest(m: &LoadedManifest, density: &DensityConfig) -> Vec<Result<CompositionReport>> {
    m.manifest
        .subjects
        .par_iter()
        .map(|s| {
            let v = m.volumes(s)?;
            measure_subject(&v.image, &v.tissue, &v.structure, density, &s.id)
        })
        .collect()
}

/// Load `subject_id,prediction` rows.
pub fn load_predictions(path: &Path) -> Result<PredictionTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "prediction"] {
        return Err(VctError::format(path, "header must be subject_id,prediction"));
    }
    let mut table = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let y: f64 = row[1]
            .trim()
            .parse()
            .map_err(|_| VctError::format(path, format!("prediction for {} is not a number", &row[0])))?;
        table.insert(row[0].to_string(), y);
    }
    Ok(PredictionTable(table))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> VctError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => VctError::io(path, io),
        other => VctError::format(path, format!("{other:?}")),
    }
}

/// Everything a trial run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seeds: ResolvedSeeds,
    pub boundary: BiasBoundary,
    /// Whether slope and intercept were fitted on the cohort.
    pub boundary_fitted: bool,
    pub split: SplitSummary,
    pub report: TrialReport,
    /// Real cohort followed by synthetic subjects.
    pub subjects: Vec<SubjectRecord>,
    /// Every measured real subject, in cohort order.
    #[serde(skip)]
    pub cohort: Vec<Subject>,
    /// ID then OOD synthetic subjects.
    #[serde(skip)]
    pub synthetic: Vec<Subject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: Vec<String>,
    pub id_test: Vec<String>,
    pub ood_test: Vec<String>,
    pub train_pearson: f64,
    pub id_side_count: usize,
    pub ood_side_count: usize,
}

/// One row of `subjects.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub source: String,
    pub role: String,
    pub target: f64,
    pub prediction: f64,
    pub abs_error: f64,
    pub body_volume_l: f64,
    pub fat_pct: f64,
    pub muscle_pct: f64,
}

fn load_real_cohort(cfg: &RunConfig, seeds: &ResolvedSeeds, config_dir: &Path) -> Result<Vec<MeasuredSubject>> {
    let Some(mpath) = &cfg.trial.cohort.manifest else {
        return measured_cohort(&cfg.cohort, &cfg.density, seeds.cohort);
    };
    let m = LoadedManifest::load(&config_dir.join(mpath))?;
    if m.manifest.subjects.is_empty() {
        return Err(VctError::config("cohort manifest has no subjects"));
    }
    let reports: Vec<Result<CompositionReport>> = match &cfg.trial.cohort.measurements {
        Some(dir) => {
            let dir = config_dir.join(dir);
            m.manifest
                .subjects
                .iter()
                .map(|s| {
                    let p = dir.join(format!("{}.json", s.id));
                    let bytes = error::read(&p)?;
                    serde_json::from_slice(&bytes).map_err(|e| VctError::format(&p, e.to_string()))
                })
                .collect()
        }
        None => measure_manifest(&m, &cfg.density),
    };
    m.manifest
        .subjects
        .iter()
        .zip(reports)
        .map(|(s, r)| {
            Ok(MeasuredSubject {
                subject: Subject {
                    id: s.id.clone(),
                    attributes: s.raw_attributes(),
                    report: r?,
                },
                truth: s.truth.clone(),
            })
        })
        .collect()
}

fn resolve_boundary(cfg: &RunConfig, subjects: &[Subject]) -> Result<(BiasBoundary, bool)> {
    let b = &cfg.trial.boundary;
    let y_feature = b.y_feature.unwrap_or(cfg.trial.task.boundary_feature());
    match (b.slope, b.intercept) {
        (Some(slope), Some(intercept)) => {
            let boundary = BiasBoundary {
                x_feature: b.x_feature,
                y_feature,
                slope,
                intercept,
                id_side: b.id_side,
            };
            boundary.validate()?;
            Ok((boundary, false))
        }
        (None, None) => {
            let reports: Vec<&CompositionReport> = subjects.iter().map(|s| &s.report).collect();
            Ok((BiasBoundary::fit(&reports, b.x_feature, y_feature, b.quantile, b.id_side)?, true))
        }
        _ => Err(VctError::config("boundary needs both slope and intercept, or neither")),
    }
}

/// Split, fit the predictor, generate the matched synthetic cohorts and
/// evaluate. `config_dir` anchors relative paths in the config.
pub fn run_trial_pipeline(cfg: &RunConfig, config_dir: &Path) -> Result<TrialOutcome> {
    cfg.validate()?;
    let t = &cfg.trial;
    let seeds = t.seeds.resolve(cfg.require_seed()?);
    let real = load_real_cohort(cfg, &seeds, config_dir)?;
    let subjects: Vec<Subject> = real.into_iter().map(|m| m.subject).collect();
    log::info!("{} real subjects measured", subjects.len());

    let target = t.task.target();
    let (boundary, boundary_fitted) = resolve_boundary(cfg, &subjects)?;
    let split: BiasedSplit = build_biased_split(&subjects, &boundary, t.counts, target, seeds.split)?;
    let pick = |ix: &[usize]| -> Vec<&Subject> { ix.iter().map(|&i| &subjects[i]).collect() };
    let (train, id_real, ood_real) = (pick(&split.train), pick(&split.id_test), pick(&split.ood_test));

    let table = match &t.predictor {
        PredictorSpec::External { predictions } => Some(load_predictions(&config_dir.join(predictions))?),
        _ => None,
    };
    let predictor = build_predictor(&t.predictor, &train, target, table)?;

    let mut requests = oversample_attributes(&split.id_test, t.oversample_factor, seeds.synthetic)?;
    let n_id_requests = requests.len();
    requests.extend(oversample_attributes(&split.ood_test, t.oversample_factor, seeds.synthetic)?);
    let synthetic: Vec<Subject> = synthesize(&requests, &subjects, &cfg.cohort, &cfg.density)?
        .into_iter()
        .map(|m| m.subject)
        .collect();
    let (id_syn, ood_syn) = synthetic.split_at(n_id_requests);
    let id_syn: Vec<&Subject> = id_syn.iter().collect();
    let ood_syn: Vec<&Subject> = ood_syn.iter().collect();
    log::info!("{} synthetic subjects measured", synthetic.len());

    let classifier = if t.weighting {
        let params = vct_core::forest::ForestParams {
            seed: seeds.classifier,
            ..t.classifier
        };
        let bins = |v: &[&Subject]| v.iter().map(|s| s.bins()).collect::<Vec<_>>();
        Some(fit_ood_classifier(&bins(&id_real), &bins(&ood_real), &params)?)
    } else {
        None
    };
    let [prior_id, prior_ood] = t.priors.unwrap_or_else(|| {
        let n = (split.id_side_count + split.ood_side_count) as f64;
        [split.id_side_count as f64 / n, split.ood_side_count as f64 / n]
    });
    let weighting = classifier.as_ref().map(|c| Weighting {
        classifier: c,
        prior_id,
        prior_ood,
    });

    let options = TrialOptions {
        bootstrap: t.bootstrap.with_seed(seeds.bootstrap),
        regressor: vct_core::forest::ForestParams {
            seed: seeds.regressor,
            ..t.regressor
        },
        min_attribution_samples: t.min_attribution_samples,
    };
    let inputs = TrialInputs {
        id_real: &id_real,
        ood_real: &ood_real,
        id_synthetic: &id_syn,
        ood_synthetic: &ood_syn,
        boundary: &boundary,
    };
    let report = run_trial(&inputs, predictor.as_ref(), target, weighting, &options)?;

    let mut records = Vec::new();
    let mut role_of = vec!["unused"; subjects.len()];
    for (ix, role) in [(&split.train, "train"), (&split.id_test, "ID"), (&split.ood_test, "OOD")] {
        for &i in ix.iter() {
            role_of[i] = role;
        }
    }
    let record = |s: &Subject, source: &str, role: &str| -> Result<SubjectRecord> {
        let y = target.value(&s.report)?;
        let yhat = predictor.predict(s)?;
        Ok(SubjectRecord {
            subject_id: s.id.clone(),
            source: source.into(),
            role: role.into(),
            target: y,
            prediction: yhat,
            abs_error: (y - yhat).abs(),
            body_volume_l: s.report.body_volume_l,
            fat_pct: s.report.fat_pct,
            muscle_pct: s.report.muscle_pct,
        })
    };
    for (s, role) in subjects.iter().zip(&role_of) {
        if *role != "unused" {
            records.push(record(s, "real", role)?);
        }
    }
    for (set, role) in [(&id_syn, "ID"), (&ood_syn, "OOD")] {
        for s in set.iter() {
            records.push(record(s, "synthetic", role)?);
        }
    }
    let ids = |ix: &[usize]| ix.iter().map(|&i| subjects[i].id.clone()).collect();
    Ok(TrialOutcome {
        seeds,
        boundary,
        boundary_fitted,
        split: SplitSummary {
            train: ids(&split.train),
            id_test: ids(&split.id_test),
            ood_test: ids(&split.ood_test),
            train_pearson: split.train_pearson,
            id_side_count: split.id_side_count,
            ood_side_count: split.ood_side_count,
        },
        report,
        subjects: records,
        cohort: subjects,
        synthetic,
    })
}
