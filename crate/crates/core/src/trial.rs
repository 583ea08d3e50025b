//! Virtual clinical trials: biased splits, re-biasing, predictors,
//! degradation detection and bias attribution.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::composition::CompositionReport;
use crate::forest::{fit_forest, Forest, ForestKind, ForestParams, MaxFeatures};
use crate::phantom::{bin_attributes, AttributeBins, RawAttributes, Sex, SexCategory};
use crate::rng::{self, SplitMix64};
use crate::stats::{self, BootstrapConfig, Interval};
use crate::{Error, Result};

/// A per-subject quantity from a composition report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportField {
    #[serde(alias = "body_volume_l")]
    BodyVolume,
    FatPct,
    MusclePct,
    BodyMassKg,
    #[serde(alias = "bone_density_hu")]
    BoneDensity,
}

impl ReportField {
    pub fn value(self, r: &CompositionReport) -> Result<f64> {
        Ok(match self {
            ReportField::BodyVolume => r.body_volume_l,
            ReportField::FatPct => r.fat_pct,
            ReportField::MusclePct => r.muscle_pct,
            ReportField::BodyMassKg => r.body_mass_kg,
            ReportField::BoneDensity => r.bone_density_hu.ok_or_else(|| Error::degenerate("report has no bone density"))?,
        })
    }
}

/// Downstream task: body fat percentage or muscle mass percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Bfp,
    Mmp,
}

impl Task {
    pub fn target(self) -> ReportField {
        match self {
            Task::Bfp => ReportField::FatPct,
            Task::Mmp => ReportField::MusclePct,
        }
    }

    /// Boundary ordinate: the other composition percentage.
    pub fn boundary_feature(self) -> ReportField {
        match self {
            Task::Bfp => ReportField::MusclePct,
            Task::Mmp => ReportField::FatPct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdSide {
    /// `y >= slope * x + intercept` is in distribution.
    Above,
    /// `y < slope * x + intercept` is in distribution.
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Population {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

impl Population {
    pub fn label(self) -> &'static str {
        match self {
            Population::Id => "ID",
            Population::Ood => "OOD",
        }
    }
}

/// Linear decision boundary in a (x_feature, y_feature) plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasBoundary {
    pub x_feature: ReportField,
    pub y_feature: ReportField,
    pub slope: f64,
    pub intercept: f64,
    pub id_side: IdSide,
}

impl BiasBoundary {
    pub fn validate(&self) -> Result<()> {
        if !(self.slope.is_finite() && self.intercept.is_finite()) {
            return Err(Error::arg("boundary slope and intercept must be finite"));
        }
        if self.x_feature == self.y_feature {
            return Err(Error::arg("boundary needs two distinct features"));
        }
        Ok(())
    }

    pub fn population_of(&self, r: &CompositionReport) -> Result<Population> {
        let x = self.x_feature.value(r)?;
        let y = self.y_feature.value(r)?;
        let above = y >= self.slope * x + self.intercept;
        Ok(if above == (self.id_side == IdSide::Above) {
            Population::Id
        } else {
            Population::Ood
        })
    }

    pub fn flipped(self) -> Self {
        let id_side = match self.id_side {
            IdSide::Above => IdSide::Below,
            IdSide::Below => IdSide::Above,
        };
        Self { id_side, ..self }
    }

    /// Least-squares line of `y_feature` on `x_feature`, with the intercept
    /// shifted so that a fraction `quantile` of the reports fall below it.
    pub fn fit(
        reports: &[&CompositionReport],
        x_feature: ReportField,
        y_feature: ReportField,
        quantile: f64,
        id_side: IdSide,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&quantile) {
            return Err(Error::arg("boundary quantile must be in [0, 1]"));
        }
        let x = reports.iter().map(|r| x_feature.value(r)).collect::<Result<Vec<_>>>()?;
        let y = reports.iter().map(|r| y_feature.value(r)).collect::<Result<Vec<_>>>()?;
        let (slope, intercept) = least_squares(&x, &y)?;
        let mut resid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b - (slope * a + intercept)).collect();
        resid.sort_by(f64::total_cmp);
        let shift = stats::quantile_sorted(&resid, quantile);
        let b = Self {
            x_feature,
            y_feature,
            slope,
            intercept: intercept + shift,
            id_side,
        };
        b.validate()?;
        Ok(b)
    }
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { expected: x.len(), actual: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::Insufficient("a line fit needs two points".into()));
    }
    let mx = stats::mean(x)?;
    let my = stats::mean(y)?;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::degenerate("constant regressor"));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// One trial subject: attributes and measured composition (the ground truth
/// of the downstream task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub attributes: RawAttributes,
    pub report: CompositionReport,
}

impl Subject {
    pub fn bins(&self) -> AttributeBins {
        bin_attributes(&self.attributes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub id: usize,
    pub ood: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 160,
            id: 60,
            ood: 60,
        }
    }
}

/// Indices into the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedSplit {
    pub train: Vec<usize>,
    pub id_test: Vec<usize>,
    pub ood_test: Vec<usize>,
    /// Pearson(x_feature, target) over the training subjects.
    pub train_pearson: f64,
    pub id_side_count: usize,
    pub ood_side_count: usize,
}

/// Draw train and ID test subjects from the ID side of the boundary and OOD
/// test subjects from the other side, without replacement.
pub fn build_biased_split(
    subjects: &[Subject],
    boundary: &BiasBoundary,
    counts: SplitCounts,
    target: ReportField,
    seed: u64,
) -> Result<BiasedSplit> {
    boundary.validate()?;
    let mut id_side = Vec::new();
    let mut ood_side = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        match boundary.population_of(&s.report)? {
            Population::Id => id_side.push(i),
            Population::Ood => ood_side.push(i),
        }
    }
    if id_side.len() < counts.train + counts.id {
        return Err(Error::Insufficient(format!(
            "{} subjects on the ID side, {} requested",
            id_side.len(),
            counts.train + counts.id
        )));
    }
    if ood_side.len() < counts.ood {
        return Err(Error::Insufficient(format!(
            "{} subjects on the OOD side, {} requested",
            ood_side.len(),
            counts.ood
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let picked: Vec<usize> = rng.sample_indices(id_side.len(), counts.train + counts.id).into_iter().map(|k| id_side[k]).collect();
    let ood_test = rng.sample_indices(ood_side.len(), counts.ood).into_iter().map(|k| ood_side[k]).collect();
    let (train, id_test) = picked.split_at(counts.train);
    let xs = train.iter().map(|&i| boundary.x_feature.value(&subjects[i].report)).collect::<Result<Vec<_>>>()?;
    let ys = train.iter().map(|&i| target.value(&subjects[i].report)).collect::<Result<Vec<_>>>()?;
    Ok(BiasedSplit {
        train_pearson: stats::pearson(&xs, &ys)?,
        train: train.to_vec(),
        id_test: id_test.to_vec(),
        ood_test,
        id_side_count: id_side.len(),
        ood_side_count: ood_side.len(),
    })
}

/// Indices of the reports that fall on `keep`'s side of the boundary.
pub fn rebias(reports: &[&CompositionReport], boundary: &BiasBoundary, keep: Population) -> Result<Vec<usize>> {
    let mut kept = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        if boundary.population_of(r)? == keep {
            kept.push(i);
        }
    }
    if kept.is_empty() && !reports.is_empty() {
        log::warn!("re-biasing kept none of {} {} subjects", reports.len(), keep.label());
    }
    Ok(kept)
}

/// One synthetic generation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Index of the conditioning subject.
    pub source: usize,
    pub replicate: usize,
    pub seed: u64,
}

/// Repeat every subject `factor` times, each with its own seed.
pub fn oversample_attributes(ids: &[usize], factor: usize, seed: u64) -> Result<Vec<GenerationRequest>> {
    if factor == 0 {
        return Err(Error::arg("oversample factor must be at least 1"));
    }
    Ok(ids
        .iter()
        .flat_map(|&source| {
            (0..factor).map(move |replicate| GenerationRequest {
                source,
                replicate,
                seed: rng::stream_seed(seed, (source * factor + replicate) as u64),
            })
        })
        .collect())
}

pub const ENCODED_COLUMNS: [&str; 8] = [
    "sex_M",
    "sex_F",
    "age_mid",
    "age_none",
    "height_mid",
    "height_none",
    "weight_mid",
    "weight_none",
];

/// Classifier encoding: sex one-hot, bins as midpoints (0 when missing) plus
/// a missing indicator per binned attribute.
pub fn encode_bins(b: &AttributeBins) -> Vec<f64> {
    let flag = |c: bool| if c { 1.0 } else { 0.0 };
    let mut row = vec![flag(b.sex == SexCategory::M), flag(b.sex == SexCategory::F)];
    for bin in [b.age, b.height, b.weight] {
        row.push(bin.midpoint().unwrap_or(0.0));
        row.push(flag(bin.is_none()));
    }
    row
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodClassifier {
    pub forest: Forest,
    /// Accuracy on a stratified 20% holdout before refitting on all rows.
    pub holdout_accuracy: f64,
}

impl OodClassifier {
    pub fn p_ood(&self, b: &AttributeBins) -> Result<f64> {
        self.forest.predict_proba(&encode_bins(b))
    }
}

fn stratified_holdout(labels: &[f64], frac: f64, rng: &mut SplitMix64) -> (Vec<usize>, Vec<usize>) {
    let mut fit = Vec::new();
    let mut hold = Vec::new();
    for class in [0.0, 1.0] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut idx);
        let k = libm::round(frac * idx.len() as f64) as usize;
        hold.extend_from_slice(&idx[..k]);
        fit.extend_from_slice(&idx[k..]);
    }
    fit.sort_unstable();
    hold.sort_unstable();
    (fit, hold)
}

/// Random-forest classifier of OOD membership (ID = 0, OOD = 1) from
/// attribute bins. Accuracy is measured on a stratified 80/20 holdout; the
/// returned forest is refit on every row.
pub fn fit_ood_classifier(id: &[AttributeBins], ood: &[AttributeBins], params: &ForestParams) -> Result<OodClassifier> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Insufficient("OOD classifier needs ID and OOD subjects".into()));
    }
    let x: Vec<Vec<f64>> = id.iter().chain(ood).map(encode_bins).collect();
    let y: Vec<f64> = id.iter().map(|_| 0.0).chain(ood.iter().map(|_| 1.0)).collect();
    let names: Vec<String> = ENCODED_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut rng = SplitMix64::new(rng::mix(params.seed ^ 0x0D));
    let (fit_idx, hold_idx) = stratified_holdout(&y, 0.2, &mut rng);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) { (idx.iter().map(|&i| x[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect()) };
    let (fx, fy) = pick(&fit_idx);
    let holdout_accuracy = if hold_idx.is_empty() {
        log::warn!("holdout is empty, reporting accuracy on the training rows");
        f64::NAN
    } else {
        let f = fit_forest(&fx, &fy, ForestKind::Classifier, params, names.clone())?;
        let mut hits = 0usize;
        for &i in &hold_idx {
            if f.predict(&x[i])? == y[i] {
                hits += 1;
            }
        }
        hits as f64 / hold_idx.len() as f64
    };
    let forest = fit_forest(&x, &y, ForestKind::Classifier, params, names)?;
    let holdout_accuracy = if holdout_accuracy.is_nan() {
        let hits = x.iter().zip(&y).filter(|(r, l)| forest.predict(r).map(|p| p == **l).unwrap_or(false)).count();
        hits as f64 / x.len() as f64
    } else {
        holdout_accuracy
    };
    Ok(OodClassifier { forest, holdout_accuracy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub mae: f64,
    pub ci: Interval,
    pub weights: Vec<f64>,
}

/// Importance-weighted MAE of ID errors as an estimate of OOD MAE. The CI
/// resamples (error, weight) pairs.
pub fn weighted_degradation_estimate(
    id_errors: &[f64],
    id_attrs: &[AttributeBins],
    classifier: &OodClassifier,
    prior_id: f64,
    prior_ood: f64,
    boot: &BootstrapConfig,
) -> Result<WeightedEstimate> {
    if id_errors.len() != id_attrs.len() {
        return Err(Error::LengthMismatch { expected: id_errors.len(), actual: id_attrs.len() });
    }
    let p: Vec<f64> = id_attrs.iter().map(|b| classifier.p_ood(b)).collect::<Result<_>>()?;
    let weights = stats::importance_weights(&p, prior_id, prior_ood)?;
    let mae = stats::weighted_mae(id_errors, &weights)?;
    let n = id_errors.len();
    let ci = stats::bootstrap_with(boot, |rng| {
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.below(n);
            num += weights[i] * id_errors[i].abs();
            den += weights[i];
        }
        // A replicate that drew only zero-weight rows carries no estimate;
        // fall back to the full-sample value.
        if den > 0.0 {
            num / den
        } else {
            mae
        }
    })?
    .including(mae);
    Ok(WeightedEstimate { mae, ci, weights })
}

/// Maps a subject to a prediction of the task target. Implementations are
/// deterministic.
pub trait Predictor {
    fn predict(&self, subject: &Subject) -> Result<f64>;
}

/// `y_hat = alpha * feature + beta`, fit by least squares on the training
/// split. With the body-volume feature this is the shortcut a model can learn
/// from a biased training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShortcutLinear {
    pub feature: ReportField,
    pub alpha: f64,
    pub beta: f64,
}

impl ShortcutLinear {
    pub fn fit(train: &[&Subject], feature: ReportField, target: ReportField) -> Result<Self> {
        let x = train.iter().map(|s| feature.value(&s.report)).collect::<Result<Vec<_>>>()?;
        let y = train.iter().map(|s| target.value(&s.report)).collect::<Result<Vec<_>>>()?;
        let (alpha, beta) = least_squares(&x, &y)?;
        Ok(Self { feature, alpha, beta })
    }
}

impl Predictor for ShortcutLinear {
    fn predict(&self, s: &Subject) -> Result<f64> {
        Ok(self.alpha * self.feature.value(&s.report)? + self.beta)
    }
}

/// Truth plus Gaussian noise, seeded per subject id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleNoise {
    pub target: ReportField,
    pub sigma: f64,
    pub seed: u64,
}

impl Predictor for OracleNoise {
    fn predict(&self, s: &Subject) -> Result<f64> {
        let mut rng = SplitMix64::stream(self.seed, rng::hash_str(&s.id));
        Ok(self.target.value(&s.report)? + self.sigma * rng.normal())
    }
}

/// Precomputed predictions keyed by subject id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionTable(pub BTreeMap<String, f64>);

impl Predictor for PredictionTable {
    fn predict(&self, s: &Subject) -> Result<f64> {
        self.0
            .get(&s.id)
            .copied()
            .ok_or_else(|| Error::arg(format!("no prediction for subject {}", s.id)))
    }
}

fn default_sigma() -> f64 {
    0.5
}

fn default_shortcut_feature() -> ReportField {
    ReportField::BodyVolume
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorSpec {
    ShortcutLinear {
        #[serde(default = "default_shortcut_feature")]
        feature: ReportField,
    },
    OracleNoise {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Predictions from a CSV with header `subject_id,prediction`.
    External { predictions: String },
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec::ShortcutLinear {
            feature: default_shortcut_feature(),
        }
    }
}

/// Build a predictor from its spec. Trainable predictors are fit on `train`;
/// external ones need the loaded `table`.
pub fn build_predictor(
    spec: &PredictorSpec,
    train: &[&Subject],
    target: ReportField,
    table: Option<PredictionTable>,
) -> Result<Box<dyn Predictor + Send + Sync>> {
    Ok(match spec {
        PredictorSpec::ShortcutLinear { feature } => Box::new(ShortcutLinear::fit(train, *feature, target)?),
        PredictorSpec::OracleNoise { sigma, seed } => {
            if !(*sigma >= 0.0) {
                return Err(Error::arg("oracle noise sigma must be >= 0"));
            }
            Box::new(OracleNoise {
                target,
                sigma: *sigma,
                seed: *seed,
            })
        }
        PredictorSpec::External { predictions } => Box::new(
            table.ok_or_else(|| Error::arg(format!("external predictions {predictions} were not loaded")))?,
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleType {
    Real,
    RealWeighted,
    Synthetic,
    SyntheticRebias,
}

impl SampleType {
    pub fn label(self) -> &'static str {
        match self {
            SampleType::Real => "Real",
            SampleType::RealWeighted => "Real (Weighted)",
            SampleType::Synthetic => "Synthetic",
            SampleType::SyntheticRebias => "Synthetic (Re-biased)",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SampleType::Real => "real",
            SampleType::RealWeighted => "real_weighted",
            SampleType::Synthetic => "synthetic",
            SampleType::SyntheticRebias => "synthetic_rebias",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Acceptable,
    Indeterminate,
    Degraded,
}

impl Verdict {
    pub const ACCEPTABLE_BELOW: f64 = 2.0;
    pub const DEGRADED_ABOVE: f64 = 3.0;

    pub fn of(mae: f64) -> Verdict {
        if mae < Self::ACCEPTABLE_BELOW {
            Verdict::Acceptable
        } else if mae > Self::DEGRADED_ABOVE {
            Verdict::Degraded
        } else {
            Verdict::Indeterminate
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Acceptable => "acceptable",
            Verdict::Indeterminate => "indeterminate",
            Verdict::Degraded => "degraded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub population: Population,
    /// Attribute distribution the errors were measured on.
    pub attr_dist: Population,
    pub sample_type: SampleType,
    pub n: usize,
    pub mae: f64,
    pub mae_ci: Interval,
    pub z_vs_real: Option<f64>,
    pub z_ci: Option<Interval>,
    pub p_value: Option<f64>,
    pub verdict: Verdict,
}

/// Subjects entering [`run_trial`]. Synthetic cohorts are conditioned on the
/// attributes of the matching real test population.
#[derive(Debug, Clone, Copy)]
pub struct TrialInputs<'a> {
    pub id_real: &'a [&'a Subject],
    pub ood_real: &'a [&'a Subject],
    pub id_synthetic: &'a [&'a Subject],
    pub ood_synthetic: &'a [&'a Subject],
    pub boundary: &'a BiasBoundary,
}

/// OOD classifier and class priors for the importance-weighted baseline.
#[derive(Debug, Clone, Copy)]
pub struct Weighting<'a> {
    pub classifier: &'a OodClassifier,
    pub prior_id: f64,
    pub prior_ood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingSummary {
    pub holdout_accuracy: f64,
    pub prior_id: f64,
    pub prior_ood: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialOptions {
    pub bootstrap: BootstrapConfig,
    /// Forest for the error regression; every feature is a split candidate.
    pub regressor: ForestParams,
    pub min_attribution_samples: usize,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self {
            bootstrap: BootstrapConfig::default(),
            regressor: ForestParams {
                max_features: MaxFeatures::All,
                ..ForestParams::regressor(0)
            },
            min_attribution_samples: MIN_ATTRIBUTION_SAMPLES,
        }
    }
}

pub const MIN_ATTRIBUTION_SAMPLES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub target: ReportField,
    pub boundary: BiasBoundary,
    pub rows: Vec<TrialRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighting: Option<WeightingSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution: Option<AttributionBlock>,
}

impl TrialReport {
    pub fn row(&self, population: Population, sample_type: SampleType) -> Option<&TrialRow> {
        self.rows.iter().find(|r| r.population == population && r.sample_type == sample_type)
    }
}

/// Absolute errors of `predictor` on `subjects`.
pub fn absolute_errors(subjects: &[&Subject], predictor: &dyn Predictor, target: ReportField) -> Result<Vec<f64>> {
    subjects
        .iter()
        .map(|s| Ok((target.value(&s.report)? - predictor.predict(s)?).abs()))
        .collect()
}

fn z_or_inf(x: &[f64], y: &[f64]) -> f64 {
    match stats::z_score(x, y) {
        Ok(z) => z,
        Err(Error::InfiniteZ { sign: '-' }) => f64::NEG_INFINITY,
        Err(_) => f64::INFINITY,
    }
}

fn resample(x: &[f64], rng: &mut SplitMix64) -> Vec<f64> {
    (0..x.len()).map(|_| x[rng.below(x.len())]).collect()
}

fn error_row(
    population: Population,
    attr_dist: Population,
    sample_type: SampleType,
    errors: &[f64],
    real: &[f64],
    boot: &BootstrapConfig,
) -> Result<TrialRow> {
    let mae = stats::mae(errors)?;
    let mae_ci = stats::bootstrap_ci(errors, stats::Statistic::MeanAbs, boot)?.including(mae);
    let (z, z_ci, p) = if sample_type == SampleType::Real {
        (Some(0.0), Some(Interval { lo: 0.0, hi: 0.0 }), Some(1.0))
    } else if errors.len() >= 2 && real.len() >= 2 {
        let z = stats::z_score(errors, real)?;
        let zb = boot.with_seed(rng::stream_seed(boot.seed, 0x5A));
        let ci = stats::bootstrap_with(&zb, |rng| {
            let a = resample(errors, rng);
            let b = resample(real, rng);
            z_or_inf(&a, &b)
        })?
        .including(z);
        (Some(z), Some(ci), Some(stats::z_test_p(z)?))
    } else {
        log::warn!("{} {} has {} subjects; no z-test", population.label(), sample_type.label(), errors.len());
        (None, None, None)
    };
    Ok(TrialRow {
        population,
        attr_dist,
        sample_type,
        n: errors.len(),
        mae,
        mae_ci,
        z_vs_real: z,
        z_ci,
        p_value: p,
        verdict: Verdict::of(mae),
    })
}

/// Error sets of one trial, keyed by population and sample type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialErrors<'a> {
    pub sets: Vec<(Population, SampleType, Vec<&'a Subject>, Vec<f64>)>,
}

impl<'a> TrialErrors<'a> {
    pub fn get(&self, population: Population, sample_type: SampleType) -> Option<&[f64]> {
        self.sets
            .iter()
            .find(|(p, t, _, _)| *p == population && *t == sample_type)
            .map(|(_, _, _, e)| e.as_slice())
    }
}

/// Errors of every real, synthetic and re-biased synthetic sample.
pub fn trial_errors<'a>(inputs: &TrialInputs<'a>, predictor: &dyn Predictor, target: ReportField) -> Result<TrialErrors<'a>> {
    let mut out = TrialErrors::default();
    for (pop, real, synth) in [
        (Population::Id, inputs.id_real, inputs.id_synthetic),
        (Population::Ood, inputs.ood_real, inputs.ood_synthetic),
    ] {
        if real.is_empty() {
            return Err(Error::Insufficient(format!("no real {} subjects", pop.label())));
        }
        out.sets.push((pop, SampleType::Real, real.to_vec(), absolute_errors(real, predictor, target)?));
        if synth.is_empty() {
            continue;
        }
        let se = absolute_errors(synth, predictor, target)?;
        let reports: Vec<&CompositionReport> = synth.iter().map(|s| &s.report).collect();
        let kept = rebias(&reports, inputs.boundary, pop)?;
        let kept_subjects = kept.iter().map(|&i| synth[i]).collect();
        let kept_errors = kept.iter().map(|&i| se[i]).collect();
        out.sets.push((pop, SampleType::Synthetic, synth.to_vec(), se));
        out.sets.push((pop, SampleType::SyntheticRebias, kept_subjects, kept_errors));
    }
    Ok(out)
}

/// Evaluate `predictor` on every population and sample type.
///
/// Rows per population: real, then (OOD only, when `weighting` is given) the
/// importance-weighted ID estimate, then synthetic and re-biased synthetic.
/// z-scores compare each row's errors against the real errors of the same
/// population; the weighted row has none. Each row bootstraps on its own
/// stream.
pub fn run_trial(
    inputs: &TrialInputs<'_>,
    predictor: &dyn Predictor,
    target: ReportField,
    weighting: Option<Weighting<'_>>,
    options: &TrialOptions,
) -> Result<TrialReport> {
    inputs.boundary.validate()?;
    let errors = trial_errors(inputs, predictor, target)?;
    let mut rows = Vec::new();
    let mut row_index = 0u64;
    let mut next_boot = || {
        row_index += 1;
        options.bootstrap.with_seed(rng::stream_seed(options.bootstrap.seed, row_index))
    };
    let mut summary = None;
    for pop in [Population::Id, Population::Ood] {
        let real = errors.get(pop, SampleType::Real).unwrap_or(&[]);
        rows.push(error_row(pop, pop, SampleType::Real, real, real, &next_boot())?);
        if pop == Population::Ood {
            if let Some(w) = weighting {
                let id_errors = errors.get(Population::Id, SampleType::Real).unwrap_or(&[]);
                let bins: Vec<AttributeBins> = inputs.id_real.iter().map(|s| s.bins()).collect();
                let est = weighted_degradation_estimate(id_errors, &bins, w.classifier, w.prior_id, w.prior_ood, &next_boot())?;
                rows.push(TrialRow {
                    population: Population::Ood,
                    attr_dist: Population::Id,
                    sample_type: SampleType::RealWeighted,
                    n: id_errors.len(),
                    mae: est.mae,
                    mae_ci: est.ci,
                    z_vs_real: None,
                    z_ci: None,
                    p_value: None,
                    verdict: Verdict::of(est.mae),
                });
                summary = Some(WeightingSummary {
                    holdout_accuracy: w.classifier.holdout_accuracy,
                    prior_id: w.prior_id,
                    prior_ood: w.prior_ood,
                });
            }
        }
        for st in [SampleType::Synthetic, SampleType::SyntheticRebias] {
            match errors.get(pop, st) {
                Some(e) if !e.is_empty() => rows.push(error_row(pop, pop, st, e, real, &next_boot())?),
                Some(_) => log::warn!("{} {} is empty; row omitted", pop.label(), st.label()),
                None => {}
            }
        }
    }

    let samples = attribution_samples(&errors);
    let attribution = if samples.len() >= 2 && samples.iter().all(|s| s.errors.len() >= options.min_attribution_samples) {
        Some(attribute_errors(&samples, &options.regressor, options.min_attribution_samples)?)
    } else {
        log::warn!("attribution skipped: each sample type needs {} subjects", options.min_attribution_samples);
        None
    };
    Ok(TrialReport {
        target,
        boundary: *inputs.boundary,
        rows,
        weighting: summary,
        attribution,
    })
}

pub const ATTRIBUTION_FEATURES: [&str; 8] = [
    "sex",
    "age",
    "height",
    "weight",
    "body_fat_pct",
    "bone_density",
    "muscle_pct",
    "body_volume",
];

/// The eight attribution features of a subject; sex is 1 for female. Age,
/// height and weight enter as bin midpoints, the resolution at which
/// synthetic subjects are matched; measured quantities stay continuous.
pub fn attribution_row(s: &Subject) -> [Option<f64>; 8] {
    let b = s.bins();
    let r = &s.report;
    [
        s.attributes.sex.map(|x| if x == Sex::F { 1.0 } else { 0.0 }),
        b.age.midpoint(),
        b.height.midpoint(),
        b.weight.midpoint(),
        Some(r.fat_pct),
        r.bone_density_hu,
        Some(r.muscle_pct),
        Some(r.body_volume_l),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSample {
    pub sample_type: String,
    pub features: Vec<[f64; 8]>,
    pub errors: Vec<f64>,
}

impl AttributionSample {
    /// Missing features are filled with the column mean of the sample.
    pub fn from_subjects(sample_type: &str, subjects: &[&Subject], errors: Vec<f64>) -> Self {
        let raw: Vec<[Option<f64>; 8]> = subjects.iter().map(|s| attribution_row(s)).collect();
        let mut fill = [0.0; 8];
        for (c, f) in fill.iter_mut().enumerate() {
            let vals: Vec<f64> = raw.iter().filter_map(|r| r[c]).collect();
            if !vals.is_empty() {
                *f = vals.iter().sum::<f64>() / vals.len() as f64;
            }
        }
        let features = raw
            .iter()
            .map(|r| core::array::from_fn(|c| r[c].unwrap_or(fill[c])))
            .collect();
        Self {
            sample_type: sample_type.to_string(),
            features,
            errors,
        }
    }
}

/// Pooled ID + OOD samples: real, synthetic and re-biased synthetic.
fn attribution_samples(errors: &TrialErrors<'_>) -> Vec<AttributionSample> {
    let mut out = Vec::new();
    for st in [SampleType::Real, SampleType::Synthetic, SampleType::SyntheticRebias] {
        let mut subjects = Vec::new();
        let mut errs = Vec::new();
        for (_, t, s, e) in &errors.sets {
            if *t == st {
                subjects.extend(s.iter().copied());
                errs.extend_from_slice(e);
            }
        }
        if !subjects.is_empty() {
            out.push(AttributionSample::from_subjects(st.key(), &subjects, errs));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub sample_type: String,
    pub n: usize,
    /// Pearson(feature, |error|) per feature; `None` for dropped features.
    pub correlations: Vec<Option<f64>>,
    /// Fisher z-test p-value of each correlation against the first sample
    /// type's.
    pub correlation_p: Vec<Option<f64>>,
    /// Normalised importances of the error regressor (0 for dropped
    /// features).
    pub importance: Vec<f64>,
    /// MAE of the error regressor on a 20% holdout.
    pub regression_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub a: String,
    pub b: String,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionBlock {
    pub features: Vec<String>,
    pub dropped: Vec<String>,
    pub samples: Vec<SampleAttribution>,
    pub importance_correlations: Vec<PairCorrelation>,
}

impl AttributionBlock {
    pub fn sample(&self, sample_type: &str) -> Option<&SampleAttribution> {
        self.samples.iter().find(|s| s.sample_type == sample_type)
    }

    pub fn importance_correlation(&self, a: &str, b: &str) -> Option<f64> {
        self.importance_correlations
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
            .and_then(|p| p.pearson)
    }
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Relate absolute errors to the eight subject features, per sample type.
///
/// A feature constant within any sample is dropped everywhere so importance
/// vectors stay comparable. The first sample is the reference for the
/// correlation-difference p-values.
pub fn attribute_errors(samples: &[AttributionSample], params: &ForestParams, min_samples: usize) -> Result<AttributionBlock> {
    if samples.is_empty() {
        return Err(Error::Insufficient("no samples to attribute".into()));
    }
    for s in samples {
        if s.features.len() != s.errors.len() {
            return Err(Error::LengthMismatch { expected: s.features.len(), actual: s.errors.len() });
        }
        if s.errors.len() < min_samples.max(4) {
            return Err(Error::Insufficient(format!(
                "{} has {} subjects, attribution needs {}",
                s.sample_type,
                s.errors.len(),
                min_samples.max(4)
            )));
        }
    }
    let column = |s: &AttributionSample, c: usize| -> Vec<f64> { s.features.iter().map(|r| r[c]).collect() };
    let kept: Vec<usize> = (0..8).filter(|&c| samples.iter().all(|s| !is_constant(&column(s, c)))).collect();
    let dropped: Vec<String> = (0..8).filter(|c| !kept.contains(c)).map(|c| ATTRIBUTION_FEATURES[c].to_string()).collect();
    if !dropped.is_empty() {
        log::warn!("constant attribute columns dropped: {}", dropped.join(", "));
    }
    if kept.is_empty() {
        return Err(Error::degenerate("every attribute column is constant"));
    }
    let names: Vec<String> = kept.iter().map(|&c| ATTRIBUTION_FEATURES[c].to_string()).collect();

    let mut out = Vec::new();
    for s in samples {
        let n = s.errors.len();
        let errors_constant = is_constant(&s.errors);
        let mut correlations = vec![None; 8];
        for &c in &kept {
            if !errors_constant {
                correlations[c] = Some(stats::pearson(&column(s, c), &s.errors)?);
            }
        }
        let x: Vec<Vec<f64>> = s.features.iter().map(|r| kept.iter().map(|&c| r[c]).collect()).collect();
        // Same seed for every sample type, so identical inputs give identical
        // forests.
        let p = *params;
        let mut rng = SplitMix64::new(rng::mix(p.seed ^ 0xE7));
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let n_hold = (n / 5).max(1);
        let (hold, fit) = order.split_at(n_hold);
        let fx: Vec<Vec<f64>> = fit.iter().map(|&i| x[i].clone()).collect();
        let fy: Vec<f64> = fit.iter().map(|&i| s.errors[i]).collect();
        let holdout = fit_forest(&fx, &fy, ForestKind::Regressor, &p, names.clone())?;
        let mut abs_err = 0.0;
        for &i in hold {
            abs_err += (holdout.predict(&x[i])? - s.errors[i]).abs();
        }
        let forest = fit_forest(&x, &s.errors, ForestKind::Regressor, &p, names.clone())?;
        let imp = forest.feature_importance()?;
        let mut importance = vec![0.0; 8];
        for (j, &c) in kept.iter().enumerate() {
            importance[c] = imp[j];
        }
        out.push(SampleAttribution {
            sample_type: s.sample_type.clone(),
            n,
            correlations,
            correlation_p: vec![None; 8],
            importance,
            regression_mae: abs_err / hold.len() as f64,
        });
    }
    let reference = out[0].clone();
    for s in out.iter_mut() {
        for c in 0..8 {
            if let (Some(r0), Some(r1)) = (reference.correlations[c], s.correlations[c]) {
                s.correlation_p[c] = Some(stats::fisher_z_p(r0, reference.n, r1, s.n)?);
            }
        }
    }
    let mut pairs = Vec::new();
    for i in 0..out.len() {
        for j in i + 1..out.len() {
            let a: Vec<f64> = kept.iter().map(|&c| out[i].importance[c]).collect();
            let b: Vec<f64> = kept.iter().map(|&c| out[j].importance[c]).collect();
            pairs.push(PairCorrelation {
                a: out[i].sample_type.clone(),
                b: out[j].sample_type.clone(),
                pearson: stats::pearson(&a, &b).ok(),
            });
        }
    }
    Ok(AttributionBlock {
        features: ATTRIBUTION_FEATURES.iter().map(|s| s.to_string()).collect(),
        dropped,
        samples: out,
        importance_correlations: pairs,
    })
}
