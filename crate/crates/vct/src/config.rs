//! JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vct_core::composition::DensityConfig;
use vct_core::forest::{ForestParams, MaxFeatures};
use vct_core::patch::WindowLossConfig;
use vct_core::phantom::PopulationModel;
use vct_core::rng;
use vct_core::stats::BootstrapConfig;
use vct_core::trial::{IdSide, PredictorSpec, ReportField, SplitCounts, Task};

use crate::error::{self, Result, VctError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory for generation and trials; may come from `--seed`.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub cohort: CohortConfig,
    pub density: DensityConfig,
    pub window_loss: WindowLossConfig,
    pub trial: TrialConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: None,
            cohort: CohortConfig::default(),
            density: DensityConfig::default(),
            window_loss: WindowLossConfig::default(),
            trial: TrialConfig::default(),
        }
    }
}

/// Phantom cohort settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n: usize,
    pub spacing_mm: [f64; 3],
    pub knee_bend_deg: f64,
    pub population: PopulationModel,
}

pub const DEFAULT_COHORT_SIZE: usize = 350;
pub const DEFAULT_SPACING_MM: f64 = 4.0;

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_COHORT_SIZE,
            spacing_mm: [DEFAULT_SPACING_MM; 3],
            knee_bend_deg: 0.0,
            population: PopulationModel::default(),
        }
    }
}

/// Boundary settings. Slope and intercept are fitted on the cohort when
/// either is missing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub x_feature: ReportField,
    /// Defaults to the task's boundary feature.
    pub y_feature: Option<ReportField>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub id_side: IdSide,
    /// Fraction of the cohort left below a fitted boundary.
    pub quantile: f64,
}

pub const DEFAULT_BOUNDARY_QUANTILE: f64 = 0.23;

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            x_feature: ReportField::BodyVolume,
            y_feature: None,
            slope: None,
            intercept: None,
            id_side: IdSide::Above,
            quantile: DEFAULT_BOUNDARY_QUANTILE,
        }
    }
}

/// Seeds of the trial stages; unset ones derive from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialSeeds {
    pub split: Option<u64>,
    pub synthetic: Option<u64>,
    pub bootstrap: Option<u64>,
    pub classifier: Option<u64>,
    pub regressor: Option<u64>,
}

/// Seeds after defaulting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeeds {
    pub cohort: u64,
    pub split: u64,
    pub synthetic: u64,
    pub bootstrap: u64,
    pub classifier: u64,
    pub regressor: u64,
}

impl TrialSeeds {
    pub fn resolve(&self, global: u64) -> ResolvedSeeds {
        let d = |s: Option<u64>, k: u64| s.unwrap_or_else(|| rng::stream_seed(global, k));
        ResolvedSeeds {
            cohort: global,
            split: d(self.split, 1),
            synthetic: d(self.synthetic, 2),
            bootstrap: d(self.bootstrap, 3),
            classifier: d(self.classifier, 4),
            regressor: d(self.regressor, 5),
        }
    }
}

/// Where the real cohort comes from: an existing manifest (optionally with
/// a `measure` output directory) or, by default, phantoms generated in
/// memory from the cohort settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSource {
    pub manifest: Option<String>,
    pub measurements: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub task: Task,
    pub cohort: CohortSource,
    pub boundary: BoundaryConfig,
    pub counts: SplitCounts,
    pub oversample_factor: usize,
    pub predictor: PredictorSpec,
    pub seeds: TrialSeeds,
    pub bootstrap: BootstrapConfig,
    pub classifier: ForestParams,
    pub regressor: ForestParams,
    /// Fit the OOD classifier and report the importance-weighted row.
    pub weighting: bool,
    /// `[prior_id, prior_ood]`; defaults to the cohort's side fractions.
    pub priors: Option<[f64; 2]>,
    pub min_attribution_samples: usize,
}

pub const DEFAULT_OVERSAMPLE: usize = 2;

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            task: Task::Bfp,
            cohort: CohortSource::default(),
            boundary: BoundaryConfig::default(),
            counts: SplitCounts::default(),
            oversample_factor: DEFAULT_OVERSAMPLE,
            predictor: PredictorSpec::default(),
            seeds: TrialSeeds::default(),
            bootstrap: BootstrapConfig::default(),
            classifier: ForestParams::classifier(0),
            regressor: ForestParams {
                max_features: MaxFeatures::All,
                ..ForestParams::regressor(0)
            },
            weighting: true,
            priors: None,
            min_attribution_samples: vct_core::trial::MIN_ATTRIBUTION_SAMPLES,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = error::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| VctError::config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| VctError::config("a seed is required (config \"seed\" or --seed)"))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cohort;
        if c.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VctError::config("cohort spacing must be positive"));
        }
        if self.threads == Some(0) {
            return Err(VctError::config("threads must be at least 1"));
        }
        c.population.validate().map_err(|e| VctError::config(e.to_string()))?;
        self.density.validate().map_err(|e| VctError::config(e.to_string()))?;
        self.window_loss.validate().map_err(|e| VctError::config(e.to_string()))?;
        let t = &self.trial;
        if t.oversample_factor == 0 {
            return Err(VctError::config("oversample_factor must be at least 1"));
        }
        if !(0.0..=1.0).contains(&t.boundary.quantile) {
            return Err(VctError::config("boundary quantile must be in [0, 1]"));
        }
        if let Some([a, b]) = t.priors {
            if !(a > 0.0 && b > 0.0 && ((a + b) - 1.0).abs() < 1e-9) {
                return Err(VctError::config("priors must be positive and sum to 1"));
            }
        }
        for p in [&t.classifier, &t.regressor] {
            p.validate().map_err(|e| VctError::config(e.to_string()))?;
        }
        t.bootstrap.validate().map_err(|e| VctError::config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.trial.counts, SplitCounts::default());
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trail": {}}"#).is_err());
    }

    #[test]
    fn nested_settings_parse() {
        let c: RunConfig = serde_json::from_str(
            r#"{"seed": 7, "trial": {"task": "mmp", "predictor": {"kind": "oracle_noise", "sigma": 0.3},
                "boundary": {"slope": -1.0, "intercept": 50.0, "id_side": "below"}}}"#,
        )
        .unwrap();
        assert_eq!(c.trial.task, Task::Mmp);
        assert_eq!(c.trial.boundary.id_side, IdSide::Below);
        assert!(matches!(c.trial.predictor, PredictorSpec::OracleNoise { sigma, .. } if sigma == 0.3));
        c.validate().unwrap();
    }

    #[test]
    fn seeds_derive_from_global() {
        let a = TrialSeeds::default().resolve(7);
        let b = TrialSeeds {
            split: Some(99),
            ..Default::default()
        }
        .resolve(7);
        assert_eq!(b.split, 99);
        assert_eq!(a.bootstrap, b.bootstrap);
        assert_ne!(a.split, a.bootstrap);
    }

    #[test]
    fn bad_priors_rejected() {
        let mut c = RunConfig::default();
        c.trial.priors = Some([0.5, 0.6]);
        assert!(c.validate().is_err());
    }
}
