use std::path::Path;

use vct::config::RunConfig;
use vct::pipeline::{run_trial_pipeline, TrialOutcome};
use vct_core::stats::{z_score, z_test_p};
use vct_core::trial::{PredictorSpec, SampleType, Verdict};

fn small(seed: u64) -> RunConfig {
    serde_json::from_value(serde_json::json!({
        "seed": seed,
        "cohort": { "n": 90, "spacing_mm": [8.0, 8.0, 8.0] },
        "trial": {
            "counts": { "train": 30, "id": 12, "ood": 12 },
            "bootstrap": { "n_boot": 500 },
            "classifier": { "min_samples_leaf": 4 },
            "min_attribution_samples": 10
        }
    }))
    .unwrap()
}

fn check_rows(o: &TrialOutcome) {
    for row in &o.report.rows {
        assert!(row.mae_ci.contains(row.mae), "{row:?}");
        if row.sample_type == SampleType::Real {
            assert_eq!(row.z_vs_real, Some(0.0));
            assert_eq!(row.p_value, Some(1.0));
        }
    }
}

#[test]
fn oracle_noise_is_acceptable_everywhere() {
    let mut cfg = small(3);
    cfg.trial.predictor = PredictorSpec::OracleNoise { sigma: 0.5, seed: 1 };
    let o = run_trial_pipeline(&cfg, Path::new(".")).unwrap();
    check_rows(&o);
    for row in &o.report.rows {
        assert!(row.mae < 2.0, "{row:?}");
        assert_eq!(row.verdict, Verdict::Acceptable);
    }
}

#[test]
fn small_trial_is_reproducible() {
    let a = run_trial_pipeline(&small(11), Path::new(".")).unwrap();
    let b = run_trial_pipeline(&small(11), Path::new(".")).unwrap();
    check_rows(&a);
    assert_eq!(a, b);
    assert_eq!(a.split.train.len(), 30);
    assert_eq!(a.split.id_test.len(), 12);
    assert_eq!(a.split.ood_test.len(), 12);
}

#[test]
fn shortcut_degrades_out_of_distribution() {
    let cfg = RunConfig {
        seed: Some(7),
        ..RunConfig::default()
    };
    let o = run_trial_pipeline(&cfg, Path::new(".")).unwrap();
    check_rows(&o);
    let errors = |role: &str| -> Vec<f64> {
        o.subjects
            .iter()
            .filter(|r| r.source == "real" && r.role == role)
            .map(|r| r.abs_error)
            .collect()
    };
    let (id, ood) = (errors("ID"), errors("OOD"));
    let p = z_test_p(z_score(&id, &ood).unwrap()).unwrap();
    assert!(p < 0.05, "p = {p}");
}
