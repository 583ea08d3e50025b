//! Phantom truth against the measurement pipeline.

use vct_core::composition::{measure_composition, DensityConfig};
use vct_core::geometry::measure_height;
use vct_core::phantom::{generate_phantom, PhantomSpec, Sex};
use vct_core::rng::SplitMix64;

fn random_spec(rng: &mut SplitMix64, spacing: f64) -> PhantomSpec {
    let fat = rng.uniform(0.1, 0.45);
    PhantomSpec {
        height_mm: rng.uniform(1500.0, 1950.0),
        weight_kg: rng.uniform(50.0, 110.0),
        fat_fraction: fat,
        muscle_fraction: rng.uniform(0.2, 0.85 - fat).min(0.45),
        sex: if rng.bernoulli(0.5) { Sex::F } else { Sex::M },
        age_years: rng.uniform(20.0, 89.0),
        spacing_mm: [spacing; 3],
        seed: rng.next_u64(),
        knee_bend_deg: 0.0,
    }
}

#[test]
fn measured_matches_truth() {
    let mut rng = SplitMix64::new(2024);
    let cfg = DensityConfig::default();
    for _ in 0..8 {
        let spec = random_spec(&mut rng, 4.0);
        let p = generate_phantom(&spec).unwrap();
        let t = &p.truth;
        let m = measure_composition(&p.image, &p.tissue, &cfg).unwrap();
        assert!((m.body_mass_kg * 1000.0 / t.body_mass_g - 1.0).abs() < 0.01, "{spec:?}");
        assert!((m.fat_pct - t.fat_pct).abs() < 0.5);
        assert!((m.muscle_pct - t.muscle_pct).abs() < 0.5);
        assert_eq!(m.bone_density_hu, Some(t.bone_density_hu));
        assert!((m.body_volume_l * 1e6 - t.body_volume_mm3).abs() < 1e-6);
        let h = measure_height(&p.tissue, &p.structure).unwrap();
        let tol = 2.0 * 4.0 * 3f64.sqrt();
        assert!((h.total_mm - t.height_breakdown.total_mm).abs() <= tol, "{} vs {}", h.total_mm, t.height_breakdown.total_mm);
    }
}

#[test]
fn bent_knee_keeps_leg_length() {
    let mut spec = random_spec(&mut SplitMix64::new(5), 3.0);
    spec.knee_bend_deg = 25.0;
    let p = generate_phantom(&spec).unwrap();
    let h = measure_height(&p.tissue, &p.structure).unwrap();
    let t = &p.truth.height_breakdown;
    assert!((h.total_mm - t.total_mm).abs() <= 2.0 * 3.0 * 3f64.sqrt(), "{} vs {}", h.total_mm, t.total_mm);
}

#[test]
fn fat_fraction_is_monotone() {
    let base = random_spec(&mut SplitMix64::new(9), 4.0);
    let cfg = DensityConfig::default();
    let mut last = f64::NEG_INFINITY;
    for fat in [0.12, 0.2, 0.28, 0.36] {
        let spec = PhantomSpec {
            fat_fraction: fat,
            muscle_fraction: 0.3,
            ..base.clone()
        };
        let p = generate_phantom(&spec).unwrap();
        let m = measure_composition(&p.image, &p.tissue, &cfg).unwrap();
        assert!(m.fat_pct > last);
        last = m.fat_pct;
    }
}
