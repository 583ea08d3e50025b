//! Hounsfield-unit densitometry and body-composition measurement.
//!
//! Voxel density follows the mass-normalised HU variant
//! `rho = (HU + 1000) / (HU_rho + 1000)` g/cm³, after voxels at or below the
//! air threshold are flattened to the air floor. Masses are accumulated in
//! `f64` in ascending linear-index order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::geometry::HeightBreakdown;
use crate::volume::{tissue, voxel_volume_mm3, LabelKind, LabelMap, Unit, Volume, VolumeData};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    /// Reference HU per tissue id; ids not listed use `default_hu_rho`.
    pub hu_rho_per_tissue: BTreeMap<u16, f64>,
    pub default_hu_rho: f64,
    pub air_threshold_hu: f64,
    pub air_floor_hu: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            hu_rho_per_tissue: BTreeMap::new(),
            default_hu_rho: 0.0,
            air_threshold_hu: -900.0,
            air_floor_hu: -1000.0,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        let all = core::iter::once(&self.default_hu_rho).chain(self.hu_rho_per_tissue.values());
        for &r in all {
            if !(r > -1000.0) || !r.is_finite() {
                return Err(Error::arg(format!("HU_rho must exceed -1000, got {r}")));
            }
        }
        if !self.air_threshold_hu.is_finite() || !self.air_floor_hu.is_finite() {
            return Err(Error::arg("air thresholds must be finite"));
        }
        Ok(())
    }

    pub fn hu_rho(&self, tissue_id: u16) -> f64 {
        self.hu_rho_per_tissue
            .get(&tissue_id)
            .copied()
            .unwrap_or(self.default_hu_rho)
    }

    #[inline]
    fn adjust(&self, hu: f64) -> f64 {
        if hu <= self.air_threshold_hu {
            self.air_floor_hu
        } else {
            hu
        }
    }

    /// `1 / (HU_rho + 1000)` per possible label value, so the inner loops do a
    /// table lookup instead of a map search.
    fn inverse_denominators(&self, kind: LabelKind) -> alloc::vec::Vec<f64> {
        (0..=u16::MAX)
            .map(|id| {
                let rho = match kind {
                    LabelKind::Tissue => self.hu_rho(id),
                    LabelKind::Structure => self.default_hu_rho,
                };
                1.0 / (rho + 1000.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub body_mass_kg: f64,
    pub fat_pct: f64,
    pub muscle_pct: f64,
    /// Mean raw HU over bone-tissue voxels; `None` without bone voxels.
    pub bone_density_hu: Option<f64>,
    pub body_volume_l: f64,
    pub per_tissue_mass_g: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<HeightBreakdown>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearCalibration {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl LinearCalibration {
    pub const IDENTITY: Self = Self {
        slope: 1.0,
        intercept: 0.0,
        r2: 1.0,
    };

    pub fn apply(&self, x: f64) -> Result<f64> {
        apply_calibration(self, x)
    }
}

fn require_hu(vol: &Volume) -> Result<()> {
    if vol.unit() != Unit::Hu {
        return Err(Error::arg("expected a volume in HU"));
    }
    Ok(())
}

pub fn adjust_air_hu(vol: &Volume, cfg: &DensityConfig) -> Result<Volume> {
    require_hu(vol)?;
    let data = match vol.data() {
        VolumeData::I16(v) => {
            let floor = libm::round(cfg.air_floor_hu).clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            VolumeData::I16(
                v.iter()
                    .map(|&h| if f64::from(h) <= cfg.air_threshold_hu { floor } else { h })
                    .collect(),
            )
        }
        VolumeData::F32(v) => VolumeData::F32(
            v.iter()
                .map(|&h| {
                    if f64::from(h) <= cfg.air_threshold_hu {
                        cfg.air_floor_hu as f32
                    } else {
                        h
                    }
                })
                .collect(),
        ),
    };
    Volume::new(vol.grid().clone(), data, Unit::Hu)
}

pub fn hu_to_density(hu: f64, hu_rho: f64) -> Result<f64> {
    if !(hu_rho > -1000.0) {
        return Err(Error::arg(format!("HU_rho must exceed -1000, got {hu_rho}")));
    }
    Ok((hu + 1000.0) / (hu_rho + 1000.0))
}

fn check_shared_grid(vol: &Volume, labels: &LabelMap) -> Result<()> {
    if !vol.grid().same_as(labels.grid()) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Mass in grams of the voxels whose label satisfies `select`. For tissue
/// maps the voxel's own tissue id picks its HU_rho.
pub fn region_mass_g(
    vol: &Volume,
    labels: &LabelMap,
    select: impl Fn(u16) -> bool,
    cfg: &DensityConfig,
) -> Result<f64> {
    require_hu(vol)?;
    check_shared_grid(vol, labels)?;
    cfg.validate()?;
    let inv = cfg.inverse_denominators(labels.kind());
    let mut sum = 0.0;
    for (i, &id) in labels.data().iter().enumerate() {
        if select(id) {
            sum += (cfg.adjust(vol.get(i)) + 1000.0) * inv[id as usize];
        }
    }
    Ok(sum * voxel_volume_mm3(vol.grid()) / 1000.0)
}

/// Body composition of one subject. The body is every nonzero tissue voxel.
pub fn measure_composition(
    vol: &Volume,
    tissue_map: &LabelMap,
    cfg: &DensityConfig,
) -> Result<CompositionReport> {
    require_hu(vol)?;
    check_shared_grid(vol, tissue_map)?;
    if tissue_map.kind() != LabelKind::Tissue {
        return Err(Error::arg("composition needs a tissue label map"));
    }
    cfg.validate()?;
    let inv = cfg.inverse_denominators(LabelKind::Tissue);

    let mut density_sum = alloc::vec![0.0f64; 1 << 16];
    let mut voxels_per_id = alloc::vec![0usize; 1 << 16];
    let mut bone_hu_sum = 0.0;
    for (i, &id) in tissue_map.data().iter().enumerate() {
        if id == tissue::BACKGROUND {
            continue;
        }
        let hu = vol.get(i);
        if id == tissue::BONE {
            bone_hu_sum += hu;
        }
        voxels_per_id[id as usize] += 1;
        density_sum[id as usize] += (cfg.adjust(hu) + 1000.0) * inv[id as usize];
    }
    let body_voxels: usize = voxels_per_id.iter().sum();
    let bone_voxels = voxels_per_id[tissue::BONE as usize];

    if body_voxels == 0 {
        return Err(Error::degenerate("empty body mask"));
    }
    let vv = voxel_volume_mm3(vol.grid());
    let to_g = |s: f64| s * vv / 1000.0;
    let present: alloc::vec::Vec<u16> = (1..=u16::MAX).filter(|&id| voxels_per_id[id as usize] > 0).collect();
    let body_g: f64 = to_g(present.iter().map(|&id| density_sum[id as usize]).sum::<f64>());
    if !(body_g > 0.0) {
        return Err(Error::degenerate("body mass is zero"));
    }
    let mass_of = |id: u16| to_g(density_sum[id as usize]);
    let per_tissue_mass_g = present
        .iter()
        .map(|&id| {
            let name = tissue_map
                .class_table()
                .get(&id)
                .cloned()
                .unwrap_or_else(|| format!("{id}"));
            (name, mass_of(id))
        })
        .collect();

    Ok(CompositionReport {
        body_mass_kg: body_g / 1000.0,
        fat_pct: 100.0 * mass_of(tissue::FAT) / body_g,
        muscle_pct: 100.0 * mass_of(tissue::MUSCLE) / body_g,
        bone_density_hu: (bone_voxels > 0).then(|| bone_hu_sum / bone_voxels as f64),
        body_volume_l: body_voxels as f64 * vv / 1e6,
        per_tissue_mass_g,
        height: None,
    })
}

/// Least-squares fit `reference ≈ slope * measured + intercept`.
pub fn fit_linear_calibration(measured: &[f64], reference: &[f64]) -> Result<LinearCalibration> {
    if measured.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: measured.len(),
            actual: reference.len(),
        });
    }
    let n = measured.len();
    if n < 3 {
        return Err(Error::Insufficient(format!("calibration needs 3 points, got {n}")));
    }
    if measured.iter().chain(reference).any(|v| !v.is_finite()) {
        return Err(Error::arg("calibration inputs must be finite"));
    }
    let nf = n as f64;
    let mx = measured.iter().sum::<f64>() / nf;
    let my = reference.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in measured.iter().zip(reference) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(Error::degenerate("measured values have zero variance"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        log::warn!("reference values are constant; r2 reported as 0");
        0.0
    } else {
        ((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(LinearCalibration { slope, intercept, r2 })
}

pub fn apply_calibration(cal: &LinearCalibration, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::arg("calibration input must be finite"));
    }
    Ok(cal.slope * x + cal.intercept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{default_class_table, Grid};
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn tissue_map(grid: &Grid, data: Vec<u16>) -> LabelMap {
        LabelMap::new(grid.clone(), LabelKind::Tissue, data, default_class_table(LabelKind::Tissue)).unwrap()
    }

    fn hu(grid: &Grid, data: Vec<i16>) -> Volume {
        Volume::new(grid.clone(), VolumeData::I16(data), Unit::Hu).unwrap()
    }

    #[test]
    fn air_rule() {
        let g = Grid::new([4, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = hu(&g, vec![-950, -900, -899, 40]);
        let a = adjust_air_hu(&v, &DensityConfig::default()).unwrap();
        assert_eq!(a.data(), &VolumeData::I16(vec![-1000, -1000, -899, 40]));
        let d = Volume::new(g, VolumeData::F32(vec![0.0; 4]), Unit::GramsPerCm3).unwrap();
        assert!(adjust_air_hu(&d, &DensityConfig::default()).is_err());
    }

    #[test]
    fn density_points() {
        assert_eq!(hu_to_density(-1000.0, 0.0).unwrap(), 0.0);
        assert_eq!(hu_to_density(0.0, 0.0).unwrap(), 1.0);
        assert_eq!(hu_to_density(500.0, 0.0).unwrap(), 1.5);
        assert!(hu_to_density(0.0, -1000.0).is_err());
    }

    #[test]
    fn litre_of_water_weighs_a_kilogram() {
        let g = Grid::new([100, 100, 100], [1.0; 3], [0.0; 3]).unwrap();
        let v = hu(&g, vec![0; 1_000_000]);
        let t = tissue_map(&g, vec![tissue::BODY; 1_000_000]);
        let m = region_mass_g(&v, &t, |id| id != 0, &DensityConfig::default()).unwrap();
        assert!((m - 1000.0).abs() < 1e-9);
        assert_eq!(region_mass_g(&v, &t, |_| false, &DensityConfig::default()).unwrap(), 0.0);
        let air = hu(&g, vec![-1000; 1_000_000]);
        assert_eq!(region_mass_g(&air, &t, |id| id != 0, &DensityConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn composition_of_all_fat_body() {
        let g = Grid::new([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let r = measure_composition(&hu(&g, vec![-100; 3]), &tissue_map(&g, vec![tissue::FAT; 3]), &DensityConfig::default()).unwrap();
        assert_eq!(r.fat_pct, 100.0);
        assert_eq!(r.muscle_pct, 0.0);
        assert_eq!(r.bone_density_hu, None);
        assert_eq!(r.body_volume_l, 3e-6);
    }

    #[test]
    fn bone_density_uses_raw_hu() {
        let g = Grid::new([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let r = measure_composition(
            &hu(&g, vec![-950, 700, 0]),
            &tissue_map(&g, vec![tissue::BONE, tissue::BONE, tissue::BODY]),
            &DensityConfig::default(),
        )
        .unwrap();
        assert_eq!(r.bone_density_hu, Some(-125.0));
    }

    #[test]
    fn empty_body_is_degenerate() {
        let g = Grid::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let err = measure_composition(&hu(&g, vec![0, 0]), &tissue_map(&g, vec![0, 0]), &DensityConfig::default());
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn calibration_cases() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let id = fit_linear_calibration(&x, &x).unwrap();
        assert!((id.slope - 1.0).abs() < 1e-12 && id.intercept.abs() < 1e-12 && (id.r2 - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 5.0).collect();
        let c = fit_linear_calibration(&x, &y).unwrap();
        assert!((c.slope - 2.0).abs() < 1e-12 && (c.intercept - 5.0).abs() < 1e-12 && (c.r2 - 1.0).abs() < 1e-12);
        let k = fit_linear_calibration(&x, &[3.0; 4]).unwrap();
        assert_eq!((k.slope, k.intercept, k.r2), (0.0, 3.0, 0.0));
        assert!(fit_linear_calibration(&[1.0; 4], &x).is_err());
        assert!(fit_linear_calibration(&x[..2], &x[..2]).is_err());
        assert_eq!(apply_calibration(&LinearCalibration { slope: 2.0, intercept: 5.0, r2: 1.0 }, 3.0).unwrap(), 11.0);
        assert_eq!(LinearCalibration::IDENTITY.apply(4.5).unwrap(), 4.5);
        assert!(apply_calibration(&LinearCalibration::IDENTITY, f64::NAN).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Vec<i16>, Vec<u16>)> {
        (prop::collection::vec(-1024i16..2000, 60), prop::collection::vec(0u16..5, 60))
    }

    proptest! {
        #[test]
        fn mass_is_additive((h, t) in arb_case()) {
            let g = Grid::new([5, 4, 3], [0.7, 1.1, 2.5], [0.0; 3]).unwrap();
            let (v, m) = (hu(&g, h), tissue_map(&g, t));
            let cfg = DensityConfig::default();
            let whole = region_mass_g(&v, &m, |id| id != 0, &cfg).unwrap();
            let parts: f64 = (1..5).map(|k| region_mass_g(&v, &m, |id| id == k, &cfg).unwrap()).sum();
            prop_assert!((whole - parts).abs() <= 1e-9 * whole.abs().max(1e-12));
        }

        #[test]
        fn mass_scales_with_cube_of_spacing((h, t) in arb_case(), s in 0.2f64..5.0) {
            let g = Grid::new([5, 4, 3], [0.7, 1.1, 2.5], [0.0; 3]).unwrap();
            let gs = g.scaled(s).unwrap();
            let cfg = DensityConfig::default();
            let m1 = region_mass_g(&hu(&g, h.clone()), &tissue_map(&g, t.clone()), |id| id != 0, &cfg).unwrap();
            let m2 = region_mass_g(&hu(&gs, h), &tissue_map(&gs, t), |id| id != 0, &cfg).unwrap();
            prop_assert!((m2 - m1 * s * s * s).abs() <= 1e-12 * m2.abs().max(1e-12));
        }

        #[test]
        fn density_is_affine(hu_v in -1024.0f64..3071.0, rho in -999.0f64..2000.0) {
            prop_assert!((hu_to_density(rho, rho).unwrap() - 1.0).abs() < 1e-12);
            let a = hu_to_density(hu_v, rho).unwrap();
            let b = hu_to_density(hu_v + 1.0, rho).unwrap();
            prop_assert!((b - a - 1.0 / (rho + 1000.0)).abs() < 1e-12);
        }

        #[test]
        fn air_adjustment_idempotent(h in prop::collection::vec(-1024i16..3071, 12)) {
            let g = Grid::new([12, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
            let cfg = DensityConfig::default();
            let once = adjust_air_hu(&hu(&g, h), &cfg).unwrap();
            prop_assert_eq!(adjust_air_hu(&once, &cfg).unwrap(), once);
        }

        #[test]
        fn percentages_bounded((h, t) in arb_case()) {
            let g = Grid::new([5, 4, 3], [1.0; 3], [0.0; 3]).unwrap();
            if let Ok(r) = measure_composition(&hu(&g, h), &tissue_map(&g, t), &DensityConfig::default()) {
                prop_assert!(r.fat_pct >= 0.0 && r.muscle_pct >= 0.0);
                prop_assert!(r.fat_pct + r.muscle_pct <= 100.0 + 1e-9);
                for m in r.per_tissue_mass_g.values() {
                    prop_assert!(*m <= r.body_mass_kg * 1000.0 + 1e-9);
                }
            }
        }
    }
}
