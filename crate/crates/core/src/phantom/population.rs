//! Attribute categories and the cohort population model.

use alloc::format;
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use super::PhantomSpec;
use crate::rng::{self, SplitMix64};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

/// Sex as a conditioning category, with an explicit "none".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SexCategory {
    M,
    F,
    #[serde(rename = "none")]
    Unknown,
}

impl From<Option<Sex>> for SexCategory {
    fn from(s: Option<Sex>) -> Self {
        match s {
            Some(Sex::M) => SexCategory::M,
            Some(Sex::F) => SexCategory::F,
            None => SexCategory::Unknown,
        }
    }
}

impl SexCategory {
    pub fn label(self) -> &'static str {
        match self {
            SexCategory::M => "M",
            SexCategory::F => "F",
            SexCategory::Unknown => "none",
        }
    }
}

/// Raw subject attributes; `None` marks an unavailable value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RawAttributes {
    pub sex: Option<Sex>,
    pub age_years: Option<f64>,
    pub height_cm: Option<f64>,
    pub weight_kg: Option<f64>,
}

/// A 10-unit bin `[lo, lo + 10)`, or the "none" category. Serialized as its
/// label, e.g. `"50-60"` or `"none"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Bin(Option<i64>);

pub const BIN_WIDTH: f64 = 10.0;

impl Bin {
    pub const NONE: Bin = Bin(None);

    pub fn of(value: Option<f64>) -> Bin {
        Bin(value.filter(|v| v.is_finite()).map(|v| libm::floor(v / BIN_WIDTH) as i64 * 10))
    }

    pub fn lower(self) -> Option<f64> {
        self.0.map(|lo| lo as f64)
    }

    pub fn midpoint(self) -> Option<f64> {
        self.lower().map(|lo| lo + BIN_WIDTH / 2.0)
    }

    pub fn is_none(self) -> bool {
        self.0.is_none()
    }

    pub fn label(self) -> String {
        match self.0 {
            Some(lo) => format!("{}-{}", lo, lo + 10),
            None => "none".to_string(),
        }
    }
}

impl From<Bin> for String {
    fn from(b: Bin) -> String {
        b.label()
    }
}

impl TryFrom<String> for Bin {
    type Error = Error;

    fn try_from(s: String) -> Result<Bin> {
        if s == "none" {
            return Ok(Bin::NONE);
        }
        let bad = || Error::arg(format!("bad bin label {s:?}"));
        let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
        let lo: i64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: i64 = hi.trim().parse().map_err(|_| bad())?;
        if hi != lo + 10 || lo % 10 != 0 {
            return Err(bad());
        }
        Ok(Bin(Some(lo)))
    }
}

/// Categorical attribute tuple used for conditioning and classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttributeBins {
    pub sex: SexCategory,
    pub age: Bin,
    pub height: Bin,
    pub weight: Bin,
}

/// Bins are half-open: 60.0 years falls in `"60-70"`.
pub fn bin_attributes(raw: &RawAttributes) -> AttributeBins {
    AttributeBins {
        sex: raw.sex.into(),
        age: Bin::of(raw.age_years),
        height: Bin::of(raw.height_cm),
        weight: Bin::of(raw.weight_kg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormal {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl TruncNormal {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.sd >= 0.0 && self.min <= self.max && self.mean.is_finite()) {
            return Err(Error::arg(format!("bad {what} distribution")));
        }
        Ok(())
    }

    fn contains(&self, v: f64) -> bool {
        (self.min..=self.max).contains(&v)
    }
}

fn default_female_prob() -> f64 {
    0.5
}
fn default_age() -> TruncNormal {
    TruncNormal { mean: 50.0, sd: 15.0, min: 20.0, max: 89.0 }
}
fn default_height_m() -> TruncNormal {
    TruncNormal { mean: 176.0, sd: 7.0, min: 145.0, max: 205.0 }
}
fn default_height_f() -> TruncNormal {
    TruncNormal { mean: 163.0, sd: 7.0, min: 145.0, max: 205.0 }
}
fn default_weight_m() -> TruncNormal {
    TruncNormal { mean: 82.0, sd: 13.0, min: 42.0, max: 140.0 }
}
fn default_weight_f() -> TruncNormal {
    TruncNormal { mean: 68.0, sd: 13.0, min: 42.0, max: 140.0 }
}
fn default_hw_corr() -> f64 {
    0.5
}

/// Mass fractions as a function of attributes plus Gaussian noise:
///
/// ```text
/// fat    = base + female + per_decade_year * (decade_mid - 50) + per_kg * (weight - 75) + noise
/// muscle = base - per_fat * (fat - 0.25) + noise
/// ```
///
/// Age enters through its decade midpoint so that two subjects in the same
/// attribute bins share the age effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionModel {
    pub fat_base: f64,
    pub fat_female: f64,
    pub fat_per_age_year: f64,
    pub fat_per_kg: f64,
    pub fat_noise: f64,
    pub fat_min: f64,
    pub fat_max: f64,
    pub muscle_base: f64,
    pub muscle_per_fat: f64,
    pub muscle_noise: f64,
    pub muscle_min: f64,
    /// Upper bound on fat + muscle.
    pub lean_cap: f64,
}

impl Default for CompositionModel {
    fn default() -> Self {
        Self {
            fat_base: 0.25,
            fat_female: 0.02,
            fat_per_age_year: 0.0015,
            fat_per_kg: 0.0045,
            fat_noise: 0.002,
            fat_min: 0.06,
            fat_max: 0.55,
            muscle_base: 0.40,
            muscle_per_fat: 0.6,
            muscle_noise: 0.002,
            muscle_min: 0.15,
            lean_cap: 0.85,
        }
    }
}

/// Sampler for subject attributes and body composition.
///
/// Age, height and weight are truncated normals; height and weight share a
/// standard-normal correlation `height_weight_corr`. A draw with any value
/// outside its bounds is rejected as a whole and retried.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    #[serde(default = "default_female_prob")]
    pub female_prob: f64,
    #[serde(default = "default_age")]
    pub age_years: TruncNormal,
    #[serde(default = "default_height_m")]
    pub height_cm_male: TruncNormal,
    #[serde(default = "default_height_f")]
    pub height_cm_female: TruncNormal,
    #[serde(default = "default_weight_m")]
    pub weight_kg_male: TruncNormal,
    #[serde(default = "default_weight_f")]
    pub weight_kg_female: TruncNormal,
    #[serde(default = "default_hw_corr")]
    pub height_weight_corr: f64,
    #[serde(default)]
    pub composition: CompositionModel,
}

impl Default for PopulationModel {
    fn default() -> Self {
        Self {
            female_prob: default_female_prob(),
            age_years: default_age(),
            height_cm_male: default_height_m(),
            height_cm_female: default_height_f(),
            weight_kg_male: default_weight_m(),
            weight_kg_female: default_weight_f(),
            height_weight_corr: default_hw_corr(),
            composition: CompositionModel::default(),
        }
    }
}

pub const MAX_DRAW_ATTEMPTS: usize = 100;

/// One sampled subject: attributes plus the composition its phantom realises.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectDraw {
    pub sex: Sex,
    pub age_years: f64,
    pub height_cm: f64,
    pub weight_kg: f64,
    pub fat_fraction: f64,
    pub muscle_fraction: f64,
}

impl SubjectDraw {
    pub fn attributes(&self) -> RawAttributes {
        RawAttributes {
            sex: Some(self.sex),
            age_years: Some(self.age_years),
            height_cm: Some(self.height_cm),
            weight_kg: Some(self.weight_kg),
        }
    }
}

/// Seed of subject `index` in a cohort seeded with `seed`.
pub fn subject_seed(seed: u64, index: u64) -> u64 {
    seed ^ rng::mix(index)
}

impl PopulationModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.female_prob) {
            return Err(Error::arg("female_prob must be in [0, 1]"));
        }
        if !(-1.0..=1.0).contains(&self.height_weight_corr) {
            return Err(Error::arg("height_weight_corr must be in [-1, 1]"));
        }
        self.age_years.validate("age")?;
        self.height_cm_male.validate("height")?;
        self.height_cm_female.validate("height")?;
        self.weight_kg_male.validate("weight")?;
        self.weight_kg_female.validate("weight")?;
        let c = &self.composition;
        if !(c.fat_min <= c.fat_max && c.fat_min >= 0.05 && c.fat_max <= 0.6 && c.muscle_min >= 0.0 && c.lean_cap <= 0.9) {
            return Err(Error::arg("composition bounds must satisfy 0.05 <= fat <= 0.6 and fat + muscle <= 0.9"));
        }
        if c.fat_max + c.muscle_min > c.lean_cap {
            return Err(Error::arg("composition bounds leave no room for muscle"));
        }
        Ok(())
    }

    fn height_dist(&self, sex: Sex) -> &TruncNormal {
        match sex {
            Sex::M => &self.height_cm_male,
            Sex::F => &self.height_cm_female,
        }
    }

    fn weight_dist(&self, sex: Sex) -> &TruncNormal {
        match sex {
            Sex::M => &self.weight_kg_male,
            Sex::F => &self.weight_kg_female,
        }
    }

    fn draw_sex(&self, rng: &mut SplitMix64) -> Sex {
        if rng.bernoulli(self.female_prob) {
            Sex::F
        } else {
            Sex::M
        }
    }

    /// Fat and muscle mass fractions for the given attributes.
    pub fn composition(&self, sex: Sex, age_years: f64, weight_kg: f64, rng: &mut SplitMix64) -> (f64, f64) {
        let c = &self.composition;
        let decade_mid = libm::floor(age_years / 10.0) * 10.0 + 5.0;
        let female = if sex == Sex::F { c.fat_female } else { 0.0 };
        let fat = (c.fat_base + female + c.fat_per_age_year * (decade_mid - 50.0) + c.fat_per_kg * (weight_kg - 75.0)
            + c.fat_noise * rng.normal())
        .clamp(c.fat_min, c.fat_max);
        let muscle = (c.muscle_base - c.muscle_per_fat * (fat - 0.25) + c.muscle_noise * rng.normal())
            .clamp(c.muscle_min, c.lean_cap - fat);
        (fat, muscle)
    }

    /// Draw attributes and composition from the full population.
    pub fn draw(&self, rng: &mut SplitMix64) -> Result<SubjectDraw> {
        self.draw_conditioned(&AttributeBins {
            sex: SexCategory::Unknown,
            age: Bin::NONE,
            height: Bin::NONE,
            weight: Bin::NONE,
        }, rng)
    }

    /// Draw a subject whose attributes fall in `bins`. Known bins are sampled
    /// uniformly; "none" categories fall back to the population model.
    pub fn draw_conditioned(&self, bins: &AttributeBins, rng: &mut SplitMix64) -> Result<SubjectDraw> {
        self.validate()?;
        let in_bin = |b: Bin, rng: &mut SplitMix64| b.lower().map(|lo| rng.uniform(lo, lo + BIN_WIDTH));
        for _ in 0..MAX_DRAW_ATTEMPTS {
            let sex = match bins.sex {
                SexCategory::M => Sex::M,
                SexCategory::F => Sex::F,
                SexCategory::Unknown => self.draw_sex(rng),
            };
            let age = in_bin(bins.age, rng).unwrap_or_else(|| {
                let d = &self.age_years;
                d.mean + d.sd * rng.normal()
            });
            let zh = rng.normal();
            let zw = self.height_weight_corr * zh + libm::sqrt(1.0 - self.height_weight_corr * self.height_weight_corr) * rng.normal();
            let (hd, wd) = (self.height_dist(sex), self.weight_dist(sex));
            let height = in_bin(bins.height, rng).unwrap_or(hd.mean + hd.sd * zh);
            let weight = in_bin(bins.weight, rng).unwrap_or(wd.mean + wd.sd * zw);
            let ok = (bins.age.is_some_bin() || self.age_years.contains(age))
                && (bins.height.is_some_bin() || hd.contains(height))
                && (bins.weight.is_some_bin() || wd.contains(weight));
            if !ok {
                continue;
            }
            let (fat, muscle) = self.composition(sex, age, weight, rng);
            return Ok(SubjectDraw {
                sex,
                age_years: age,
                height_cm: height,
                weight_kg: weight,
                fat_fraction: fat,
                muscle_fraction: muscle,
            });
        }
        Err(Error::Infeasible(format!("no attribute draw within bounds after {MAX_DRAW_ATTEMPTS} attempts")))
    }

    /// Phantom request for a drawn subject.
    pub fn spec(&self, draw: &SubjectDraw, spacing_mm: [f64; 3], seed: u64) -> PhantomSpec {
        PhantomSpec {
            height_mm: draw.height_cm * 10.0,
            weight_kg: draw.weight_kg,
            fat_fraction: draw.fat_fraction,
            muscle_fraction: draw.muscle_fraction,
            sex: draw.sex,
            age_years: draw.age_years,
            spacing_mm,
            seed,
            knee_bend_deg: 0.0,
        }
    }
}

impl Bin {
    fn is_some_bin(self) -> bool {
        self.0.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn caption_example() {
        let raw = RawAttributes {
            sex: Some(Sex::M),
            age_years: Some(55.0),
            height_cm: Some(175.0),
            weight_kg: Some(65.0),
        };
        let b = bin_attributes(&raw);
        assert_eq!(b.sex, SexCategory::M);
        assert_eq!(b.age.label(), "50-60");
        assert_eq!(b.height.label(), "170-180");
        assert_eq!(b.weight.label(), "60-70");
    }

    #[test]
    fn missing_and_boundary() {
        let raw = RawAttributes {
            sex: None,
            age_years: Some(60.0),
            height_cm: None,
            weight_kg: None,
        };
        let b = bin_attributes(&raw);
        assert_eq!(b.age.label(), "60-70");
        assert_eq!(b.weight.label(), "none");
        assert_eq!(b.sex.label(), "none");
        assert_eq!(Bin::of(Some(59.999)).label(), "50-60");
    }

    #[test]
    fn bin_serde_roundtrip() {
        let b = bin_attributes(&RawAttributes {
            sex: Some(Sex::F),
            age_years: Some(31.0),
            height_cm: None,
            weight_kg: Some(101.0),
        });
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"sex":"F","age":"30-40","height":"none","weight":"100-110"}"#);
        assert_eq!(serde_json::from_str::<AttributeBins>(&s).unwrap(), b);
        assert!(serde_json::from_str::<Bin>(r#""30-45""#).is_err());
    }

    #[test]
    fn draws_respect_bounds_and_bins() {
        let m = PopulationModel::default();
        let mut rng = SplitMix64::new(3);
        for _ in 0..500 {
            let d = m.draw(&mut rng).unwrap();
            assert!((20.0..=89.0).contains(&d.age_years));
            assert!((145.0..=205.0).contains(&d.height_cm));
            assert!((42.0..=140.0).contains(&d.weight_kg));
            assert!(d.fat_fraction + d.muscle_fraction <= 0.85 + 1e-12);
        }
        let bins = bin_attributes(&RawAttributes {
            sex: Some(Sex::F),
            age_years: Some(55.0),
            height_cm: Some(171.0),
            weight_kg: None,
        });
        for _ in 0..200 {
            let d = m.draw_conditioned(&bins, &mut rng).unwrap();
            assert_eq!(bin_attributes(&d.attributes()).age, bins.age);
            assert_eq!(bin_attributes(&d.attributes()).height, bins.height);
            assert_eq!(d.sex, Sex::F);
        }
    }

    #[test]
    fn height_weight_correlation_near_configured() {
        let m = PopulationModel::default();
        let mut rng = SplitMix64::new(11);
        let draws: Vec<SubjectDraw> = (0..4000).map(|_| m.draw(&mut rng).unwrap()).filter(|d| d.sex == Sex::M).collect();
        let h: Vec<f64> = draws.iter().map(|d| d.height_cm).collect();
        let w: Vec<f64> = draws.iter().map(|d| d.weight_kg).collect();
        let r = crate::stats::pearson(&h, &w).unwrap();
        assert!((r - 0.5).abs() < 0.06, "{r}");
    }

    #[test]
    fn impossible_bounds_fail_after_retries() {
        let mut m = PopulationModel::default();
        m.age_years = TruncNormal { mean: 50.0, sd: 1.0, min: 200.0, max: 201.0 };
        assert!(matches!(m.draw(&mut SplitMix64::new(1)), Err(Error::Infeasible(_))));
    }
}
