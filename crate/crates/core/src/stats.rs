//! Descriptive statistics, the two-sample Z-score, percentile bootstrap,
//! correlation and (weighted) MAE.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); `None` when n < 2.
    pub sd: Option<f64>,
}

pub fn mean(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Insufficient("mean of an empty sample".into()));
    }
    Ok(x.iter().sum::<f64>() / x.len() as f64)
}

/// Sample variance with the n - 1 denominator.
pub fn variance(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::Insufficient(format!("variance needs 2 values, got {}", x.len())));
    }
    let m = mean(x)?;
    Ok(x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64)
}

pub fn sample_stats(x: &[f64]) -> Result<SampleStats> {
    let mean = mean(x)?;
    let sd = variance(x).ok().map(libm::sqrt);
    Ok(SampleStats { n: x.len(), mean, sd })
}

/// Standard score of the difference in means:
/// `(mean(x) - mean(y)) / sqrt(var(x)/|x| + var(y)/|y|)`.
pub fn z_score(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Insufficient("z-score needs two values per sample".into()));
    }
    let diff = mean(x)? - mean(y)?;
    let se2 = variance(x)? / x.len() as f64 + variance(y)? / y.len() as f64;
    if se2 == 0.0 {
        return match diff.partial_cmp(&0.0) {
            Some(core::cmp::Ordering::Equal) => Ok(0.0),
            Some(core::cmp::Ordering::Greater) => Err(Error::InfiniteZ { sign: '+' }),
            _ => Err(Error::InfiniteZ { sign: '-' }),
        };
    }
    Ok(diff / libm::sqrt(se2))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Two-sided p-value `2 (1 - Phi(|z|))`, evaluated as `erfc(|z| / sqrt 2)` to
/// keep precision in the tail.
pub fn z_test_p(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::arg("z must be finite"));
    }
    Ok(libm::erfc(z.abs() / core::f64::consts::SQRT_2).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    /// Mean of absolute values (MAE of an error list).
    MeanAbs,
}

impl Statistic {
    fn eval_indexed(self, x: &[f64], idx: impl Iterator<Item = usize>) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for i in idx {
            s += match self {
                Statistic::Mean => x[i],
                Statistic::MeanAbs => x[i].abs(),
            };
            n += 1;
        }
        s / n as f64
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        self.eval_indexed(x, 0..x.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    /// Smallest interval containing both `self` and `v`.
    pub fn including(self, v: f64) -> Interval {
        Interval {
            lo: self.lo.min(v),
            hi: self.hi.max(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_boot: 10_000,
            level: 0.95,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_boot == 0 {
            return Err(Error::arg("n_boot must be at least 1"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::arg(format!("confidence level must be in (0, 1), got {}", self.level)));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Linear-interpolation quantile of sorted data (the "linear" method of most
/// statistics packages).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

/// Percentile interval of replicate statistics at confidence `level`.
pub fn percentile_interval(mut replicates: Vec<f64>, level: f64) -> Interval {
    replicates.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Interval {
        lo: quantile_sorted(&replicates, a),
        hi: quantile_sorted(&replicates, 1.0 - a),
    }
}

/// Percentile bootstrap driven by a replicate function. Replicate `b` gets its
/// own stream `SplitMix64::stream(seed, b)`, so results do not depend on the
/// order in which replicates are evaluated.
pub fn bootstrap_with(cfg: &BootstrapConfig, mut replicate: impl FnMut(&mut SplitMix64) -> f64) -> Result<Interval> {
    cfg.validate()?;
    let reps = (0..cfg.n_boot as u64)
        .map(|b| replicate(&mut SplitMix64::stream(cfg.seed, b)))
        .collect();
    Ok(percentile_interval(reps, cfg.level))
}

pub fn bootstrap_ci(samples: &[f64], statistic: Statistic, cfg: &BootstrapConfig) -> Result<Interval> {
    if samples.is_empty() {
        return Err(Error::Insufficient("bootstrap of an empty sample".into()));
    }
    let n = samples.len();
    bootstrap_with(cfg, |rng| {
        statistic.eval_indexed(samples, (0..n).map(|_| rng.below(n)))
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::Insufficient(format!("correlation needs 3 pairs, got {}", x.len())));
    }
    let mx = mean(x)?;
    let my = mean(y)?;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::degenerate("correlation of a constant sample"));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

pub fn mae(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Insufficient("MAE of an empty sample".into()));
    }
    Ok(Statistic::MeanAbs.eval(errors))
}

/// `sum(w |e|) / sum(w)`.
pub fn weighted_mae(errors: &[f64], weights: &[f64]) -> Result<f64> {
    if errors.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: errors.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::arg("weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::degenerate("all weights are zero"));
    }
    let num: f64 = errors.iter().zip(weights).map(|(e, w)| w * e.abs()).sum();
    Ok(num / total)
}

/// Largest OOD probability used in the likelihood ratio.
pub const P_OOD_CLIP: f64 = 1.0 - 1e-6;

/// Importance weights `p/(1-p) * prior_id/prior_ood` with `p` clipped to
/// [`P_OOD_CLIP`].
pub fn importance_weights(p_ood: &[f64], prior_id: f64, prior_ood: f64) -> Result<Vec<f64>> {
    if !(prior_id > 0.0 && prior_ood > 0.0) || (prior_id + prior_ood - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!(
            "priors must be positive and sum to 1, got {prior_id} and {prior_ood}"
        )));
    }
    let ratio = prior_id / prior_ood;
    p_ood
        .iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::arg(format!("p_ood must lie in [0, 1], got {p}")));
            }
            let p = p.min(P_OOD_CLIP);
            Ok(p / (1.0 - p) * ratio)
        })
        .collect()
}

/// Two-sided p-value for equality of two Pearson correlations from
/// independent samples, via Fisher's z-transform.
pub fn fisher_z_p(r1: f64, n1: usize, r2: f64, n2: usize) -> Result<f64> {
    if n1 < 4 || n2 < 4 {
        return Err(Error::Insufficient("Fisher z needs at least 4 pairs per sample".into()));
    }
    if !(r1.abs() <= 1.0 && r2.abs() <= 1.0) {
        return Err(Error::arg("correlations must lie in [-1, 1]"));
    }
    const EDGE: f64 = 1.0 - 1e-12;
    let z1 = libm::atanh(r1.clamp(-EDGE, EDGE));
    let z2 = libm::atanh(r2.clamp(-EDGE, EDGE));
    let se = libm::sqrt(1.0 / (n1 - 3) as f64 + 1.0 / (n2 - 3) as f64);
    z_test_p((z1 - z2) / se)
}

/// Pearson correlation between matched quantiles of two unpaired samples,
/// using `min(|a|, |b|)` evenly spaced quantile levels from 0 to 1.
pub fn qq_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = a.len().min(b.len());
    if m < 3 {
        return Err(Error::Insufficient(format!("Q-Q correlation needs 3 values per cohort, got {m}")));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let levels = (0..m).map(|k| k as f64 / (m - 1) as f64);
    let (qa, qb): (Vec<f64>, Vec<f64>) = levels
        .map(|q| (quantile_sorted(&sa, q), quantile_sorted(&sb, q)))
        .unzip();
    pearson(&qa, &qb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn z_hand_case() {
        let z = z_score(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((z - (-3.0 / libm::sqrt(2.0 / 3.0))).abs() < 1e-12);
        assert!((z + 3.674_234_614_174_767).abs() < 1e-12);
    }

    #[test]
    fn z_degenerate() {
        assert_eq!(z_score(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(z_score(&[3.0, 3.0], &[2.0, 2.0]), Err(Error::InfiniteZ { sign: '+' }));
        assert_eq!(z_score(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::InfiniteZ { sign: '-' }));
        assert!(z_score(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn p_values() {
        assert_eq!(z_test_p(0.0).unwrap(), 1.0);
        assert!((z_test_p(1.959_964).unwrap() - 0.05).abs() < 1e-6);
        assert!((z_test_p(3.0).unwrap() - 0.002_699_796_063_260_2).abs() < 1e-12);
        assert!((z_test_p(-3.0).unwrap() - z_test_p(3.0).unwrap()).abs() == 0.0);
        assert!(z_test_p(f64::INFINITY).is_err());
    }

    #[test]
    fn normal_cdf_table() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((normal_cdf(-1.644_853_626_951_472_2) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 7.0).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 4]).is_err());
    }

    #[test]
    fn mae_cases() {
        assert!((mae(&[1.0, -1.0, 2.0]).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!((weighted_mae(&[1.0, -1.0, 2.0], &[3.0; 3]).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(weighted_mae(&[1.0, -5.0, 2.0], &[0.0, 1.0, 0.0]).unwrap(), 5.0);
        assert!(weighted_mae(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn importance_weight_cases() {
        assert_eq!(importance_weights(&[0.5, 0.75, 0.0], 0.5, 0.5).unwrap(), vec![1.0, 3.0, 0.0]);
        let w = importance_weights(&[1.0], 0.5, 0.5).unwrap()[0];
        assert!((w - P_OOD_CLIP / (1.0 - P_OOD_CLIP)).abs() < 1e-3);
        assert!(importance_weights(&[0.5], 0.6, 0.6).is_err());
        assert!(importance_weights(&[0.5], 0.0, 1.0).is_err());
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let cfg = BootstrapConfig { n_boot: 500, level: 0.95, seed: 9 };
        let c = bootstrap_ci(&[4.0; 10], Statistic::Mean, &cfg).unwrap();
        assert_eq!((c.lo, c.hi), (4.0, 4.0));
        let x: Vec<f64> = (0..30).map(|i| f64::from(i) * 0.37 - 4.0).collect();
        let a = bootstrap_ci(&x, Statistic::MeanAbs, &cfg).unwrap();
        let b = bootstrap_ci(&x, Statistic::MeanAbs, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap_ci(&[], Statistic::Mean, &cfg).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 10.0, 20.0];
        assert_eq!(quantile_sorted(&s, 0.25), 5.0);
        assert_eq!(quantile_sorted(&s, 1.0), 20.0);
    }

    #[test]
    fn fisher_equal_correlations() {
        assert_eq!(fisher_z_p(0.4, 50, 0.4, 80).unwrap(), 1.0);
        assert!(fisher_z_p(0.9, 200, 0.1, 200).unwrap() < 1e-6);
    }

    #[test]
    fn qq_self_and_scaled() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        assert!((qq_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert!((qq_correlation(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_usually_contains_plugin_mean() {
        let mut rng = SplitMix64::new(77);
        let trials = 300;
        let mut inside = 0;
        for t in 0..trials {
            let n = 20 + rng.below(40);
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-10.0, 10.0)).collect();
            let cfg = BootstrapConfig { n_boot: 1000, level: 0.95, seed: t };
            let ci = bootstrap_ci(&x, Statistic::Mean, &cfg).unwrap();
            assert!(ci.lo <= ci.hi);
            inside += usize::from(ci.contains(mean(&x).unwrap()));
        }
        assert!(inside as f64 >= 0.99 * trials as f64);
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 2..40)
    }

    proptest! {
        #[test]
        fn z_self_is_zero(x in sample()) {
            prop_assert_eq!(z_score(&x, &x).unwrap_or(0.0), 0.0);
        }

        #[test]
        fn z_antisymmetric_and_shift_invariant(x in sample(), y in sample(), c in -50.0f64..50.0) {
            if let Ok(z) = z_score(&x, &y) {
                prop_assert!((z + z_score(&y, &x).unwrap()).abs() < 1e-12 * z.abs().max(1.0));
                let xs: Vec<f64> = x.iter().map(|v| v + c).collect();
                let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
                prop_assert!((z - z_score(&xs, &ys).unwrap()).abs() < 1e-6 * z.abs().max(1.0));
            }
        }

        #[test]
        fn weights_at_prior_leave_mae_unchanged(e in prop::collection::vec(-5.0f64..5.0, 1..50), prior_ood in 0.05f64..0.95) {
            let p = vec![prior_ood; e.len()];
            let w = importance_weights(&p, 1.0 - prior_ood, prior_ood).unwrap();
            prop_assert!((weighted_mae(&e, &w).unwrap() - mae(&e).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn qq_affine_invariant(a in prop::collection::vec(-10.0f64..10.0, 3..40), b in prop::collection::vec(-10.0f64..10.0, 3..40), s in 0.1f64..10.0, t in -10.0f64..10.0) {
            if let Ok(r) = qq_correlation(&a, &b) {
                let a2: Vec<f64> = a.iter().map(|v| s * v + t).collect();
                prop_assert!((qq_correlation(&a2, &b).unwrap() - r).abs() < 1e-9);
            }
        }
    }
}
