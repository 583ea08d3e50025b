//! Anatomical consistency: Dice overlap, organ volumes and organ centroids in
//! body-relative coordinates, compared within pairs or across cohorts.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::Vec3;
use crate::stats;
use crate::volume::{voxel_volume_mm3, LabelMap, Mask};
use crate::{Error, Result};

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks agree perfectly (1.0).
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    Ok(dice_from_counts(a.count(), b.count(), inter))
}

pub fn dice_from_counts(na: usize, nb: usize, inter: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Dice for every class present in either map.
pub fn per_class_dice(a: &LabelMap, b: &LabelMap) -> Result<BTreeMap<u16, f64>> {
    if !a.grid().same_as(b.grid()) {
        return Err(Error::GridMismatch);
    }
    let mut na = alloc::vec![0usize; 1 << 16];
    let mut nb = alloc::vec![0usize; 1 << 16];
    let mut both = alloc::vec![0usize; 1 << 16];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na[x as usize] += 1;
        nb[y as usize] += 1;
        if x == y {
            both[x as usize] += 1;
        }
    }
    Ok((1..=u16::MAX)
        .filter(|&id| na[id as usize] + nb[id as usize] > 0)
        .map(|id| {
            let i = id as usize;
            (id, dice_from_counts(na[i], nb[i], both[i]))
        })
        .collect())
}

/// Class centroids expressed in the body's axis-aligned bounding box, each
/// axis mapped to [0, 1] (0 at the minimum voxel centre). A flat axis maps
/// to 0.5.
pub fn relative_centroids(structures: &LabelMap, body: &LabelMap) -> Result<BTreeMap<u16, Vec3>> {
    Ok(measure_anatomy(structures, body)?.centroids)
}

/// Per-subject organ volumes (mL) and relative centroids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubjectAnatomy {
    pub volumes_ml: BTreeMap<u16, f64>,
    pub centroids: BTreeMap<u16, Vec3>,
}

pub fn measure_anatomy(structures: &LabelMap, body: &LabelMap) -> Result<SubjectAnatomy> {
    let grid = structures.grid();
    if !grid.same_as(body.grid()) {
        return Err(Error::GridMismatch);
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in body.data().iter().enumerate() {
        if v != 0 {
            any = true;
            let c = grid.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return Err(Error::degenerate("empty body mask"));
    }
    let mut sums: BTreeMap<u16, ([f64; 3], usize)> = BTreeMap::new();
    for (i, &v) in structures.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let c = grid.coords(i);
        let e = sums.entry(v).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            e.0[a] += c[a] as f64;
        }
        e.1 += 1;
    }
    let vv = voxel_volume_mm3(grid);
    let mut out = SubjectAnatomy::default();
    for (id, (s, n)) in sums {
        let mut rel = [0.5; 3];
        for a in 0..3 {
            if hi[a] > lo[a] {
                // Index space: spacing and origin cancel in the ratio.
                rel[a] = (s[a] / n as f64 - lo[a] as f64) / (hi[a] - lo[a]) as f64;
            }
        }
        out.volumes_ml.insert(id, n as f64 * vv / 1000.0);
        out.centroids.insert(id, rel);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassConsistency {
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
    pub volume_corr: Option<f64>,
    pub centroid_r: Option<f64>,
    pub centroid_a: Option<f64>,
    pub centroid_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencyTable {
    pub per_class: BTreeMap<u16, ClassConsistency>,
    pub average: ClassConsistency,
}

fn defined_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Minimum number of subjects per cohort for a class to be reported.
pub const MIN_CLASS_SAMPLES: usize = 3;

/// Compare two cohorts class by class. Volumes and centroid coordinates are
/// compared by Q–Q correlation because the cohorts are unpaired. `pair_dice`
/// optionally carries per-pair Dice values per class (paired mode).
pub fn cohort_consistency(
    real: &[SubjectAnatomy],
    synth: &[SubjectAnatomy],
    pair_dice: Option<&[BTreeMap<u16, f64>]>,
) -> Result<ConsistencyTable> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Insufficient("both cohorts must be nonempty".into()));
    }
    let mut ids: Vec<u16> = real
        .iter()
        .chain(synth)
        .flat_map(|s| s.volumes_ml.keys().copied())
        .collect();
    ids.sort_unstable();
    ids.dedup();

    let mut table = ConsistencyTable::default();
    for id in ids {
        let vols = |c: &[SubjectAnatomy]| -> Vec<f64> { c.iter().filter_map(|s| s.volumes_ml.get(&id).copied()).collect() };
        let axis = |c: &[SubjectAnatomy], a: usize| -> Vec<f64> { c.iter().filter_map(|s| s.centroids.get(&id).map(|v| v[a])).collect() };
        let (vr, vs) = (vols(real), vols(synth));
        if vr.len() < MIN_CLASS_SAMPLES || vs.len() < MIN_CLASS_SAMPLES {
            log::warn!("class {id} has fewer than {MIN_CLASS_SAMPLES} subjects in a cohort; omitted");
            continue;
        }
        let corr = |a: &[f64], b: &[f64]| stats::qq_correlation(a, b).ok();
        let dice_vals: Vec<f64> = pair_dice
            .map(|p| p.iter().filter_map(|m| m.get(&id).copied()).collect())
            .unwrap_or_default();
        table.per_class.insert(
            id,
            ClassConsistency {
                dice_mean: stats::mean(&dice_vals).ok(),
                dice_std: stats::variance(&dice_vals).ok().map(libm::sqrt),
                volume_corr: corr(&vr, &vs),
                centroid_r: corr(&axis(real, 0), &axis(synth, 0)),
                centroid_a: corr(&axis(real, 1), &axis(synth, 1)),
                centroid_s: corr(&axis(real, 2), &axis(synth, 2)),
            },
        );
    }
    let rows = || table.per_class.values();
    table.average = ClassConsistency {
        dice_mean: defined_mean(rows().map(|c| c.dice_mean)),
        dice_std: defined_mean(rows().map(|c| c.dice_std)),
        volume_corr: defined_mean(rows().map(|c| c.volume_corr)),
        centroid_r: defined_mean(rows().map(|c| c.centroid_r)),
        centroid_a: defined_mean(rows().map(|c| c.centroid_a)),
        centroid_s: defined_mean(rows().map(|c| c.centroid_s)),
    };
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{default_class_table, Grid, LabelKind};
    use alloc::vec;
    use proptest::prelude::*;

    fn mask(bits: Vec<bool>) -> Mask {
        let g = Grid::new([bits.len(), 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        Mask::new(g, bits).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask((0..200).map(|i| i < 100).collect());
        let b = mask((0..200).map(|i| (50..150).contains(&i)).collect());
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = mask((0..200).map(|i| i >= 100).collect());
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let e = mask(vec![false; 200]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
        assert!(dice(&a, &mask(vec![true; 3])).is_err());
    }

    #[test]
    fn class_only_in_one_map_scores_zero() {
        let g = Grid::new([4, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let t = default_class_table(LabelKind::Structure);
        let a = LabelMap::new(g.clone(), LabelKind::Structure, vec![1, 1, 2, 0], t.clone()).unwrap();
        let b = LabelMap::new(g, LabelKind::Structure, vec![1, 1, 0, 0], t).unwrap();
        let d = per_class_dice(&a, &b).unwrap();
        assert_eq!(d[&1], 1.0);
        assert_eq!(d[&2], 0.0);
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn centred_class_is_half() {
        let g = Grid::new([5, 5, 5], [1.0; 3], [3.0, -2.0, 7.0]).unwrap();
        let t = default_class_table(LabelKind::Structure);
        let mut s = vec![0u16; 125];
        s[g.index(2, 2, 2)] = 4;
        let body = LabelMap::new(g.clone(), LabelKind::Structure, vec![1; 125], t.clone()).unwrap();
        let st = LabelMap::new(g, LabelKind::Structure, s, t).unwrap();
        assert_eq!(relative_centroids(&st, &body).unwrap()[&4], [0.5, 0.5, 0.5]);
    }

    fn cohort(seed: u64, n: usize, scale: f64) -> Vec<SubjectAnatomy> {
        let mut rng = crate::rng::SplitMix64::new(seed);
        (0..n)
            .map(|_| {
                let mut s = SubjectAnatomy::default();
                for id in 1..4u16 {
                    s.volumes_ml.insert(id, scale * rng.uniform(10.0, 100.0));
                    s.centroids.insert(id, [rng.next_f64(), rng.next_f64(), rng.next_f64()]);
                }
                s
            })
            .collect()
    }

    #[test]
    fn self_comparison_is_perfect() {
        let c = cohort(3, 20, 1.0);
        let t = cohort_consistency(&c, &c, None).unwrap();
        for row in t.per_class.values().chain([&t.average]) {
            for v in [row.volume_corr, row.centroid_r, row.centroid_a, row.centroid_s] {
                assert!((v.unwrap() - 1.0).abs() < 1e-12);
            }
            assert_eq!(row.dice_mean, None);
        }
    }

    #[test]
    fn sparse_class_is_omitted() {
        let mut a = cohort(1, 5, 1.0);
        for s in a.iter_mut().skip(2) {
            s.volumes_ml.remove(&2);
            s.centroids.remove(&2);
        }
        let t = cohort_consistency(&a, &cohort(2, 5, 1.0), None).unwrap();
        assert!(!t.per_class.contains_key(&2));
        assert!(t.per_class.contains_key(&1));
    }

    #[test]
    fn independent_cohorts_rarely_correlate() {
        let mut small = 0;
        for seed in 0..40 {
            let a: Vec<f64> = cohort(seed * 2, 200, 1.0).iter().map(|s| s.volumes_ml[&1]).collect();
            let b: Vec<f64> = cohort(seed * 2 + 1, 200, 1.0).iter().map(|s| s.volumes_ml[&1]).collect();
            // Raw pairing of independent draws, not quantiles.
            small += usize::from(stats::pearson(&a, &b).unwrap().abs() < 0.3);
        }
        assert!(small >= 38);
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 30), b in prop::collection::vec(any::<bool>(), 30)) {
            let (ma, mb) = (mask(a.clone()), mask(b));
            let d = dice(&ma, &mb).unwrap();
            prop_assert_eq!(d, dice(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            if a.iter().any(|&x| x) {
                prop_assert_eq!(dice(&ma, &ma).unwrap(), 1.0);
            }
        }

        #[test]
        fn removing_overlap_never_helps(a in prop::collection::vec(any::<bool>(), 30), b in prop::collection::vec(any::<bool>(), 30), k in 0usize..30) {
            let d0 = dice(&mask(a.clone()), &mask(b.clone())).unwrap();
            let mut a2 = a.clone();
            if a[k] && b[k] {
                a2[k] = false;
            }
            prop_assert!(dice(&mask(a2), &mask(b)).unwrap() <= d0 + 1e-15);
        }

        #[test]
        fn relative_centroids_translation_and_scale_invariant(
            voxels in prop::collection::vec((prop::array::uniform3(0usize..6), 1u16..4), 1..20),
            shift in prop::array::uniform3(-50.0f64..50.0),
            s in 0.5f64..3.0,
        ) {
            let g = Grid::new([6, 6, 6], [1.0, 1.5, 2.0], [0.0; 3]).unwrap();
            let t = default_class_table(LabelKind::Structure);
            let mut d = vec![0u16; g.len()];
            for (c, id) in &voxels {
                d[g.index(c[0], c[1], c[2])] = *id;
            }
            let body: Vec<u16> = d.iter().map(|&v| u16::from(v != 0)).collect();
            let base = relative_centroids(
                &LabelMap::new(g.clone(), LabelKind::Structure, d.clone(), t.clone()).unwrap(),
                &LabelMap::new(g.clone(), LabelKind::Structure, body.clone(), t.clone()).unwrap(),
            ).unwrap();
            let g2 = g.scaled(s).unwrap().with_origin(shift).unwrap();
            let moved = relative_centroids(
                &LabelMap::new(g2.clone(), LabelKind::Structure, d, t.clone()).unwrap(),
                &LabelMap::new(g2, LabelKind::Structure, body, t).unwrap(),
            ).unwrap();
            prop_assert_eq!(base, moved);
        }
    }
}
