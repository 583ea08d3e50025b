//! Sliding-window patch planning, blended reassembly, and the multi-window
//! L1 reconstruction loss.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::volume::{Grid, Unit, Volume, VolumeData};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    /// Corners in z-major, x-fastest order.
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + patch <= dim).collect();
    let last = dim - patch;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Patch corners covering `dims` with the given overlap. Stride per axis is
/// `max(1, round(patch * (1 - overlap)))`; the last patch on each axis is
/// moved back to end on the boundary.
pub fn plan_patches(dims: [usize; 3], patch_size: [usize; 3], overlap_fraction: f64) -> Result<PatchGrid> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::arg(format!("overlap must lie in [0, 1), got {overlap_fraction}")));
    }
    let mut stride = [0usize; 3];
    let mut per_axis: [Vec<usize>; 3] = Default::default();
    for a in 0..3 {
        if patch_size[a] == 0 || patch_size[a] > dims[a] {
            return Err(Error::arg(format!(
                "patch size {} does not fit axis {a} of length {}",
                patch_size[a], dims[a]
            )));
        }
        stride[a] = (libm::round(patch_size[a] as f64 * (1.0 - overlap_fraction)) as usize).clamp(1, patch_size[a]);
        per_axis[a] = axis_origins(dims[a], patch_size[a], stride[a]);
    }
    let mut origins = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        stride,
        origins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    Uniform,
    /// Separable triangular weights peaking at the patch centre.
    CenterWeighted,
}

/// Smallest center-weighted blend weight.
pub const BLEND_FLOOR: f64 = 1e-3;

fn axis_weights(n: usize, blend: Blend) -> Vec<f64> {
    match blend {
        Blend::Uniform => alloc::vec![1.0; n],
        Blend::CenterWeighted => {
            let c = (n as f64 - 1.0) / 2.0;
            (0..n)
                .map(|i| (1.0 - (i as f64 - c).abs() / (c + 1.0)).max(BLEND_FLOOR))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub size: [usize; 3],
    /// x-fastest values of the patch.
    pub data: Vec<f32>,
}

/// Cut the planned patches out of a flat x-fastest array.
pub fn cut_patches(data: &[f32], dims: [usize; 3], plan: &PatchGrid) -> Result<Vec<Patch>> {
    if data.len() != dims[0] * dims[1] * dims[2] {
        return Err(Error::LengthMismatch {
            expected: dims[0] * dims[1] * dims[2],
            actual: data.len(),
        });
    }
    let p = plan.patch_size;
    Ok(plan
        .origins
        .iter()
        .map(|&o| {
            let mut v = Vec::with_capacity(p[0] * p[1] * p[2]);
            for z in 0..p[2] {
                for y in 0..p[1] {
                    let row = (o[0]) + dims[0] * ((o[1] + y) + dims[1] * (o[2] + z));
                    v.extend_from_slice(&data[row..row + p[0]]);
                }
            }
            Patch {
                origin: o,
                size: p,
                data: v,
            }
        })
        .collect())
}

fn check_patch(p: &Patch, dims: [usize; 3]) -> Result<()> {
    if p.data.len() != p.size[0] * p.size[1] * p.size[2] {
        return Err(Error::LengthMismatch {
            expected: p.size[0] * p.size[1] * p.size[2],
            actual: p.data.len(),
        });
    }
    if (0..3).any(|a| p.size[a] == 0 || p.origin[a] + p.size[a] > dims[a]) {
        return Err(Error::arg(format!("patch at {:?} size {:?} leaves the volume", p.origin, p.size)));
    }
    Ok(())
}

/// Visit every voxel of every patch in fixed order with its blend weight.
fn for_each_weighted(patches: &[Patch], dims: [usize; 3], blend: Blend, mut f: impl FnMut(usize, f64, f32)) -> Result<()> {
    for p in patches {
        check_patch(p, dims)?;
        let w = [axis_weights(p.size[0], blend), axis_weights(p.size[1], blend), axis_weights(p.size[2], blend)];
        let mut k = 0;
        for z in 0..p.size[2] {
            for y in 0..p.size[1] {
                let wzy = w[2][z] * w[1][y];
                let row = p.origin[0] + dims[0] * ((p.origin[1] + y) + dims[1] * (p.origin[2] + z));
                for x in 0..p.size[0] {
                    f(row + x, wzy * w[0][x], p.data[k]);
                    k += 1;
                }
            }
        }
    }
    Ok(())
}

/// Total blend weight each voxel receives from `patches`.
pub fn blend_weight_totals(patches: &[Patch], dims: [usize; 3], blend: Blend) -> Result<Vec<f64>> {
    let mut wsum = alloc::vec![0.0f64; dims[0] * dims[1] * dims[2]];
    for_each_weighted(patches, dims, blend, |i, w, _| wsum[i] += w)?;
    Ok(wsum)
}

/// Weight-normalised average of overlapping patches, accumulated in `f64`
/// in patch order and normalised once.
pub fn aggregate(patches: &[Patch], grid: &Grid, blend: Blend) -> Result<Volume> {
    let dims = grid.dims();
    let n = grid.len();
    let mut sum = alloc::vec![0.0f64; n];
    let mut wsum = alloc::vec![0.0f64; n];
    for_each_weighted(patches, dims, blend, |i, w, v| {
        sum[i] += w * f64::from(v);
        wsum[i] += w;
    })?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if wsum[i] == 0.0 {
            return Err(Error::arg(format!("voxel {:?} is not covered by any patch", grid.coords(i))));
        }
        out.push((sum[i] / wsum[i]) as f32);
    }
    Volume::new(grid.clone(), VolumeData::F32(out), Unit::Hu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowLossConfig {
    /// Half-open HU range `[min, max)`.
    pub soft_range_hu: [f64; 2],
    pub hard_range_hu: [f64; 2],
    pub lambda_soft: f64,
    pub lambda_hard: f64,
    pub lambda_other: f64,
}

impl Default for WindowLossConfig {
    fn default() -> Self {
        Self {
            soft_range_hu: [-150.0, 250.0],
            hard_range_hu: [250.0, 3000.0],
            lambda_soft: 1.0,
            lambda_hard: 0.5,
            lambda_other: 0.1,
        }
    }
}

impl WindowLossConfig {
    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.soft_range_hu;
        let [h0, h1] = self.hard_range_hu;
        if !(s0 < s1 && h0 < h1) {
            return Err(Error::arg("window ranges must have min < max"));
        }
        if s0 < h1 && h0 < s1 {
            return Err(Error::arg("soft and hard windows overlap"));
        }
        let l = [self.lambda_soft, self.lambda_hard, self.lambda_other];
        if l.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || l.iter().all(|&v| v == 0.0) {
            return Err(Error::arg("lambdas must be nonnegative, finite and not all zero"));
        }
        Ok(())
    }

    #[inline]
    pub fn lambda(&self, hu: f64) -> f64 {
        let within = |r: [f64; 2]| r[0] <= hu && hu < r[1];
        if within(self.soft_range_hu) {
            self.lambda_soft
        } else if within(self.hard_range_hu) {
            self.lambda_hard
        } else {
            self.lambda_other
        }
    }
}

/// Mean over voxels of `lambda(x) |x - xhat|`, the window picked by the
/// reference voxel `x`.
pub fn multi_window_l1(x: &Volume, xhat: &Volume, cfg: &WindowLossConfig) -> Result<f64> {
    cfg.validate()?;
    if !x.grid().same_as(xhat.grid()) {
        return Err(Error::GridMismatch);
    }
    let n = x.grid().len();
    let mut s = 0.0;
    for i in 0..n {
        let r = x.get(i);
        s += cfg.lambda(r) * (r - xhat.get(i)).abs();
    }
    Ok(s / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn single_patch_plan() {
        let p = plan_patches([128; 3], [128; 3], 0.0).unwrap();
        assert_eq!(p.origins, vec![[0, 0, 0]]);
    }

    #[test]
    fn half_overlap_origins() {
        let p = plan_patches([10, 10, 10], [4, 4, 4], 0.5).unwrap();
        assert_eq!(p.stride, [2, 2, 2]);
        let xs: Vec<usize> = p.origins.iter().filter(|o| o[1] == 0 && o[2] == 0).map(|o| o[0]).collect();
        assert_eq!(xs, vec![0, 2, 4, 6]);
        let p = plan_patches([11, 4, 4], [4, 4, 4], 0.5).unwrap();
        let xs: Vec<usize> = p.origins.iter().filter(|o| o[1] == 0 && o[2] == 0).map(|o| o[0]).collect();
        assert_eq!(xs, vec![0, 2, 4, 6, 7]);
    }

    #[test]
    fn plan_rejects_oversized_patch() {
        assert!(plan_patches([4, 4, 4], [5, 4, 4], 0.0).is_err());
        assert!(plan_patches([4, 4, 4], [4, 4, 4], 1.0).is_err());
    }

    #[test]
    fn constant_and_identity() {
        let g = Grid::new([6, 5, 4], [1.0; 3], [0.0; 3]).unwrap();
        let plan = plan_patches(g.dims(), [3, 3, 2], 0.4).unwrap();
        let ps = cut_patches(&[7.0; 120], g.dims(), &plan).unwrap();
        for blend in [Blend::Uniform, Blend::CenterWeighted] {
            let v = aggregate(&ps, &g, blend).unwrap();
            assert_eq!(v.data(), &VolumeData::F32(vec![7.0; 120]));
        }
        let full = Patch { origin: [0; 3], size: [6, 5, 4], data: (0..120).map(|i| i as f32 * 0.1).collect() };
        let v = aggregate(core::slice::from_ref(&full), &g, Blend::CenterWeighted).unwrap();
        assert_eq!(v.data(), &VolumeData::F32(full.data.clone()));
    }

    #[test]
    fn half_overlap_average() {
        let g = Grid::new([6, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let a = Patch { origin: [0, 0, 0], size: [4, 1, 1], data: vec![0.0; 4] };
        let b = Patch { origin: [2, 0, 0], size: [4, 1, 1], data: vec![1.0; 4] };
        let v = aggregate(&[a, b], &g, Blend::Uniform).unwrap();
        assert_eq!(v.data(), &VolumeData::F32(vec![0.0, 0.0, 0.5, 0.5, 1.0, 1.0]));
    }

    #[test]
    fn uncovered_and_out_of_bounds() {
        let g = Grid::new([6, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let a = Patch { origin: [0, 0, 0], size: [4, 1, 1], data: vec![0.0; 4] };
        assert!(aggregate(core::slice::from_ref(&a), &g, Blend::Uniform).is_err());
        let b = Patch { origin: [3, 0, 0], size: [4, 1, 1], data: vec![0.0; 4] };
        assert!(aggregate(&[a, b], &g, Blend::Uniform).is_err());
    }

    #[test]
    fn window_loss_hand_cases() {
        let g = Grid::new([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let one = |v: f32| Volume::new(g.clone(), VolumeData::F32(vec![v]), Unit::Hu).unwrap();
        let cfg = WindowLossConfig::default();
        assert_eq!(multi_window_l1(&one(100.0), &one(90.0), &cfg).unwrap(), 10.0);
        assert_eq!(multi_window_l1(&one(1000.0), &one(0.0), &cfg).unwrap(), 500.0);
        assert_eq!(multi_window_l1(&one(-500.0), &one(-400.0), &cfg).unwrap(), 10.0);
        assert_eq!(multi_window_l1(&one(3.0), &one(3.0), &cfg).unwrap(), 0.0);
        let bad = WindowLossConfig { hard_range_hu: [200.0, 3000.0], ..cfg };
        assert!(bad.validate().is_err());
    }

    fn arb_plan() -> impl Strategy<Value = ([usize; 3], [usize; 3], f64, u64)> {
        (prop::array::uniform3(1usize..12), 0.0f64..0.95, any::<u64>()).prop_flat_map(|(d, o, s)| {
            (Just(d), (1..=d[0], 1..=d[1], 1..=d[2]).prop_map(|(a, b, c)| [a, b, c]), Just(o), Just(s))
        })
    }

    proptest! {
        #[test]
        fn cut_and_reassemble_is_identity((dims, patch, overlap, seed) in arb_plan()) {
            let g = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
            let mut rng = SplitMix64::new(seed);
            let data: Vec<f32> = (0..g.len()).map(|_| rng.uniform(-1024.0, 3071.0) as f32).collect();
            let plan = plan_patches(dims, patch, overlap).unwrap();
            prop_assert_eq!(&plan, &plan_patches(dims, patch, overlap).unwrap());
            let ps = cut_patches(&data, dims, &plan).unwrap();
            let out = aggregate(&ps, &g, Blend::Uniform).unwrap();
            prop_assert_eq!(out.data(), &VolumeData::F32(data.clone()));
            for blend in [Blend::Uniform, Blend::CenterWeighted] {
                let totals = blend_weight_totals(&ps, dims, blend).unwrap();
                prop_assert!(totals.iter().all(|&w| w > 0.0));
                let mut normalised = vec![0.0f64; g.len()];
                for_each_weighted(&ps, dims, blend, |i, w, _| normalised[i] += w / totals[i]).unwrap();
                prop_assert!(normalised.iter().all(|s| (s - 1.0).abs() < 1e-6));
            }
        }

        #[test]
        fn aggregation_is_convex(seed in any::<u64>()) {
            let g = Grid::new([7, 6, 5], [1.0; 3], [0.0; 3]).unwrap();
            let plan = plan_patches(g.dims(), [4, 3, 3], 0.5).unwrap();
            let mut rng = SplitMix64::new(seed);
            let ps: Vec<Patch> = plan.origins.iter().map(|&o| Patch {
                origin: o, size: plan.patch_size, data: (0..36).map(|_| rng.uniform(-5.0, 5.0) as f32).collect(),
            }).collect();
            let out = aggregate(&ps, &g, Blend::CenterWeighted).unwrap();
            let mut lo = vec![f64::INFINITY; g.len()];
            let mut hi = vec![f64::NEG_INFINITY; g.len()];
            for_each_weighted(&ps, g.dims(), Blend::Uniform, |i, _, v| {
                lo[i] = lo[i].min(f64::from(v));
                hi[i] = hi[i].max(f64::from(v));
            }).unwrap();
            for i in 0..g.len() {
                let v = out.get(i);
                prop_assert!(v >= lo[i] - 1e-5 && v <= hi[i] + 1e-5);
            }
        }

        #[test]
        fn window_loss_linear_in_lambda(vals in prop::collection::vec((-1024.0f32..3071.0, -1024.0f32..3071.0), 1..20), k in 0.0f64..4.0) {
            let g = Grid::new([vals.len(), 1, 1], [1.0; 3], [0.0; 3]).unwrap();
            let x = Volume::new(g.clone(), VolumeData::F32(vals.iter().map(|v| v.0).collect()), Unit::Hu).unwrap();
            let y = Volume::new(g, VolumeData::F32(vals.iter().map(|v| v.1).collect()), Unit::Hu).unwrap();
            let base = WindowLossConfig::default();
            let l = multi_window_l1(&x, &y, &base).unwrap();
            prop_assert!(l >= 0.0);
            let scaled = WindowLossConfig { lambda_soft: base.lambda_soft * (k + 0.01), lambda_hard: base.lambda_hard * (k + 0.01), lambda_other: base.lambda_other * (k + 0.01), ..base };
            prop_assert!((multi_window_l1(&x, &y, &scaled).unwrap() - l * (k + 0.01)).abs() <= 1e-9 * l.max(1.0));
            prop_assert_eq!(multi_window_l1(&x, &x, &base).unwrap(), 0.0);
        }
    }
}
