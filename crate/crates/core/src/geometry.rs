//! Patient RAS basis estimation and segment-wise height measurement.
//!
//! Height is the sum of four segments measured on skeletal landmarks:
//! the longer leg (pelvis plane to knee plane along the femur axis, then
//! along the tibia axis to where it leaves the body under the foot), the
//! torso (pelvis plane to the C7 centroid along the superior axis), the neck
//! (C7 to C1 centroid distance) and the head (C1 centroid to the crown,
//! marching away from C2).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Mat3, Vec3};
use crate::volume::{structure, Grid, LabelMap};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegLengths {
    pub left_mm: Option<f64>,
    pub right_mm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightBreakdown {
    pub lower_body_mm: f64,
    pub torso_mm: f64,
    pub neck_mm: f64,
    pub head_mm: f64,
    pub total_mm: f64,
    pub per_leg: LegLengths,
}

impl HeightBreakdown {
    /// Assemble a breakdown; the total is the sum of the segments.
    pub fn from_segments(per_leg: LegLengths, torso_mm: f64, neck_mm: f64, head_mm: f64) -> Self {
        let lower_body_mm = match (per_leg.left_mm, per_leg.right_mm) {
            (Some(l), Some(r)) => l.max(r),
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => 0.0,
        };
        Self {
            lower_body_mm,
            torso_mm,
            neck_mm,
            head_mm,
            total_mm: lower_body_mm + torso_mm + neck_mm + head_mm,
            per_leg,
        }
    }
}

/// Patient frame. `(-left_right, anterior, superior)` is right-handed, i.e.
/// the frame reads as Right, Anterior, Superior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub superior: Vec3,
    pub left_right: Vec3,
    pub anterior: Vec3,
    pub origin: Vec3,
}

/// Plane `{p : dot(p, normal) = offset_mm}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn femur(self) -> u16 {
        match self {
            Side::Left => structure::FEMUR_LEFT,
            Side::Right => structure::FEMUR_RIGHT,
        }
    }

    fn tibia(self) -> u16 {
        match self {
            Side::Left => structure::TIBIA_LEFT,
            Side::Right => structure::TIBIA_RIGHT,
        }
    }
}

fn landmark_name(id: u16) -> &'static str {
    structure::name(id).unwrap_or("unknown")
}

fn missing(id: u16) -> Error {
    Error::MissingLandmark {
        id,
        name: landmark_name(id),
    }
}

fn centroid_of(grid: &Grid, idx: &[usize]) -> Option<Vec3> {
    if idx.is_empty() {
        return None;
    }
    let mut s = [0.0; 3];
    for &i in idx {
        s = linalg::add(s, grid.world_of(i));
    }
    Some(linalg::scale(s, 1.0 / idx.len() as f64))
}

/// Mean world position of the voxels labelled `id`.
pub fn mask_centroid(map: &LabelMap, id: u16) -> Result<Vec3> {
    centroid_of(map.grid(), &map.indices_of(id)).ok_or(Error::EmptyClass(id))
}

/// Major axis of a set of world points, sign-normalised toward +z (then +y,
/// then +x).
pub fn principal_axis_of(points: impl Iterator<Item = Vec3> + Clone) -> Result<Vec3> {
    let mut n = 0usize;
    let mut sum = [0.0; 3];
    for p in points.clone() {
        sum = linalg::add(sum, p);
        n += 1;
    }
    if n < 3 {
        return Err(Error::degenerate(format!("principal axis needs 3 voxels, got {n}")));
    }
    let mean = linalg::scale(sum, 1.0 / n as f64);
    let mut cov: Mat3 = [[0.0; 3]; 3];
    for p in points {
        let d = linalg::sub(p, mean);
        for a in 0..3 {
            for b in a..3 {
                cov[a][b] += d[a] * d[b];
            }
        }
    }
    for a in 0..3 {
        for b in a..3 {
            cov[a][b] /= n as f64;
            cov[b][a] = cov[a][b];
        }
    }
    axis_from_cov(&cov)
}

fn axis_from_cov(cov: &Mat3) -> Result<Vec3> {
    let (vals, vecs) = linalg::symmetric_eigen(cov);
    let scale = vals[0].abs().max(f64::MIN_POSITIVE);
    if (vals[0] - vals[2]).abs() <= 1e-9 * scale {
        return Err(Error::degenerate("isotropic voxel distribution has no major axis"));
    }
    Ok(linalg::orient_positive(vecs[0]))
}

/// Centroid and covariance (world units) of the nonzero voxels of `map`,
/// accumulated in index space around the grid centre.
fn foreground_moments(map: &LabelMap) -> Result<(Vec3, Mat3)> {
    let grid = map.grid();
    let [nx, ny, nz] = grid.dims();
    let c = [nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0];
    let data = map.data();
    let mut n = 0usize;
    let mut s1 = [0.0f64; 3];
    let mut s2 = [[0.0f64; 3]; 3];
    let mut i = 0usize;
    for z in 0..nz {
        let dz = z as f64 - c[2];
        for y in 0..ny {
            let dy = y as f64 - c[1];
            for x in 0..nx {
                if data[i] != 0 {
                    let d = [x as f64 - c[0], dy, dz];
                    n += 1;
                    for a in 0..3 {
                        s1[a] += d[a];
                        for b in a..3 {
                            s2[a][b] += d[a] * d[b];
                        }
                    }
                }
                i += 1;
            }
        }
    }
    if n < 3 {
        return Err(Error::degenerate(format!("principal axis needs 3 voxels, got {n}")));
    }
    let nf = n as f64;
    let m = [s1[0] / nf, s1[1] / nf, s1[2] / nf];
    let sp = grid.spacing_mm();
    let mut cov: Mat3 = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in a..3 {
            cov[a][b] = (s2[a][b] / nf - m[a] * m[b]) * sp[a] * sp[b];
            cov[b][a] = cov[a][b];
        }
    }
    let mean_ijk = [m[0] + c[0], m[1] + c[1], m[2] + c[2]];
    let o = grid.origin_mm();
    let mean = [o[0] + sp[0] * mean_ijk[0], o[1] + sp[1] * mean_ijk[1], o[2] + sp[2] * mean_ijk[2]];
    Ok((mean, cov))
}

/// Voxel indices of every skeletal landmark class, gathered in one pass.
struct Landmarks {
    idx: BTreeMap<u16, Vec<usize>>,
}

impl Landmarks {
    fn collect(map: &LabelMap) -> Self {
        let mut idx: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (i, &v) in map.data().iter().enumerate() {
            if (structure::C1..=structure::SCAPULA_RIGHT).contains(&v) {
                idx.entry(v).or_default().push(i);
            }
        }
        Self { idx }
    }

    fn get(&self, id: u16) -> &[usize] {
        self.idx.get(&id).map_or(&[], Vec::as_slice)
    }
}

/// Major axis of the voxels labelled `id`.
pub fn principal_axis(map: &LabelMap, id: u16) -> Result<Vec3> {
    let grid = map.grid();
    let idx = map.indices_of(id);
    if idx.is_empty() {
        return Err(Error::EmptyClass(id));
    }
    principal_axis_of(idx.iter().map(|&i| grid.world_of(i)))
}

const SYMMETRIC_PAIRS: [(u16, u16); 3] = [
    (structure::HIP_LEFT, structure::HIP_RIGHT),
    (structure::CLAVICLE_LEFT, structure::CLAVICLE_RIGHT),
    (structure::SCAPULA_LEFT, structure::SCAPULA_RIGHT),
];

fn check_pair(body: &LabelMap, structures: &LabelMap) -> Result<()> {
    if !body.grid().same_as(structures.grid()) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Patient frame from the body's principal axis and left/right organ pairs.
pub fn estimate_ras_basis(body: &LabelMap, structures: &LabelMap) -> Result<Basis> {
    check_pair(body, structures)?;
    basis_with(body, &Landmarks::collect(structures))
}

fn basis_with(body: &LabelMap, lm: &Landmarks) -> Result<Basis> {
    let grid = body.grid();
    let (origin, cov) = foreground_moments(body)?;
    let superior = axis_from_cov(&cov)?;

    let mut diff = [0.0; 3];
    let mut pairs = 0usize;
    for (l, r) in SYMMETRIC_PAIRS {
        if let (Some(cl), Some(cr)) = (centroid_of(grid, lm.get(l)), centroid_of(grid, lm.get(r))) {
            diff = linalg::add(diff, linalg::sub(cl, cr));
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::degenerate(
            "no complete left/right pair among hips, clavicles and scapulae",
        ));
    }
    let mean = linalg::scale(diff, 1.0 / pairs as f64);
    let ortho = linalg::sub(mean, linalg::scale(superior, linalg::dot(mean, superior)));
    let left_right = linalg::normalize(ortho)
        .ok_or_else(|| Error::degenerate("left/right direction is parallel to the superior axis"))?;
    let anterior = linalg::cross(left_right, superior);
    Ok(Basis {
        superior,
        left_right,
        anterior,
        origin,
    })
}

fn max_projection(grid: &Grid, idx: impl Iterator<Item = usize>, dir: Vec3) -> Option<f64> {
    idx.map(|i| linalg::dot(grid.world_of(i), dir))
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
}

/// Plane normal to the superior axis through the most superior femur voxel
/// (both femurs pooled).
pub fn pelvis_plane(structures: &LabelMap, basis: &Basis) -> Result<Plane> {
    pelvis_plane_with(structures.grid(), &Landmarks::collect(structures), basis)
}

fn pelvis_plane_with(grid: &Grid, lm: &Landmarks, basis: &Basis) -> Result<Plane> {
    let femurs = lm.get(structure::FEMUR_LEFT).iter().chain(lm.get(structure::FEMUR_RIGHT)).copied();
    let offset_mm = max_projection(grid, femurs, basis.superior).ok_or(Error::MissingLandmark {
        id: structure::FEMUR_LEFT,
        name: "femur_left/femur_right",
    })?;
    Ok(Plane {
        normal: basis.superior,
        offset_mm,
    })
}

/// Largest 26-connected component of a voxel set (ties: the component whose
/// first voxel has the lowest index).
fn largest_component(grid: &Grid, idx: &[usize]) -> Vec<usize> {
    if idx.is_empty() {
        return Vec::new();
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &i in idx {
        let c = grid.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let d = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let local = |c: [usize; 3]| (c[0] - lo[0]) + d[0] * ((c[1] - lo[1]) + d[1] * (c[2] - lo[2]));
    // 0 = not in set, 1 = unvisited, 2 = visited
    let mut state = alloc::vec![0u8; d[0] * d[1] * d[2]];
    for &i in idx {
        state[local(grid.coords(i))] = 1;
    }
    let mut best: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for &seed in idx {
        let sl = local(grid.coords(seed));
        if state[sl] != 1 {
            continue;
        }
        state[sl] = 2;
        stack.push(seed);
        let mut comp = Vec::new();
        while let Some(v) = stack.pop() {
            comp.push(v);
            let c = grid.coords(v);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if (0..3).any(|a| n[a] < lo[a] as i64 || n[a] > hi[a] as i64) {
                            continue;
                        }
                        let nc = [n[0] as usize, n[1] as usize, n[2] as usize];
                        let l = local(nc);
                        if state[l] == 1 {
                            state[l] = 2;
                            stack.push(grid.index(nc[0], nc[1], nc[2]));
                        }
                    }
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

/// Walk from `start` along unit `dir` in steps of `step` while the nearest
/// voxel is inside, then bisect between the last inside and first outside
/// sample. Returns the distance to the boundary of the inside set along the
/// ray, or `None` if `start` itself is outside.
pub fn march_to_exit(grid: &Grid, inside: impl Fn(usize) -> bool, start: Vec3, dir: Vec3, step: f64) -> Option<f64> {
    let first = grid.nearest(start)?;
    if !inside(first) {
        return None;
    }
    let is_in = |t: f64| grid.nearest(linalg::add(start, linalg::scale(dir, t))).is_some_and(&inside);
    let s = grid.spacing_mm();
    let d = grid.dims();
    let diag = libm::sqrt((0..3).map(|a| (s[a] * d[a] as f64) * (s[a] * d[a] as f64)).sum::<f64>());
    let max_steps = libm::ceil(diag / step) as usize + 2;
    let mut lo = 0.0;
    for k in 1..=max_steps {
        let t = k as f64 * step;
        if !is_in(t) {
            let mut hi = t;
            for _ in 0..MARCH_BISECTIONS {
                let mid = 0.5 * (lo + hi);
                if is_in(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        lo = t;
    }
    Some(lo)
}

/// Bisection rounds after the march; resolves the exit to `step / 2^40`.
const MARCH_BISECTIONS: usize = 40;

fn half_min_spacing(grid: &Grid) -> f64 {
    let s = grid.spacing_mm();
    s[0].min(s[1]).min(s[2]) / 2.0
}

/// Upper and lower leg length for one side, in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegSegments {
    pub upper_mm: f64,
    pub lower_mm: f64,
}

impl LegSegments {
    pub fn total(&self) -> f64 {
        self.upper_mm + self.lower_mm
    }
}

/// Leg segments for one side measured against the pelvis plane.
pub fn leg_segments(
    side: Side,
    structures: &LabelMap,
    body: &LabelMap,
    basis: &Basis,
    pelvis: &Plane,
) -> Result<LegSegments> {
    check_pair(body, structures)?;
    leg_segments_with(side, &Landmarks::collect(structures), body, basis, pelvis)
}

fn leg_segments_with(side: Side, lm: &Landmarks, body: &LabelMap, basis: &Basis, pelvis: &Plane) -> Result<LegSegments> {
    let grid = body.grid();
    let s = basis.superior;
    let femur = lm.get(side.femur());
    if femur.is_empty() {
        return Err(missing(side.femur()));
    }
    let femur_min = femur
        .iter()
        .map(|&i| linalg::dot(grid.world_of(i), s))
        .fold(f64::INFINITY, f64::min);
    let tibia_all = lm.get(side.tibia());
    if tibia_all.is_empty() {
        return Err(missing(side.tibia()));
    }
    let below: Vec<usize> = tibia_all
        .iter()
        .copied()
        .filter(|&i| linalg::dot(grid.world_of(i), s) <= femur_min)
        .collect();
    let tibia = largest_component(grid, &below);
    if tibia.len() < 3 {
        return Err(Error::degenerate(format!(
            "{} has fewer than 3 voxels below the femur",
            landmark_name(side.tibia())
        )));
    }

    let femur_axis = principal_axis_of(femur.iter().map(|&i| grid.world_of(i)))?;
    let knee_offset = max_projection(grid, tibia.iter().copied(), s).unwrap_or(0.0);
    let cos_f = linalg::dot(femur_axis, s).abs();
    if cos_f < 1e-6 {
        return Err(Error::degenerate("femur axis lies in the pelvis plane"));
    }
    let upper_mm = ((pelvis.offset_mm - knee_offset) / cos_f).max(0.0);

    let tibia_axis = principal_axis_of(tibia.iter().map(|&i| grid.world_of(i)))?;
    let along = linalg::dot(tibia_axis, s);
    if along.abs() < 1e-6 {
        return Err(Error::degenerate("tibia axis lies in the knee plane"));
    }
    let c = centroid_of(grid, &tibia).unwrap_or([0.0; 3]);
    let t = (knee_offset - linalg::dot(c, s)) / along;
    let start = linalg::add(c, linalg::scale(tibia_axis, t));
    let foot_dir = if along > 0.0 { linalg::scale(tibia_axis, -1.0) } else { tibia_axis };
    let lower_mm = march_to_exit(grid, |i| body.get(i) != 0, start, foot_dir, half_min_spacing(grid))
        .ok_or_else(|| Error::degenerate(format!("{} axis does not start inside the body", landmark_name(side.tibia()))))?;
    Ok(LegSegments { upper_mm, lower_mm })
}

/// Leg length (upper + lower) for one side.
pub fn leg_length_mm(side: Side, structures: &LabelMap, body: &LabelMap, basis: &Basis) -> Result<f64> {
    let pelvis = pelvis_plane(structures, basis)?;
    Ok(leg_segments(side, structures, body, basis, &pelvis)?.total())
}

/// Full segment-wise height of one subject.
pub fn measure_height(body: &LabelMap, structures: &LabelMap) -> Result<HeightBreakdown> {
    check_pair(body, structures)?;
    let lm = Landmarks::collect(structures);
    let basis = basis_with(body, &lm)?;
    let pelvis = pelvis_plane_with(body.grid(), &lm, &basis)?;

    let leg = |side: Side| match leg_segments_with(side, &lm, body, &basis, &pelvis) {
        Ok(seg) => Ok(Some(seg.total())),
        Err(Error::MissingLandmark { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    let per_leg = LegLengths {
        left_mm: leg(Side::Left)?,
        right_mm: leg(Side::Right)?,
    };
    if per_leg.left_mm.is_none() && per_leg.right_mm.is_none() {
        return Err(Error::MissingLandmark {
            id: structure::TIBIA_LEFT,
            name: "femur and tibia of at least one leg",
        });
    }

    let point = |id: u16| centroid_of(body.grid(), lm.get(id)).ok_or_else(|| missing(id));
    let c1 = point(structure::C1)?;
    let c2 = point(structure::C2)?;
    let c7 = point(structure::C7)?;
    let torso_mm = (linalg::dot(c7, basis.superior) - pelvis.offset_mm).max(0.0);
    let neck_mm = linalg::distance(c7, c1);
    let up = linalg::normalize(linalg::sub(c1, c2))
        .ok_or_else(|| Error::degenerate("C1 and C2 centroids coincide"))?;
    let grid = body.grid();
    let head_mm = march_to_exit(grid, |i| body.get(i) != 0, c1, up, half_min_spacing(grid))
        .ok_or_else(|| Error::degenerate("C1 centroid lies outside the body"))?;
    Ok(HeightBreakdown::from_segments(per_leg, torso_mm, neck_mm, head_mm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{default_class_table, LabelKind};
    use alloc::vec;
    use proptest::prelude::*;

    fn smap(grid: &Grid, data: Vec<u16>) -> LabelMap {
        LabelMap::new(grid.clone(), LabelKind::Structure, data, default_class_table(LabelKind::Structure)).unwrap()
    }

    fn with_voxels(dims: [usize; 3], voxels: &[([usize; 3], u16)]) -> LabelMap {
        let g = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
        let mut d = vec![0u16; g.len()];
        for (c, id) in voxels {
            d[g.index(c[0], c[1], c[2])] = *id;
        }
        smap(&g, d)
    }

    #[test]
    fn centroid_cases() {
        let m = with_voxels([5, 5, 5], &[([2, 3, 4], 1)]);
        assert_eq!(mask_centroid(&m, 1).unwrap(), [2.0, 3.0, 4.0]);
        let m = with_voxels([5, 5, 5], &[([0, 0, 0], 1), ([4, 2, 2], 1)]);
        assert_eq!(mask_centroid(&m, 1).unwrap(), [2.0, 1.0, 1.0]);
        assert_eq!(mask_centroid(&m, 2), Err(Error::EmptyClass(2)));
    }

    #[test]
    fn axis_of_line_and_box() {
        let line: Vec<_> = (0..50).map(|z| ([1, 1, z], 1u16)).collect();
        assert_eq!(principal_axis(&with_voxels([3, 3, 50], &line), 1).unwrap(), [0.0, 0.0, 1.0]);
        let mut bx = Vec::new();
        for x in 0..10 {
            for y in 0..2 {
                for z in 0..2 {
                    bx.push(([x, y, z], 1u16));
                }
            }
        }
        let a = principal_axis(&with_voxels([10, 2, 2], &bx), 1).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12 && a[1].abs() < 1e-12 && a[2].abs() < 1e-12);
        let mut cube = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    cube.push(([x, y, z], 1u16));
                }
            }
        }
        assert!(matches!(principal_axis(&with_voxels([3, 3, 3], &cube), 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn largest_component_keeps_biggest_blob() {
        let g = Grid::new([10, 1, 10], [1.0; 3], [0.0; 3]).unwrap();
        let a: Vec<usize> = (0..3).map(|z| g.index(0, 0, z)).collect();
        let b: Vec<usize> = (0..5).map(|z| g.index(5 + z % 2, 0, z)).collect();
        let all: Vec<usize> = a.iter().chain(&b).copied().collect();
        let mut expect = b.clone();
        expect.sort_unstable();
        assert_eq!(largest_component(&g, &all), expect);
    }

    #[test]
    fn march_finds_voxel_face() {
        let g = Grid::new([1, 1, 20], [1.0; 3], [0.0; 3]).unwrap();
        let inside = |i: usize| g.coords(i)[2] < 10;
        // Voxel 9 covers z in [8.5, 9.5), so the exit from z = 2 is 7.5 mm away.
        let d = march_to_exit(&g, inside, [0.0, 0.0, 2.0], [0.0, 0.0, 1.0], 0.5).unwrap();
        assert!((d - 7.5).abs() < 1e-9, "{d}");
        let d = march_to_exit(&g, inside, [0.0, 0.0, 2.3], [0.0, 0.0, 1.0], 0.5).unwrap();
        assert!((d - 7.2).abs() < 1e-9, "{d}");
        assert_eq!(march_to_exit(&g, inside, [0.0, 0.0, 12.0], [0.0, 0.0, 1.0], 0.5), None);
    }

    #[test]
    fn breakdown_sums_segments() {
        let h = HeightBreakdown::from_segments(LegLengths { left_mm: Some(800.0), right_mm: Some(805.0) }, 560.0, 120.0, 220.0);
        assert_eq!(h.lower_body_mm, 805.0);
        assert_eq!(h.total_mm, 805.0 + 560.0 + 120.0 + 220.0);
    }

    proptest! {
        #[test]
        fn axis_sign_rule_is_deterministic(pts in prop::collection::vec(prop::array::uniform3(0usize..8), 3..30)) {
            let voxels: Vec<_> = pts.iter().map(|&c| (c, 1u16)).collect();
            let m = with_voxels([8, 8, 8], &voxels);
            let a = principal_axis(&m, 1);
            let b = principal_axis(&m, 1);
            prop_assert_eq!(&a, &b);
            if let Ok(v) = a {
                prop_assert!((linalg::norm(v) - 1.0).abs() < 1e-9);
                let first = v.iter().rev().find(|c| c.abs() > 1e-12).copied().unwrap_or(1.0);
                prop_assert!(first > 0.0);
            }
        }
    }
}
