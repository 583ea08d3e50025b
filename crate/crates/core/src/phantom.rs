//! Procedural full-body phantoms with known composition and height.
//!
//! A phantom is a union of simple solids stacked along +S: two legs (body
//! cylinders holding a femur and a tibia), a torso ellipsoid holding organ
//! blobs for every structure class plus paired hip, clavicle and scapula
//! markers, a neck cylinder carrying single-voxel C1/C2/C7 markers, and a
//! head sphere holding the brain. Every vertical level is snapped to a voxel
//! layer so the constructed segment lengths are exact.
//!
//! Tissue is assigned by depth. Bone, organ and muscle-structure voxels keep
//! their own tissue; the remaining body voxels are ordered from the surface
//! inward and the shallowest become fat, the next muscle, the rest generic
//! soft tissue. Fat and muscle counts come from a closed-form mass balance so
//! the requested mass fractions are met to within one voxel. Lateral radii
//! are scaled until the body mass is within 1.5% of the requested weight.
//!
//! Local frame: `x = (i - cx) * sx`, `y = (j - cy) * sy`, `z = k * sz` with
//! the sole on layer `k = 0`; the grid carries two voxels of air around the
//! body.

pub mod population;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{HeightBreakdown, LegLengths};
use crate::linalg::{self, Vec3};
use crate::rng::SplitMix64;
use crate::volume::{default_class_table, structure, tissue, Grid, LabelKind, LabelMap, Unit, Volume, VolumeData};
use crate::{Error, Result};

pub use population::{bin_attributes, AttributeBins, Bin, PopulationModel, RawAttributes, Sex, SexCategory, subject_seed, SubjectDraw};

pub const AIR_HU: i16 = -1000;
pub const FAT_HU: i16 = -100;
pub const MUSCLE_HU: i16 = 50;
pub const ORGAN_HU: i16 = 40;

/// Bone HU by age: `1100 - 5 * age`, clamped to [400, 1200].
pub fn bone_hu_for_age(age_years: f64) -> f64 {
    (1100.0 - 5.0 * age_years).clamp(400.0, 1200.0)
}

fn density(hu: i16) -> f64 {
    (f64::from(hu) + 1000.0) / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height_mm: f64,
    pub weight_kg: f64,
    pub fat_fraction: f64,
    pub muscle_fraction: f64,
    pub sex: Sex,
    pub age_years: f64,
    pub spacing_mm: [f64; 3],
    pub seed: u64,
    /// Backward rotation of both lower legs about the knee.
    #[serde(default)]
    pub knee_bend_deg: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if !(800.0..=2200.0).contains(&self.height_mm) {
            return bad(format!("height {} mm outside [800, 2200]", self.height_mm));
        }
        if !(self.weight_kg > 0.0 && self.weight_kg.is_finite()) {
            return bad(format!("weight {} kg must be positive", self.weight_kg));
        }
        if !(0.05..=0.6).contains(&self.fat_fraction) {
            return bad(format!("fat fraction {} outside [0.05, 0.6]", self.fat_fraction));
        }
        if !(self.muscle_fraction >= 0.0) || self.fat_fraction + self.muscle_fraction > 0.9 {
            return bad("muscle fraction must be >= 0 with fat + muscle <= 0.9".into());
        }
        if !self.age_years.is_finite() {
            return bad("age must be finite".into());
        }
        if !(0.0..=60.0).contains(&self.knee_bend_deg) {
            return bad(format!("knee bend {} deg outside [0, 60]", self.knee_bend_deg));
        }
        Grid::new([1, 1, 1], self.spacing_mm, [0.0; 3]).map(|_| ())
    }

    pub fn bone_hu(&self) -> i16 {
        libm::round(bone_hu_for_age(self.age_years)) as i16
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub body_mass_g: f64,
    pub fat_pct: f64,
    pub muscle_pct: f64,
    pub bone_density_hu: f64,
    pub body_volume_mm3: f64,
    pub height_breakdown: HeightBreakdown,
    /// World positions (mm) of the vertebral markers and paired landmarks.
    pub landmarks: BTreeMap<String, Vec3>,
    /// Factor applied to all lateral radii to reach the target weight.
    pub lateral_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub tissue: LabelMap,
    pub structure: LabelMap,
    pub truth: PhantomTruth,
}

#[derive(Debug, Clone, Copy)]
enum Solid {
    Sphere { c: Vec3, r: f64 },
    /// Segment from `base` along unit `dir` for `len`, radius `r`.
    Cylinder { base: Vec3, dir: Vec3, len: f64, r: f64 },
    Ellipsoid { c: Vec3, semi: Vec3 },
}

/// Boundary slack so voxel centres placed exactly on a snapped surface are
/// inside.
const EPS: f64 = 1e-9;

impl Solid {
    fn bbox(&self) -> (Vec3, Vec3) {
        match *self {
            Solid::Sphere { c, r } => ([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r]),
            Solid::Ellipsoid { c, semi } => (linalg::sub(c, semi), linalg::add(c, semi)),
            Solid::Cylinder { base, dir, len, r } => {
                let end = linalg::add(base, linalg::scale(dir, len));
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                for a in 0..3 {
                    lo[a] = base[a].min(end[a]) - r;
                    hi[a] = base[a].max(end[a]) + r;
                }
                (lo, hi)
            }
        }
    }

    /// Interval of x that may be inside on the line at (y, z), slightly
    /// widened. `None` when the line misses the solid.
    fn x_span(&self, y: f64, z: f64) -> Option<(f64, f64)> {
        const PAD: f64 = 1e-6;
        let half = |c: f64, rem: f64, scale: f64| {
            (rem >= -PAD).then(|| {
                let w = libm::sqrt(rem.max(0.0)) * scale + PAD;
                (c - w, c + w)
            })
        };
        match *self {
            Solid::Sphere { c, r } => {
                let (dy, dz) = (y - c[1], z - c[2]);
                half(c[0], (r + EPS) * (r + EPS) - dy * dy - dz * dz, 1.0)
            }
            Solid::Ellipsoid { c, semi } => {
                let (qy, qz) = ((y - c[1]) / semi[1], (z - c[2]) / semi[2]);
                half(c[0], (1.0 + EPS) * (1.0 + EPS) - qy * qy - qz * qz, semi[0])
            }
            Solid::Cylinder { base, dir, len, r } if dir[0] == 0.0 => {
                let (vy, vz) = (y - base[1], z - base[2]);
                let t = vy * dir[1] + vz * dir[2];
                if t < -EPS - PAD || t > len + EPS + PAD {
                    return None;
                }
                half(base[0], (r + EPS) * (r + EPS) - (vy * vy + vz * vz - t * t), 1.0)
            }
            Solid::Cylinder { .. } => {
                let (lo, hi) = self.bbox();
                Some((lo[0], hi[0]))
            }
        }
    }

    /// Distance-like depth below the surface, or `None` outside.
    #[inline]
    fn depth(&self, p: Vec3) -> Option<f64> {
        match *self {
            Solid::Sphere { c, r } => {
                let d = linalg::distance(p, c);
                (d <= r + EPS).then(|| r - d)
            }
            Solid::Cylinder { base, dir, len, r } => {
                let v = linalg::sub(p, base);
                let t = linalg::dot(v, dir);
                if t < -EPS || t > len + EPS {
                    return None;
                }
                let radial = linalg::norm(linalg::sub(v, linalg::scale(dir, t)));
                (radial <= r + EPS).then(|| r - radial)
            }
            Solid::Ellipsoid { c, semi } => {
                let q = [(p[0] - c[0]) / semi[0], (p[1] - c[1]) / semi[1], (p[2] - c[2]) / semi[2]];
                let rho = linalg::norm(q);
                let min_semi = semi[0].min(semi[1]).min(semi[2]);
                (rho <= 1.0 + EPS).then(|| (1.0 - rho) * min_semi)
            }
        }
    }
}

/// Local-frame voxel lattice of one phantom.
struct Lattice {
    grid: Grid,
    centre: [usize; 3],
    sp: [f64; 3],
}

impl Lattice {
    #[inline]
    fn local(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            (i as f64 - self.centre[0] as f64) * self.sp[0],
            (j as f64 - self.centre[1] as f64) * self.sp[1],
            (k as f64 - self.centre[2] as f64) * self.sp[2],
        ]
    }

    fn index_of_local(&self, p: Vec3) -> usize {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            ijk[a] = (libm::round(p[a] / self.sp[a]) as i64 + self.centre[a] as i64) as usize;
        }
        self.grid.index(ijk[0], ijk[1], ijk[2])
    }

    /// Visit every voxel whose centre lies inside `solid`.
    fn for_each_inside(&self, solid: &Solid, mut f: impl FnMut(usize, f64)) {
        let (lo, hi) = solid.bbox();
        let d = self.grid.dims();
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let l = libm::ceil(lo[a] / self.sp[a] - 1e-6) as i64 + self.centre[a] as i64;
            let h = libm::floor(hi[a] / self.sp[a] + 1e-6) as i64 + self.centre[a] as i64;
            range[a] = (l.max(0) as usize, (h.min(d[a] as i64 - 1)).max(-1).wrapping_add(1) as usize);
        }
        for k in range[2].0..range[2].1 {
            for j in range[1].0..range[1].1 {
                let p0 = self.local(range[0].0, j, k);
                let Some((x0, x1)) = solid.x_span(p0[1], p0[2]) else {
                    continue;
                };
                let c0 = self.centre[0] as i64;
                let i0 = (libm::ceil(x0 / self.sp[0]) as i64 + c0).max(range[0].0 as i64) as usize;
                let i1 = (libm::floor(x1 / self.sp[0]) as i64 + c0 + 1).min(range[0].1 as i64).max(i0 as i64) as usize;
                for i in i0..i1 {
                    let p = self.local(i, j, k);
                    if let Some(dep) = solid.depth(p) {
                        f(self.grid.index(i, j, k), dep);
                    }
                }
            }
        }
    }
}

/// Relative placement of a blob inside the torso: position in unit-ball
/// coordinates and radius as a fraction of the shortest torso semi-axis.
struct Blob {
    id: u16,
    uvw: Vec3,
    frac: f64,
    mirrored: bool,
}

const fn blob(id: u16, u: f64, v: f64, w: f64, frac: f64, mirrored: bool) -> Blob {
    Blob {
        id,
        uvw: [u, v, w],
        frac,
        mirrored,
    }
}

/// Organ and landmark blobs. Mirrored blobs are placed at `-u` (patient left,
/// since +x points right) and `+u`.
const TORSO_BLOBS: [Blob; 14] = [
    blob(structure::SPLEEN, -0.45, -0.1, 0.25, 0.18, false),
    blob(structure::KIDNEY, 0.35, -0.4, -0.05, 0.17, true),
    blob(structure::LIVER, 0.35, 0.1, 0.3, 0.35, false),
    blob(structure::LUNG_UPPER_LOBES, 0.4, 0.05, 0.62, 0.2, true),
    blob(structure::LUNG_LOWER_LOBES, 0.4, 0.0, 0.42, 0.25, true),
    blob(structure::LUNG_MIDDLE_LOBE, 0.45, 0.2, 0.5, 0.12, false),
    blob(structure::URINARY_BLADDER, 0.0, 0.3, -0.7, 0.15, false),
    blob(structure::PROSTATE, 0.0, 0.1, -0.8, 0.08, false),
    blob(structure::HEART, -0.1, 0.3, 0.45, 0.3, false),
    blob(structure::AORTA, -0.05, -0.2, 0.2, 0.1, false),
    blob(structure::GLUTEUS_MUSCLES, 0.35, -0.45, -0.55, 0.15, true),
    blob(structure::AUTOCHTHONOUS_MUSCLES, 0.12, -0.75, 0.1, 0.12, true),
    blob(structure::ILIOPSOAS, 0.25, -0.2, -0.35, 0.12, true),
    blob(structure::APPENDICULAR_BONES, 0.65, 0.0, 0.5, 0.1, true),
];

/// (left id, right id, |u|, v, w, radius fraction).
const PAIRS: [(u16, u16, f64, f64, f64, f64); 3] = [
    (structure::HIP_LEFT, structure::HIP_RIGHT, 0.45, 0.0, -0.684, 0.12),
    (structure::CLAVICLE_LEFT, structure::CLAVICLE_RIGHT, 0.4, 0.4, 0.65, 0.08),
    (structure::SCAPULA_LEFT, structure::SCAPULA_RIGHT, 0.4, -0.4, 0.6, 0.1),
];

/// Keep blobs this far inside the torso's unit ball.
const TORSO_BUDGET: f64 = 0.95;
const JITTER: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TissueClass {
    Bone,
    MuscleStructure,
    Organ,
}

fn tissue_class(structure_id: u16) -> TissueClass {
    match structure_id {
        structure::BONE | structure::APPENDICULAR_BONES | structure::C1..=structure::SCAPULA_RIGHT => TissueClass::Bone,
        structure::GLUTEUS_MUSCLES | structure::AUTOCHTHONOUS_MUSCLES | structure::ILIOPSOAS => TissueClass::MuscleStructure,
        _ => TissueClass::Organ,
    }
}

/// Snapped vertical levels (layer indices above the sole).
#[derive(Debug, Clone, Copy)]
struct Levels {
    crown: i64,
    knee: i64,
    ankle: i64,
    femur_low: i64,
    pelvis: i64,
    leg_top: i64,
    c7: i64,
    c2: i64,
    c1: i64,
}

fn levels(height_mm: f64, sz: f64) -> Result<Levels> {
    let at = |f: f64| libm::round(f * height_mm / sz) as i64;
    let n_layers = libm::round(height_mm / sz) as i64;
    let knee = at(0.25);
    let lv = Levels {
        crown: n_layers - 1,
        knee,
        ankle: at(0.04),
        femur_low: knee + at(0.012).max(1),
        pelvis: at(0.47),
        leg_top: at(0.50),
        c7: at(0.80),
        c2: at(0.855),
        c1: at(0.87),
    };
    let ordered = [0, lv.ankle, lv.knee, lv.femur_low, lv.pelvis, lv.c7, lv.c2, lv.c1, lv.crown];
    if ordered.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Infeasible(format!(
            "slice thickness {sz} mm is too coarse for a {height_mm} mm phantom"
        )));
    }
    Ok(lv)
}

struct Geometry {
    lattice: Lattice,
    body: Vec<Solid>,
    /// Painted in order; later entries overwrite earlier ones.
    structures: Vec<(u16, Solid)>,
    markers: [(u16, Vec3); 3],
    lv: Levels,
    lower_leg_len: f64,
}

fn build_geometry(spec: &PhantomSpec, s: f64, x_leg: f64, jitter: &[Vec3]) -> Result<Geometry> {
    let h = spec.height_mm;
    let sp = spec.spacing_mm;
    let sz = sp[2];
    let lv = levels(h, sz)?;
    let z = |k: i64| k as f64 * sz;

    let r_leg = 0.04 * h * s;
    let torso_c = [0.0, 0.0, 0.63 * h];
    let torso = [0.095 * h * s, 0.06 * h * s, 0.19 * h];
    let r_neck = 0.028 * h * s;
    let r_head = 0.065 * h;
    let head_c = [0.0, 0.0, z(lv.crown) - r_head];
    let theta = spec.knee_bend_deg.to_radians();
    let down = [0.0, -libm::sin(theta), -libm::cos(theta)];
    let up = [0.0, 0.0, 1.0];
    let lower_leg_len = z(lv.knee) + sz / 2.0;

    let x_extent = torso[0].max(x_leg + r_leg).max(r_head).max(r_neck);
    let mut y_extent = torso[1].max(r_leg).max(r_head);
    if theta > 0.0 {
        y_extent = y_extent.max(lower_leg_len * libm::sin(theta) + r_leg);
    }
    let margin = 2usize;
    let half = |e: f64, s: f64| libm::ceil(e / s) as usize + margin;
    let (hx, hy) = (half(x_extent, sp[0]), half(y_extent, sp[1]));
    let dims = [2 * hx + 1, 2 * hy + 1, lv.crown as usize + 1 + 2 * margin];
    let centre = [hx, hy, margin];
    let origin = [-(hx as f64) * sp[0], -(hy as f64) * sp[1], -(margin as f64) * sz];
    let grid = Grid::new(dims, sp, origin)?;
    let lattice = Lattice { grid, centre, sp };

    let mut body = vec![
        Solid::Ellipsoid { c: torso_c, semi: torso },
        Solid::Cylinder { base: [0.0, 0.0, 0.78 * h], dir: up, len: 0.12 * h, r: r_neck },
        Solid::Sphere { c: head_c, r: r_head },
    ];
    let mut structures = Vec::new();
    for side in [-1.0, 1.0] {
        let knee = [side * x_leg, 0.0, z(lv.knee)];
        body.push(Solid::Cylinder {
            base: knee,
            dir: up,
            len: z(lv.leg_top) - z(lv.knee),
            r: r_leg,
        });
        body.push(Solid::Cylinder { base: knee, dir: down, len: lower_leg_len, r: r_leg });
        if theta > 0.0 {
            body.push(Solid::Sphere { c: knee, r: r_leg });
        }
    }

    // Torso blobs, sized to stay inside the torso after jitter.
    let mut jit = jitter.iter();
    let mut place = |id: u16, uvw: Vec3, frac: f64, structures: &mut Vec<(u16, Solid)>| {
        let j = jit.next().copied().unwrap_or([0.0; 3]);
        let q = linalg::add(uvw, j);
        let frac = frac.min(TORSO_BUDGET - linalg::norm(q)).max(0.02);
        let c = [q[0] * torso[0], q[1] * torso[1], torso_c[2] + q[2] * torso[2]];
        structures.push((id, Solid::Sphere { c, r: frac * torso[1] }));
    };
    for b in &TORSO_BLOBS {
        if b.id == structure::PROSTATE && spec.sex == Sex::F {
            continue;
        }
        if b.mirrored {
            place(b.id, [-b.uvw[0], b.uvw[1], b.uvw[2]], b.frac, &mut structures);
        }
        place(b.id, b.uvw, b.frac, &mut structures);
    }
    structures.push((
        structure::BRAIN,
        Solid::Sphere { c: head_c, r: 0.7 * r_head },
    ));
    structures.push((
        structure::BONE,
        Solid::Cylinder {
            base: [0.0, -0.55 * torso[1], torso_c[2] - 0.6 * torso[2]],
            dir: up,
            len: 1.2 * torso[2],
            r: 0.08 * torso[1],
        },
    ));
    for (l, r, u, v, w, frac) in PAIRS {
        for (id, sign) in [(l, -1.0), (r, 1.0)] {
            let c = [sign * u * torso[0], v * torso[1], torso_c[2] + w * torso[2]];
            structures.push((id, Solid::Sphere { c, r: frac * torso[1] }));
        }
    }
    for (side, femur, tibia) in [
        (-1.0, structure::FEMUR_LEFT, structure::TIBIA_LEFT),
        (1.0, structure::FEMUR_RIGHT, structure::TIBIA_RIGHT),
    ] {
        structures.push((
            femur,
            Solid::Cylinder {
                base: [side * x_leg, 0.0, z(lv.femur_low)],
                dir: up,
                len: z(lv.pelvis) - z(lv.femur_low),
                r: 0.012 * h,
            },
        ));
        structures.push((
            tibia,
            Solid::Cylinder {
                base: [side * x_leg, 0.0, z(lv.knee)],
                dir: down,
                len: z(lv.knee) - z(lv.ankle),
                r: 0.010 * h,
            },
        ));
    }
    let markers = [
        (structure::C7, [0.0, 0.0, z(lv.c7)]),
        (structure::C2, [0.0, 0.0, z(lv.c2)]),
        (structure::C1, [0.0, 0.0, z(lv.c1)]),
    ];
    if 0.012 * h >= r_leg || r_neck < sp[0].max(sp[1]) {
        return Err(Error::Infeasible(format!("lateral scale {s:.3} leaves no room around the leg bones")));
    }
    Ok(Geometry {
        lattice,
        body,
        structures,
        markers,
        lv,
        lower_leg_len,
    })
}

/// Rasterised geometry before tissue assignment.
struct Raster {
    /// Depth below the surface; negative outside the body.
    depth: Vec<f32>,
    structure: Vec<u16>,
    counts: ClassCounts,
}

#[derive(Debug, Clone, Copy, Default)]
struct ClassCounts {
    bone: usize,
    muscle_structure: usize,
    organ: usize,
    free: usize,
}

fn rasterize(g: &Geometry) -> Raster {
    let n = g.lattice.grid.len();
    let mut depth = vec![-1.0f32; n];
    for solid in &g.body {
        g.lattice.for_each_inside(solid, |i, d| {
            let d = d as f32;
            if d > depth[i] {
                depth[i] = d;
            }
        });
    }
    let mut st = vec![0u16; n];
    for (id, solid) in &g.structures {
        g.lattice.for_each_inside(solid, |i, _| {
            if depth[i] >= 0.0 {
                st[i] = *id;
            }
        });
    }
    for (id, p) in &g.markers {
        st[g.lattice.index_of_local(*p)] = *id;
    }
    let mut counts = ClassCounts::default();
    for i in 0..n {
        if depth[i] < 0.0 {
            continue;
        }
        match st[i] {
            0 => counts.free += 1,
            id => match tissue_class(id) {
                TissueClass::Bone => counts.bone += 1,
                TissueClass::MuscleStructure => counts.muscle_structure += 1,
                TissueClass::Organ => counts.organ += 1,
            },
        }
    }
    Raster { depth, structure: st, counts }
}

/// Fat and muscle voxel counts meeting the requested mass fractions, and the
/// resulting body mass in grams.
fn mass_balance(spec: &PhantomSpec, c: &ClassCounts, voxel_cm3: f64) -> Result<(usize, usize, f64)> {
    let (rf, rm, ro, rb) = (density(FAT_HU), density(MUSCLE_HU), density(ORGAN_HU), density(spec.bone_hu()));
    let (f, m) = (spec.fat_fraction, spec.muscle_fraction);
    let m_bone = rb * c.bone as f64 * voxel_cm3;
    let m_org = ro * c.organ as f64 * voxel_cm3;
    let m_ms = rm * c.muscle_structure as f64 * voxel_cm3;
    // M = fixed + f M + (m M - m_ms) + ro v (free - n_f - n_m), with
    // n_f = f M / (rf v) and n_m = (m M - m_ms) / (rm v).
    let lhs = 1.0 - f - m + ro * f / rf + ro * m / rm;
    let rhs = m_bone + m_org + ro * voxel_cm3 * c.free as f64 + m_ms * ro / rm;
    let mass = rhs / lhs;
    let n_fat = libm::round(f * mass / (rf * voxel_cm3));
    let n_muscle = libm::round((m * mass - m_ms) / (rm * voxel_cm3));
    if n_muscle < 0.0 || n_fat + n_muscle > c.free as f64 {
        return Err(Error::Infeasible(format!(
            "fat {f} and muscle {m} fractions cannot be realised with the fixed organ and bone volume"
        )));
    }
    Ok((n_fat as usize, n_muscle as usize, mass))
}

/// Lateral scale that puts the solids' volume near the weight target,
/// ignoring overlaps.
fn initial_scale(spec: &PhantomSpec) -> f64 {
    use core::f64::consts::PI;
    let h = spec.height_mm / 10.0; // cm
    let (f, m) = (spec.fat_fraction, spec.muscle_fraction);
    let mean_density = 1.0 / (f / 0.9 + m / 1.05 + (1.0 - f - m) / 1.1);
    let target_cm3 = spec.weight_kg * 1000.0 / mean_density;
    let head = 4.0 / 3.0 * PI * libm::pow(0.065 * h, 3.0);
    let per_s2 = 4.0 / 3.0 * PI * 0.095 * 0.06 * 0.19 * h * h * h
        + 2.0 * PI * 0.04 * 0.04 * 0.5 * h * h * h
        + PI * 0.028 * 0.028 * 0.12 * h * h * h;
    libm::sqrt(((target_cm3 - head) / per_s2).max(0.01))
}

/// Largest relative weight error accepted before giving up.
pub const WEIGHT_TOLERANCE: f64 = 0.02;
const WEIGHT_TARGET: f64 = 0.015;
const MAX_ROUNDS: usize = 6;
const MAX_FINE_ROUNDS: usize = 12;
const COARSE_TARGET: f64 = 0.004;

/// Rasterise at lateral scale `s` and solve the tissue counts.
fn weigh(spec: &PhantomSpec, s: f64, x_leg: f64, jitter: &[Vec3]) -> Result<(Geometry, Raster, usize, usize, f64)> {
    let geom = build_geometry(spec, s, x_leg, jitter)?;
    let raster = rasterize(&geom);
    let voxel_cm3 = crate::volume::voxel_volume_mm3(&geom.lattice.grid) / 1000.0;
    let (n_fat, n_muscle, mass) = mass_balance(spec, &raster.counts, voxel_cm3)?;
    Ok((geom, raster, n_fat, n_muscle, mass))
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let jitter: Vec<Vec3> = (0..TORSO_BLOBS.len() * 2)
        .map(|_| [rng.uniform(-JITTER, JITTER), rng.uniform(-JITTER, JITTER), rng.uniform(-JITTER, JITTER)])
        .collect();
    let target_g = spec.weight_kg * 1000.0;
    let head_g = 4.0 / 3.0 * core::f64::consts::PI * libm::pow(0.065 * spec.height_mm / 10.0, 3.0);

    let update = |s: f64, mass: f64| s * libm::sqrt((target_g - head_g).max(1.0) / (mass - head_g).max(1.0));
    let check_scale = |s: f64| {
        if (0.3..=3.0).contains(&s) {
            Ok(())
        } else {
            Err(Error::Infeasible(format!(
                "{} kg at {} mm needs lateral scale {s:.2}",
                spec.weight_kg, spec.height_mm
            )))
        }
    };

    // Search on a lattice twice as coarse, then confirm at full resolution.
    let mut s = initial_scale(spec);
    // Leg axes sit on voxel columns of the final grid. They are placed once:
    // re-snapping them as the scale moves would make the weight jump.
    let x_leg = libm::round(0.045 * spec.height_mm * s / spec.spacing_mm[0]) * spec.spacing_mm[0];
    let coarse = PhantomSpec {
        spacing_mm: spec.spacing_mm.map(|v| 2.0 * v),
        ..spec.clone()
    };
    for _ in 0..MAX_ROUNDS {
        check_scale(s)?;
        let Ok((_, _, _, _, mass)) = weigh(&coarse, s, x_leg, &jitter) else {
            break;
        };
        log::debug!("coarse: scale {s:.4}, weight error {:+.4}", (mass - target_g) / target_g);
        if ((mass - target_g) / target_g).abs() <= COARSE_TARGET {
            break;
        }
        s = update(s, mass);
    }

    // Weight is a step function of the scale: axis-aligned solids gain whole
    // voxel slabs at once. Once the target is bracketed, bisect towards the
    // step and keep the closest scale seen.
    let mut below: Option<f64> = None;
    let mut above: Option<f64> = None;
    let mut best: Option<(f64, f64, Geometry, Raster, usize, usize)> = None;
    for round in 1..=MAX_FINE_ROUNDS {
        check_scale(s)?;
        let (geom, raster, n_fat, n_muscle, mass) = weigh(spec, s, x_leg, &jitter)?;
        let err = (mass - target_g) / target_g;
        log::debug!("round {round}: scale {s:.4}, weight error {err:+.4}");
        if err < 0.0 {
            below = Some(below.map_or(s, |b: f64| b.max(s)));
        } else {
            above = Some(above.map_or(s, |a: f64| a.min(s)));
        }
        if best.as_ref().map_or(true, |b| err.abs() < b.1.abs()) {
            best = Some((s, err, geom, raster, n_fat, n_muscle));
        }
        if err.abs() <= WEIGHT_TARGET {
            break;
        }
        let next = update(s, mass);
        s = match (below, above) {
            (Some(lo), Some(hi)) if !(lo < next && next < hi) || round >= MAX_ROUNDS / 2 => 0.5 * (lo + hi),
            _ => next,
        };
    }
    let (s, err, geom, raster, n_fat, n_muscle) = best.expect("at least one round");
    if err.abs() > WEIGHT_TOLERANCE {
        return Err(Error::Infeasible(format!("weight off by {:.1}% after {MAX_FINE_ROUNDS} rounds", 100.0 * err)));
    }
    Ok(assemble(spec, geom, raster, n_fat, n_muscle, s))
}

fn assemble(spec: &PhantomSpec, geom: Geometry, raster: Raster, n_fat: usize, n_muscle: usize, s: f64) -> Phantom {
    let grid = geom.lattice.grid.clone();
    let n = grid.len();
    let bone_hu = spec.bone_hu();
    let mut hu = vec![AIR_HU; n];
    let mut tis = vec![tissue::BACKGROUND; n];
    // Depths are non-negative, so the f32 bit pattern orders like the value;
    // packing it above the index gives shallowest first, ties by index.
    let mut free: Vec<u64> = Vec::with_capacity(raster.counts.free);
    for i in 0..n {
        if raster.depth[i] < 0.0 {
            continue;
        }
        let (t, v) = match raster.structure[i] {
            0 => {
                free.push(((raster.depth[i].to_bits() as u64) << 32) | i as u64);
                (tissue::BODY, ORGAN_HU)
            }
            id => match tissue_class(id) {
                TissueClass::Bone => (tissue::BONE, bone_hu),
                TissueClass::MuscleStructure => (tissue::MUSCLE, MUSCLE_HU),
                TissueClass::Organ => (tissue::BODY, ORGAN_HU),
            },
        };
        tis[i] = t;
        hu[i] = v;
    }
    if n_fat > 0 && n_fat < free.len() {
        free.select_nth_unstable(n_fat);
    }
    let (fat, rest) = free.split_at_mut(n_fat);
    if n_muscle > 0 && n_muscle < rest.len() {
        rest.select_nth_unstable(n_muscle);
    }
    let low = |key: u64| (key & 0xffff_ffff) as usize;
    for &key in fat.iter() {
        tis[low(key)] = tissue::FAT;
        hu[low(key)] = FAT_HU;
    }
    for &key in rest[..n_muscle].iter() {
        tis[low(key)] = tissue::MUSCLE;
        hu[low(key)] = MUSCLE_HU;
    }

    let c = raster.counts;
    let voxel_mm3 = crate::volume::voxel_volume_mm3(&grid);
    let cm3 = voxel_mm3 / 1000.0;
    let fat_g = n_fat as f64 * density(FAT_HU) * cm3;
    let muscle_g = (n_muscle + c.muscle_structure) as f64 * density(MUSCLE_HU) * cm3;
    let bone_g = c.bone as f64 * density(bone_hu) * cm3;
    let other_g = (c.organ + c.free - n_fat - n_muscle) as f64 * density(ORGAN_HU) * cm3;
    let body_mass_g = fat_g + muscle_g + bone_g + other_g;
    let body_voxels = c.bone + c.muscle_structure + c.organ + c.free;

    let lv = geom.lv;
    let sz = spec.spacing_mm[2];
    let z = |k: i64| k as f64 * sz;
    let leg = z(lv.pelvis) - z(lv.knee) + geom.lower_leg_len;
    let height_breakdown = HeightBreakdown::from_segments(
        LegLengths {
            left_mm: Some(leg),
            right_mm: Some(leg),
        },
        z(lv.c7) - z(lv.pelvis),
        z(lv.c1) - z(lv.c7),
        z(lv.crown) + sz / 2.0 - z(lv.c1),
    );

    let mut landmarks = BTreeMap::new();
    for (id, p) in geom.markers {
        let i = geom.lattice.index_of_local(p);
        landmarks.insert(structure::name(id).unwrap_or("marker").to_string(), grid.world_of(i));
    }
    for (id, solid) in &geom.structures {
        if (structure::HIP_LEFT..=structure::SCAPULA_RIGHT).contains(id) {
            if let Solid::Sphere { c, .. } = solid {
                let w = linalg::add(*c, linalg::sub(grid.world_of(geom.lattice.index_of_local([0.0; 3])), [0.0; 3]));
                landmarks.insert(structure::name(*id).unwrap_or("pair").to_string(), w);
            }
        }
    }

    let truth = PhantomTruth {
        body_mass_g,
        fat_pct: 100.0 * fat_g / body_mass_g,
        muscle_pct: 100.0 * muscle_g / body_mass_g,
        bone_density_hu: f64::from(bone_hu),
        body_volume_mm3: body_voxels as f64 * voxel_mm3,
        height_breakdown,
        landmarks,
        lateral_scale: s,
    };
    let image = Volume::new(grid.clone(), VolumeData::I16(hu), Unit::Hu).expect("lengths match");
    let tissue = LabelMap::new(grid.clone(), LabelKind::Tissue, tis, default_class_table(LabelKind::Tissue)).expect("known ids");
    let structure = LabelMap::new(grid, LabelKind::Structure, raster.structure, default_class_table(LabelKind::Structure))
        .expect("known ids");
    Phantom {
        image,
        tissue,
        structure,
        truth,
    }
}
