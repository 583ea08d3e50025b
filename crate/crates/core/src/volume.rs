//! Volumetric data model: grids, CT volumes, label maps and resampling.
//!
//! All arrays are stored x-fastest: the voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. World coordinates are RAS millimetres with
//! `world = origin + index * spacing` taken elementwise.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::Vec3;
use crate::{Error, Result};

/// Lowest HU kept on load (12-bit CT convention).
pub const HU_MIN: f64 = -1024.0;
/// Highest HU kept on load.
pub const HU_MAX: f64 = 3071.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid("every dimension must be at least 1".into()));
        }
        if dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(Error::InvalidGrid("voxel count overflows".into()));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid("spacing must be positive and finite".into()));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(Self {
            dims,
            spacing_mm,
            origin_mm,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let yz = i / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    /// World position of the voxel centre at integer index `ijk`.
    #[inline]
    pub fn world(&self, ijk: [usize; 3]) -> Vec3 {
        [
            self.origin_mm[0] + ijk[0] as f64 * self.spacing_mm[0],
            self.origin_mm[1] + ijk[1] as f64 * self.spacing_mm[1],
            self.origin_mm[2] + ijk[2] as f64 * self.spacing_mm[2],
        ]
    }

    #[inline]
    pub fn world_of(&self, i: usize) -> Vec3 {
        self.world(self.coords(i))
    }

    /// Continuous voxel coordinates of a world point.
    #[inline]
    pub fn continuous_index(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.origin_mm[0]) / self.spacing_mm[0],
            (p[1] - self.origin_mm[1]) / self.spacing_mm[1],
            (p[2] - self.origin_mm[2]) / self.spacing_mm[2],
        ]
    }

    /// Linear index of the voxel nearest to `p`, or `None` outside the grid.
    pub fn nearest(&self, p: Vec3) -> Option<usize> {
        let c = self.continuous_index(p);
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let r = libm::round(c[a]);
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            ijk[a] = r as usize;
        }
        Some(self.index(ijk[0], ijk[1], ijk[2]))
    }

    /// Same grid with every spacing multiplied by `factor` (origin scaled too).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Grid::new(
            self.dims,
            [
                self.spacing_mm[0] * factor,
                self.spacing_mm[1] * factor,
                self.spacing_mm[2] * factor,
            ],
            [
                self.origin_mm[0] * factor,
                self.origin_mm[1] * factor,
                self.origin_mm[2] * factor,
            ],
        )
    }

    pub fn with_origin(&self, origin_mm: [f64; 3]) -> Result<Self> {
        Grid::new(self.dims, self.spacing_mm, origin_mm)
    }

    /// Two grids describe the same voxels (dims exact, geometry to 1e-9 mm).
    pub fn same_as(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing_mm[a] - other.spacing_mm[a]).abs() <= 1e-9
                    && (self.origin_mm[a] - other.origin_mm[a]).abs() <= 1e-9
            })
    }
}

/// Volume of one voxel in mm³.
pub fn voxel_volume_mm3(grid: &Grid) -> f64 {
    let s = grid.spacing_mm();
    s[0] * s[1] * s[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "HU")]
    Hu,
    #[serde(rename = "g_per_cm3")]
    GramsPerCm3,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::I16(v) => v.len(),
            VolumeData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            VolumeData::I16(v) => f64::from(v[i]),
            VolumeData::F32(v) => f64::from(v[i]),
        }
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            VolumeData::I16(_) => "int16",
            VolumeData::F32(_) => "float32",
        }
    }
}

/// A scalar CT image on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: VolumeData,
    unit: Unit,
}

impl Volume {
    pub fn new(grid: Grid, data: VolumeData, unit: Unit) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        Ok(Self { grid, data, unit })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data.get(i)
    }

    pub fn into_parts(self) -> (Grid, VolumeData, Unit) {
        (self.grid, self.data, self.unit)
    }

    /// Clamp HU values into [`HU_MIN`], [`HU_MAX`]; no-op for density volumes.
    pub fn clamp_hu(mut self) -> Self {
        if self.unit == Unit::Hu {
            match &mut self.data {
                VolumeData::I16(v) => {
                    for x in v.iter_mut() {
                        *x = (*x).clamp(HU_MIN as i16, HU_MAX as i16);
                    }
                }
                VolumeData::F32(v) => {
                    for x in v.iter_mut() {
                        if x.is_nan() {
                            continue;
                        }
                        *x = x.clamp(HU_MIN as f32, HU_MAX as f32);
                    }
                }
            }
        }
        self
    }

    /// Same data reinterpreted on a grid with identical dims.
    pub fn with_grid(mut self, grid: Grid) -> Result<Self> {
        if grid.dims() != self.grid.dims() {
            return Err(Error::GridMismatch);
        }
        self.grid = grid;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Tissue,
    Structure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelDtype {
    U8,
    U16,
}

/// Tissue map ids.
pub mod tissue {
    pub const BACKGROUND: u16 = 0;
    pub const BODY: u16 = 1;
    pub const FAT: u16 = 2;
    pub const MUSCLE: u16 = 3;
    pub const BONE: u16 = 4;

    pub const NAMES: [(u16, &str); 4] = [(BODY, "body"), (FAT, "fat"), (MUSCLE, "muscle"), (BONE, "bone")];
}

/// Structure map ids: the 16 merged organ classes followed by skeletal
/// landmarks.
pub mod structure {
    pub const BONE: u16 = 1;
    pub const SPLEEN: u16 = 2;
    pub const KIDNEY: u16 = 3;
    pub const LIVER: u16 = 4;
    pub const LUNG_UPPER_LOBES: u16 = 5;
    pub const LUNG_LOWER_LOBES: u16 = 6;
    pub const LUNG_MIDDLE_LOBE: u16 = 7;
    pub const URINARY_BLADDER: u16 = 8;
    pub const PROSTATE: u16 = 9;
    pub const HEART: u16 = 10;
    pub const AORTA: u16 = 11;
    pub const GLUTEUS_MUSCLES: u16 = 12;
    pub const AUTOCHTHONOUS_MUSCLES: u16 = 13;
    pub const ILIOPSOAS: u16 = 14;
    pub const BRAIN: u16 = 15;
    pub const APPENDICULAR_BONES: u16 = 16;

    pub const C1: u16 = 20;
    pub const C2: u16 = 21;
    pub const C7: u16 = 22;
    pub const FEMUR_LEFT: u16 = 23;
    pub const FEMUR_RIGHT: u16 = 24;
    pub const TIBIA_LEFT: u16 = 25;
    pub const TIBIA_RIGHT: u16 = 26;
    pub const HIP_LEFT: u16 = 27;
    pub const HIP_RIGHT: u16 = 28;
    pub const CLAVICLE_LEFT: u16 = 29;
    pub const CLAVICLE_RIGHT: u16 = 30;
    pub const SCAPULA_LEFT: u16 = 31;
    pub const SCAPULA_RIGHT: u16 = 32;

    pub const NAMES: [(u16, &str); 29] = [
        (BONE, "bone"),
        (SPLEEN, "spleen"),
        (KIDNEY, "kidney"),
        (LIVER, "liver"),
        (LUNG_UPPER_LOBES, "lung_upper_lobes"),
        (LUNG_LOWER_LOBES, "lung_lower_lobes"),
        (LUNG_MIDDLE_LOBE, "lung_middle_lobe"),
        (URINARY_BLADDER, "urinary_bladder"),
        (PROSTATE, "prostate"),
        (HEART, "heart"),
        (AORTA, "aorta"),
        (GLUTEUS_MUSCLES, "gluteus_muscles"),
        (AUTOCHTHONOUS_MUSCLES, "autochthonous_muscles"),
        (ILIOPSOAS, "iliopsoas"),
        (BRAIN, "brain"),
        (APPENDICULAR_BONES, "appendicular_bones"),
        (C1, "vertebrae_C1"),
        (C2, "vertebrae_C2"),
        (C7, "vertebrae_C7"),
        (FEMUR_LEFT, "femur_left"),
        (FEMUR_RIGHT, "femur_right"),
        (TIBIA_LEFT, "tibia_left"),
        (TIBIA_RIGHT, "tibia_right"),
        (HIP_LEFT, "hip_left"),
        (HIP_RIGHT, "hip_right"),
        (CLAVICLE_LEFT, "clavicle_left"),
        (CLAVICLE_RIGHT, "clavicle_right"),
        (SCAPULA_LEFT, "scapula_left"),
        (SCAPULA_RIGHT, "scapula_right"),
    ];

    /// The organ classes reported in consistency tables.
    pub const ORGANS: core::ops::RangeInclusive<u16> = 1..=16;

    pub fn name(id: u16) -> Option<&'static str> {
        NAMES.iter().find(|(i, _)| *i == id).map(|(_, n)| *n)
    }
}

/// Standard class table for a label kind.
pub fn default_class_table(kind: LabelKind) -> BTreeMap<u16, String> {
    match kind {
        LabelKind::Tissue => tissue::NAMES.iter().map(|(i, n)| (*i, n.to_string())).collect(),
        LabelKind::Structure => structure::NAMES
            .iter()
            .map(|(i, n)| (*i, n.to_string()))
            .collect(),
    }
}

/// An integer segmentation sharing a volume's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    kind: LabelKind,
    dtype: LabelDtype,
    data: Vec<u16>,
    class_table: BTreeMap<u16, String>,
}

impl LabelMap {
    pub fn new(
        grid: Grid,
        kind: LabelKind,
        data: Vec<u16>,
        class_table: BTreeMap<u16, String>,
    ) -> Result<Self> {
        let dtype = if data.iter().all(|&v| v <= u16::from(u8::MAX)) {
            LabelDtype::U8
        } else {
            LabelDtype::U16
        };
        Self::with_dtype(grid, kind, dtype, data, class_table)
    }

    pub fn with_dtype(
        grid: Grid,
        kind: LabelKind,
        dtype: LabelDtype,
        data: Vec<u16>,
        class_table: BTreeMap<u16, String>,
    ) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        if dtype == LabelDtype::U8 {
            if let Some(&v) = data.iter().find(|&&v| v > u16::from(u8::MAX)) {
                return Err(Error::UnknownLabel(v));
            }
        }
        let mut seen = [false; 65536];
        for &v in &data {
            seen[v as usize] = true;
        }
        for (id, present) in seen.iter().enumerate().skip(1) {
            if *present && !class_table.contains_key(&(id as u16)) {
                return Err(Error::UnknownLabel(id as u16));
            }
        }
        Ok(Self {
            grid,
            kind,
            dtype,
            data,
            class_table,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn dtype(&self) -> LabelDtype {
        self.dtype
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn class_table(&self) -> &BTreeMap<u16, String> {
        &self.class_table
    }

    #[inline]
    pub fn get(&self, i: usize) -> u16 {
        self.data[i]
    }

    pub fn count(&self, id: u16) -> usize {
        self.data.iter().filter(|&&v| v == id).count()
    }

    /// Linear indices of voxels labelled `id`, ascending.
    pub fn indices_of(&self, id: u16) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == id).then_some(i))
            .collect()
    }

    /// Ids present in the map (excluding background), ascending.
    pub fn present_ids(&self) -> Vec<u16> {
        let mut seen = alloc::vec![false; 65536];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=u16::MAX).filter(|&i| seen[i as usize]).collect()
    }

    pub fn mask_where(&self, pred: impl Fn(u16) -> bool) -> Mask {
        Mask {
            grid: self.grid.clone(),
            bits: self.data.iter().map(|&v| pred(v)).collect(),
        }
    }

    pub fn mask_of(&self, id: u16) -> Mask {
        self.mask_where(|v| v == id)
    }

    /// Foreground (any nonzero id).
    pub fn foreground(&self) -> Mask {
        self.mask_where(|v| v != 0)
    }

    pub fn with_grid(mut self, grid: Grid) -> Result<Self> {
        if grid.dims() != self.grid.dims() {
            return Err(Error::GridMismatch);
        }
        self.grid = grid;
        Ok(self)
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }
}

/// A binary voxel mask on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: Grid,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: bits.len(),
            });
        }
        Ok(Self { grid, bits })
    }

    pub fn empty(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            bits: alloc::vec![false; n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::GridMismatch);
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

fn resampled_grid(grid: &Grid, target_spacing_mm: [f64; 3]) -> Result<Grid> {
    if target_spacing_mm.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::arg("target spacing must be positive and finite"));
    }
    let dims = grid.dims();
    let sp = grid.spacing_mm();
    let mut out = [0usize; 3];
    for a in 0..3 {
        let extent = dims[a] as f64 * sp[a] / target_spacing_mm[a];
        // Guard against ceil(2.0000000000000004) = 3 from representation error.
        let r = libm::round(extent);
        out[a] = if (extent - r).abs() < 1e-9 { r as usize } else { libm::ceil(extent) as usize };
        out[a] = out[a].max(1);
    }
    Grid::new(out, target_spacing_mm, grid.origin_mm())
}

/// Continuous source index of output voxel `j` along one axis, clamped to the
/// source extent.
#[inline]
fn source_coord(j: usize, target: f64, source: f64, n: usize) -> f64 {
    let c = j as f64 * target / source;
    c.clamp(0.0, (n - 1) as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // Written as a + (b - a) t so that equal endpoints reproduce exactly.
    a + (b - a) * t
}

/// Resample a volume onto a new spacing. Output voxel `j` samples the source
/// at world position `origin + j * target_spacing`, clamped at the edges.
pub fn resample_volume(vol: &Volume, target_spacing_mm: [f64; 3], mode: Interpolation) -> Result<Volume> {
    let src = vol.grid();
    let out_grid = resampled_grid(src, target_spacing_mm)?;
    if out_grid.same_as(src) {
        return Ok(vol.clone());
    }
    let sd = src.dims();
    let ss = src.spacing_mm();
    let od = out_grid.dims();
    let mut values = Vec::with_capacity(out_grid.len());
    for k in 0..od[2] {
        let cz = source_coord(k, target_spacing_mm[2], ss[2], sd[2]);
        for j in 0..od[1] {
            let cy = source_coord(j, target_spacing_mm[1], ss[1], sd[1]);
            for i in 0..od[0] {
                let cx = source_coord(i, target_spacing_mm[0], ss[0], sd[0]);
                let v = match mode {
                    Interpolation::Nearest => {
                        let idx = src.index(
                            libm::round(cx) as usize,
                            libm::round(cy) as usize,
                            libm::round(cz) as usize,
                        );
                        vol.get(idx)
                    }
                    Interpolation::Trilinear => trilinear(vol, [cx, cy, cz]),
                };
                values.push(v);
            }
        }
    }
    let data = match vol.data() {
        VolumeData::I16(_) => VolumeData::I16(
            values
                .iter()
                .map(|&v| libm::round(v).clamp(i16::MIN as f64, i16::MAX as f64) as i16)
                .collect(),
        ),
        VolumeData::F32(_) => VolumeData::F32(values.iter().map(|&v| v as f32).collect()),
    };
    Volume::new(out_grid, data, vol.unit())
}

fn trilinear(vol: &Volume, c: Vec3) -> f64 {
    let g = vol.grid();
    let d = g.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let f = libm::floor(c[a]);
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(d[a] - 1);
        t[a] = c[a] - f;
    }
    let v = |x: usize, y: usize, z: usize| vol.get(g.index(x, y, z));
    let c00 = lerp(v(lo[0], lo[1], lo[2]), v(hi[0], lo[1], lo[2]), t[0]);
    let c10 = lerp(v(lo[0], hi[1], lo[2]), v(hi[0], hi[1], lo[2]), t[0]);
    let c01 = lerp(v(lo[0], lo[1], hi[2]), v(hi[0], lo[1], hi[2]), t[0]);
    let c11 = lerp(v(lo[0], hi[1], hi[2]), v(hi[0], hi[1], hi[2]), t[0]);
    let c0 = lerp(c00, c10, t[1]);
    let c1 = lerp(c01, c11, t[1]);
    lerp(c0, c1, t[2])
}

/// Nearest-neighbour resampling of a label map. Trilinear interpolation is
/// rejected because it would invent ids.
pub fn resample_labels(map: &LabelMap, target_spacing_mm: [f64; 3], mode: Interpolation) -> Result<LabelMap> {
    if mode != Interpolation::Nearest {
        return Err(Error::arg("label maps can only be resampled with nearest-neighbour"));
    }
    let src = map.grid();
    let out_grid = resampled_grid(src, target_spacing_mm)?;
    if out_grid.same_as(src) {
        return Ok(map.clone());
    }
    let sd = src.dims();
    let ss = src.spacing_mm();
    let od = out_grid.dims();
    let mut data = Vec::with_capacity(out_grid.len());
    for k in 0..od[2] {
        let z = libm::round(source_coord(k, target_spacing_mm[2], ss[2], sd[2])) as usize;
        for j in 0..od[1] {
            let y = libm::round(source_coord(j, target_spacing_mm[1], ss[1], sd[1])) as usize;
            for i in 0..od[0] {
                let x = libm::round(source_coord(i, target_spacing_mm[0], ss[0], sd[0])) as usize;
                data.push(map.get(src.index(x, y, z)));
            }
        }
    }
    LabelMap::with_dtype(out_grid, map.kind(), map.dtype(), data, map.class_table().clone())
}
