//! Read-only NIfTI-1 single-file support (`.nii`, uncompressed).
//!
//! Only affines that are axis flips and permutations of RAS are accepted;
//! the data is reordered so that index axes increase toward R, A and S.

use std::path::Path;

use vct_core::volume::{default_class_table, Grid, LabelKind, LabelMap, Unit, Volume, VolumeData};

use crate::error::{self, Result, VctError};

const HEADER_LEN: usize = 348;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Datatype {
    U8,
    I16,
    U16,
    F32,
}

struct Parsed {
    dims: [usize; 3],
    dtype: Datatype,
    slope: f64,
    inter: f64,
    /// Columns of the voxel-to-world affine, then the offset.
    cols: [[f64; 3]; 3],
    offset: [f64; 3],
    data: Vec<f64>,
}

struct Reader<'a> {
    b: &'a [u8],
    le: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a: [u8; N] = self.b[at..at + N].try_into().expect("in bounds");
        if !self.le {
            a.reverse();
        }
        a
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f64 {
        f64::from(f32::from_le_bytes(self.bytes(at)))
    }
}

fn quaternion_cols(r: &Reader<'_>, pixdim: [f64; 4]) -> [[f64; 3]; 3] {
    let (b, c, d) = (r.f32(256), r.f32(260), r.f32(264));
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let m = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = [pixdim[1], pixdim[2], pixdim[3] * qfac];
    let mut cols = [[0.0; 3]; 3];
    for (j, col) in cols.iter_mut().enumerate() {
        for (i, v) in col.iter_mut().enumerate() {
            *v = m[i][j] * scale[j];
        }
    }
    cols
}

fn parse(path: &Path, b: &[u8]) -> Result<Parsed> {
    let bad = |m: &str| VctError::format(path, m.to_string());
    if b.len() < HEADER_LEN {
        return Err(bad("shorter than a NIfTI-1 header"));
    }
    let le = if i32::from_le_bytes(b[0..4].try_into().unwrap()) == HEADER_LEN as i32 {
        true
    } else if i32::from_be_bytes(b[0..4].try_into().unwrap()) == HEADER_LEN as i32 {
        false
    } else {
        return Err(bad("sizeof_hdr is not 348"));
    };
    if &b[344..348] != b"n+1\0" {
        return Err(bad("not a single-file NIfTI-1 (magic n+1)"));
    }
    let r = Reader { b, le };
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(bad("dim[0] out of range"));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = r.i16(42 + 2 * a);
        if v < 1 {
            return Err(bad("nonpositive dimension"));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        if r.i16(42 + 2 * a) > 1 {
            return Err(bad("only single 3D volumes are supported"));
        }
    }
    let dtype = match r.i16(70) {
        2 => Datatype::U8,
        4 => Datatype::I16,
        16 => Datatype::F32,
        512 => Datatype::U16,
        t => return Err(bad(&format!("unsupported datatype code {t}"))),
    };
    let size = match dtype {
        Datatype::U8 => 1,
        Datatype::I16 | Datatype::U16 => 2,
        Datatype::F32 => 4,
    };
    let pixdim = [r.f32(76), r.f32(80), r.f32(84), r.f32(88)];
    let vox_offset = r.f32(108).max(HEADER_LEN as f64) as usize;
    let (slope, inter) = (r.f32(112), r.f32(116));
    let (qcode, scode) = (r.i16(252), r.i16(254));
    let (cols, offset) = if scode > 0 {
        let row = |at: usize| [r.f32(at), r.f32(at + 4), r.f32(at + 8), r.f32(at + 12)];
        let (x, y, z) = (row(280), row(296), row(312));
        ([[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]], [x[3], y[3], z[3]])
    } else if qcode > 0 {
        (quaternion_cols(&r, pixdim), [r.f32(268), r.f32(272), r.f32(276)])
    } else {
        (
            [[pixdim[1].abs(), 0.0, 0.0], [0.0, pixdim[2].abs(), 0.0], [0.0, 0.0, pixdim[3].abs()]],
            [0.0; 3],
        )
    };
    let n: usize = dims.iter().product();
    let end = vox_offset + n * size;
    if b.len() < end {
        return Err(bad(&format!("payload holds fewer than the {n} values the header declares")));
    }
    let raw = &b[vox_offset..end];
    let rd = Reader { b: raw, le };
    let data = (0..n)
        .map(|i| match dtype {
            Datatype::U8 => f64::from(raw[i]),
            Datatype::I16 => f64::from(rd.i16(2 * i)),
            Datatype::U16 => f64::from(u16::from_le_bytes(rd.bytes(2 * i))),
            Datatype::F32 => rd.f32(4 * i),
        })
        .collect();
    Ok(Parsed {
        dims,
        dtype,
        slope,
        inter,
        cols,
        offset,
        data,
    })
}

/// Reorder to RAS index axes. Returns the grid and the permuted values.
fn to_ras(path: &Path, p: &Parsed) -> Result<(Grid, Vec<f64>)> {
    let mut world_axis = [0usize; 3];
    let mut flip = [false; 3];
    let mut spacing = [0.0; 3];
    for a in 0..3 {
        let c = p.cols[a];
        let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        let w = (0..3).max_by(|&i, &j| c[i].abs().total_cmp(&c[j].abs())).unwrap();
        if norm == 0.0 || (0..3).any(|i| i != w && c[i].abs() > 1e-6 * norm) {
            return Err(VctError::format(path, "oblique affine; only flips and permutations of RAS are supported"));
        }
        world_axis[a] = w;
        flip[a] = c[w] < 0.0;
        spacing[w] = c[w].abs();
    }
    let mut seen = [false; 3];
    for &w in &world_axis {
        if std::mem::replace(&mut seen[w], true) {
            return Err(VctError::format(path, "affine maps two axes onto one world axis"));
        }
    }
    let mut dims = [0usize; 3];
    let mut origin = p.offset;
    for a in 0..3 {
        dims[world_axis[a]] = p.dims[a];
        if flip[a] {
            for (o, c) in origin.iter_mut().zip(p.cols[a]) {
                *o += c * (p.dims[a] - 1) as f64;
            }
        }
    }
    let grid = Grid::new(dims, spacing, origin).map_err(|e| VctError::format(path, e.to_string()))?;
    let mut out = vec![0.0; p.data.len()];
    let mut i = 0;
    for k in 0..p.dims[2] {
        for j in 0..p.dims[1] {
            for x in 0..p.dims[0] {
                let mut o = [0usize; 3];
                for (a, v) in [x, j, k].into_iter().enumerate() {
                    o[world_axis[a]] = if flip[a] { p.dims[a] - 1 - v } else { v };
                }
                out[grid.index(o[0], o[1], o[2])] = p.data[i];
                i += 1;
            }
        }
    }
    Ok((grid, out))
}

/// Load a NIfTI-1 image as HU, applying `scl_slope`/`scl_inter` when set.
pub fn load_nifti_volume(path: &Path) -> Result<Volume> {
    let bytes = error::read(path)?;
    let p = parse(path, &bytes)?;
    let (grid, values) = to_ras(path, &p)?;
    let scaled = p.slope != 0.0 && (p.slope != 1.0 || p.inter != 0.0);
    let data = if p.dtype == Datatype::I16 && !scaled {
        VolumeData::I16(values.iter().map(|&v| v as i16).collect())
    } else if scaled {
        VolumeData::F32(values.iter().map(|&v| (v * p.slope + p.inter) as f32).collect())
    } else {
        VolumeData::F32(values.iter().map(|&v| v as f32).collect())
    };
    Ok(Volume::new(grid, data, Unit::Hu)?.clamp_hu())
}

/// Load a NIfTI-1 integer segmentation with the standard class table of
/// `kind`.
pub fn load_nifti_labels(path: &Path, kind: LabelKind) -> Result<LabelMap> {
    let bytes = error::read(path)?;
    let p = parse(path, &bytes)?;
    if p.dtype == Datatype::F32 {
        return Err(VctError::format(path, "float32 label maps are not supported"));
    }
    let (grid, values) = to_ras(path, &p)?;
    if values.iter().any(|&v| v < 0.0) {
        return Err(VctError::format(path, "negative label id"));
    }
    let data = values.iter().map(|&v| v as u16).collect();
    LabelMap::new(grid, kind, data, default_class_table(kind)).map_err(|e| VctError::format(path, e.to_string()))
}

pub fn is_nifti(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Minimal little-endian NIfTI-1 file with an sform.
    pub(crate) fn build(dims: [i16; 3], datatype: i16, srows: [[f32; 4]; 3], payload: &[u8]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes());
        for (a, d) in dims.iter().enumerate() {
            h[42 + 2 * a..44 + 2 * a].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[254..256].copy_from_slice(&1i16.to_le_bytes());
        for (r, row) in srows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let at = 280 + 16 * r + 4 * c;
                h[at..at + 4].copy_from_slice(&v.to_le_bytes());
            }
        }
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    fn ints(v: &[i16]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn identity_affine_reads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nii");
        let rows = [[1.0, 0.0, 0.0, 5.0], [0.0, 2.0, 0.0, 6.0], [0.0, 0.0, 3.0, 7.0]];
        std::fs::write(&p, build([2, 2, 1], 4, rows, &ints(&[1, 2, 3, 4]))).unwrap();
        let v = load_nifti_volume(&p).unwrap();
        assert_eq!(v.grid().spacing_mm(), [1.0, 2.0, 3.0]);
        assert_eq!(v.grid().origin_mm(), [5.0, 6.0, 7.0]);
        assert_eq!((0..4).map(|i| v.get(i)).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flipped_x_is_reordered() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.nii");
        // Stored with x decreasing: index 0 sits at x = 10.
        let rows = [[-1.0, 0.0, 0.0, 10.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        std::fs::write(&p, build([3, 1, 1], 4, rows, &ints(&[1, 2, 3]))).unwrap();
        let v = load_nifti_volume(&p).unwrap();
        assert_eq!(v.grid().origin_mm(), [8.0, 0.0, 0.0]);
        assert_eq!((0..3).map(|i| v.get(i)).collect::<Vec<_>>(), vec![3.0, 2.0, 1.0]);
        // World positions are preserved.
        assert_eq!(v.grid().world([2, 0, 0]), [10.0, 0.0, 0.0]);
    }

    #[test]
    fn swapped_axes_are_permuted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        let rows = [[0.0, 2.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        std::fs::write(&p, build([3, 2, 1], 4, rows, &ints(&[0, 1, 2, 10, 11, 12]))).unwrap();
        let v = load_nifti_volume(&p).unwrap();
        assert_eq!(v.grid().dims(), [2, 3, 1]);
        assert_eq!(v.grid().spacing_mm(), [2.0, 1.0, 1.0]);
        // Stored (i=2, j=1) sits at world (2, 2): new index (1, 2).
        assert_eq!(v.get(v.grid().index(1, 2, 0)), 12.0);
    }

    #[test]
    fn oblique_and_truncated_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.nii");
        let rows = [[0.7, 0.7, 0.0, 0.0], [-0.7, 0.7, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        std::fs::write(&p, build([1, 1, 1], 4, rows, &ints(&[0]))).unwrap();
        assert!(load_nifti_volume(&p).unwrap_err().to_string().contains("oblique"));
        let id = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        std::fs::write(&p, build([2, 2, 2], 4, id, &ints(&[0; 7]))).unwrap();
        assert!(load_nifti_volume(&p).is_err());
    }

    #[test]
    fn uint8_labels_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.nii");
        let id = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        std::fs::write(&p, build([2, 1, 1], 2, id, &[0, 3])).unwrap();
        let m = load_nifti_labels(&p, LabelKind::Tissue).unwrap();
        assert_eq!(m.data(), &[0, 3]);
    }
}
