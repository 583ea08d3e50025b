//! CTV files: a JSON header `name.ctv.json` next to a raw little-endian
//! payload `name.raw`, x-fastest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vct_core::volume::{default_class_table, Grid, LabelDtype, LabelKind, LabelMap, Unit, Volume, VolumeData};

use crate::error::{self, Result, VctError};

pub const HEADER_SUFFIX: &str = ".ctv.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Int16,
    Uint8,
    Uint16,
    Float32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Uint8 => 1,
            Dtype::Int16 | Dtype::Uint16 => 2,
            Dtype::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Image,
    Tissue,
    Structure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeaderUnit {
    #[serde(rename = "HU")]
    Hu,
    #[serde(rename = "g_per_cm3")]
    GramsPerCm3,
    #[serde(rename = "label")]
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub orientation: String,
    pub dtype: Dtype,
    pub byte_order: String,
    pub kind: Kind,
    pub unit: HeaderUnit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_table: Option<BTreeMap<u16, String>>,
    pub data_file: String,
}

impl Header {
    fn grid(&self) -> vct_core::Result<Grid> {
        Grid::new(self.dims, self.spacing_mm, self.origin_mm)
    }
}

/// `dir/name.ctv.json` for a stem `dir/name`.
pub fn header_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(HEADER_SUFFIX);
    PathBuf::from(s)
}

fn raw_name(header: &Path) -> Result<String> {
    let name = header
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| VctError::format(header, "header path has no file name"))?;
    let stem = name.strip_suffix(HEADER_SUFFIX).unwrap_or(name);
    Ok(format!("{stem}.raw"))
}

fn read_header(path: &Path) -> Result<Header> {
    let bytes = error::read(path)?;
    let h: Header = serde_json::from_slice(&bytes).map_err(|e| VctError::format(path, e.to_string()))?;
    if h.orientation != "RAS" {
        return Err(VctError::format(path, format!("orientation {} is not RAS", h.orientation)));
    }
    if h.byte_order != "little" {
        return Err(VctError::format(path, format!("byte order {} is not little", h.byte_order)));
    }
    Ok(h)
}

fn read_payload(path: &Path, h: &Header) -> Result<Vec<u8>> {
    let raw = path.parent().unwrap_or(Path::new(".")).join(&h.data_file);
    let bytes = error::read(&raw)?;
    let n: usize = h.dims.iter().product();
    if bytes.len() != n * h.dtype.size() {
        return Err(VctError::format(
            &raw,
            format!(
                "dims {:?} need {} values, payload holds {}",
                h.dims,
                n,
                bytes.len() as f64 / h.dtype.size() as f64
            ),
        ));
    }
    Ok(bytes)
}

fn decode<const N: usize, T>(bytes: &[u8], f: impl Fn([u8; N]) -> T) -> Vec<T> {
    bytes.chunks_exact(N).map(|c| f(c.try_into().expect("chunk size"))).collect()
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let raw = path.parent().unwrap_or(Path::new(".")).join(&header.data_file);
    error::write(&raw, payload)?;
    let mut json = serde_json::to_vec_pretty(header).expect("header serializes");
    json.push(b'\n');
    error::write(path, &json)
}

fn header_for(grid: &Grid, dtype: Dtype, kind: Kind, unit: HeaderUnit, path: &Path) -> Result<Header> {
    Ok(Header {
        dims: grid.dims(),
        spacing_mm: grid.spacing_mm(),
        origin_mm: grid.origin_mm(),
        orientation: "RAS".into(),
        dtype,
        byte_order: "little".into(),
        kind,
        unit,
        class_table: None,
        data_file: raw_name(path)?,
    })
}

/// Load an image. HU images are clamped to the 12-bit CT range.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let h = read_header(path)?;
    if h.kind != Kind::Image {
        return Err(VctError::format(path, "header does not describe an image"));
    }
    let unit = match h.unit {
        HeaderUnit::Hu => Unit::Hu,
        HeaderUnit::GramsPerCm3 => Unit::GramsPerCm3,
        HeaderUnit::Label => return Err(VctError::format(path, "image with label unit")),
    };
    let grid = h.grid().map_err(|e| VctError::format(path, e.to_string()))?;
    let bytes = read_payload(path, &h)?;
    let data = match h.dtype {
        Dtype::Int16 => VolumeData::I16(decode(&bytes, i16::from_le_bytes)),
        Dtype::Uint8 => VolumeData::I16(decode(&bytes, |b: [u8; 1]| i16::from(b[0]))),
        Dtype::Uint16 => VolumeData::F32(decode(&bytes, |b| f32::from(u16::from_le_bytes(b)))),
        Dtype::Float32 => VolumeData::F32(decode(&bytes, f32::from_le_bytes)),
    };
    Ok(Volume::new(grid, data, unit)?.clamp_hu())
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    let unit = match vol.unit() {
        Unit::Hu => HeaderUnit::Hu,
        Unit::GramsPerCm3 => HeaderUnit::GramsPerCm3,
    };
    let (dtype, payload) = match vol.data() {
        VolumeData::I16(v) => (Dtype::Int16, v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>()),
        VolumeData::F32(v) => (Dtype::Float32, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    let h = header_for(vol.grid(), dtype, Kind::Image, unit, path)?;
    write_pair(path, &h, &payload)
}

/// Load a label map; a missing class table means the standard one for its
/// kind.
pub fn load_labelmap(path: &Path) -> Result<LabelMap> {
    let h = read_header(path)?;
    let kind = match h.kind {
        Kind::Tissue => LabelKind::Tissue,
        Kind::Structure => LabelKind::Structure,
        Kind::Image => return Err(VctError::format(path, "header describes an image, not labels")),
    };
    let grid = h.grid().map_err(|e| VctError::format(path, e.to_string()))?;
    let bytes = read_payload(path, &h)?;
    let (dtype, data) = match h.dtype {
        Dtype::Uint8 => (LabelDtype::U8, decode(&bytes, |b: [u8; 1]| u16::from(b[0]))),
        Dtype::Uint16 => (LabelDtype::U16, decode(&bytes, u16::from_le_bytes)),
        d => return Err(VctError::format(path, format!("unsupported label dtype {d:?}"))),
    };
    let table = h.class_table.clone().unwrap_or_else(|| default_class_table(kind));
    LabelMap::with_dtype(grid, kind, dtype, data, table).map_err(|e| VctError::format(path, e.to_string()))
}

pub fn save_labelmap(map: &LabelMap, path: &Path) -> Result<()> {
    let kind = match map.kind() {
        LabelKind::Tissue => Kind::Tissue,
        LabelKind::Structure => Kind::Structure,
    };
    let (dtype, payload) = match map.dtype() {
        LabelDtype::U8 => (Dtype::Uint8, map.data().iter().map(|&v| v as u8).collect::<Vec<u8>>()),
        LabelDtype::U16 => (Dtype::Uint16, map.data().iter().flat_map(|v| v.to_le_bytes()).collect()),
    };
    let mut h = header_for(map.grid(), dtype, kind, HeaderUnit::Label, path)?;
    h.class_table = Some(map.class_table().clone());
    write_pair(path, &h, &payload)
}
