//! File interchange: MetaImage volumes (`.mhd` + `.raw`), landmark CSV and
//! 4×4 matrix text files.
//!
//! MetaImage headers are written with the keys `ObjectType`, `NDims`,
//! `DimSize`, `ElementSpacing`, `Offset`, `TransformMatrix`, `ElementType`,
//! `ElementDataFile`, in that order. `TransformMatrix` lists the three voxel
//! axis directions one after another. Payloads are little-endian.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask3D, Volume3D};
use crate::metrics::{Landmark, LandmarkSet};
use crate::transform::{DeformationField, Matrix44};
use crate::Vec3;

/// Contents of a MetaImage file.
#[derive(Clone, Debug, PartialEq)]
pub enum Image {
    Volume(Volume3D),
    /// `MET_UCHAR` payloads containing only 0 and 1.
    Mask(Mask3D),
}

impl Image {
    pub fn grid(&self) -> &Grid {
        match self {
            Image::Volume(v) => v.grid(),
            Image::Mask(m) => m.grid(),
        }
    }

    /// Scalar view; masks become 0/1 volumes.
    pub fn into_volume(self) -> Volume3D {
        match self {
            Image::Volume(v) => v,
            Image::Mask(m) => m.to_volume(),
        }
    }
}

const DIRECTION_TOL: f64 = 1e-6;

fn header_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::MalformedHeader { path: path.to_path_buf(), line, msg: msg.into() }
}

fn parse_numbers<const N: usize>(path: &Path, line: usize, key: &str, s: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| header_err(path, line, format!("{key}: {e}")))?;
    if vals.len() != N || vals.iter().any(|v| !v.is_finite()) {
        return Err(header_err(path, line, format!("{key}: expected {N} finite numbers")));
    }
    let mut out = [0.0; N];
    out.copy_from_slice(&vals);
    Ok(out)
}

/// Reads a 3-D MetaImage. `MET_UCHAR` files whose voxels are all 0/1 load
/// as masks; other `MET_UCHAR` files load as volumes.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut keys: HashMap<String, (usize, String)> = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| header_err(path, n + 1, "expected 'key = value'"))?;
        keys.insert(k.trim().to_string(), (n + 1, v.trim().to_string()));
    }
    let get = |key: &str| {
        keys.get(key)
            .map(|(n, v)| (*n, v.as_str()))
            .ok_or_else(|| Error::MissingKey { path: path.to_path_buf(), key: key.to_string() })
    };

    let (n, object) = get("ObjectType")?;
    if object != "Image" {
        return Err(header_err(path, n, format!("ObjectType {object} is not Image")));
    }
    let (n, ndims) = get("NDims")?;
    if ndims != "3" {
        return Err(header_err(path, n, format!("NDims {ndims} is not 3")));
    }
    let (n, dim_text) = get("DimSize")?;
    let dims_f = parse_numbers::<3>(path, n, "DimSize", dim_text)?;
    if dims_f.iter().any(|&d| d < 1.0 || d.fract() != 0.0) {
        return Err(header_err(path, n, "DimSize must be positive integers"));
    }
    let dims = dims_f.map(|d| d as usize);
    let (n, s) = get("ElementSpacing")?;
    let spacing = parse_numbers::<3>(path, n, "ElementSpacing", s)?;
    let (n, s) = get("Offset")?;
    let offset = parse_numbers::<3>(path, n, "Offset", s)?;
    let (n, s) = get("TransformMatrix")?;
    let tm = parse_numbers::<9>(path, n, "TransformMatrix", s)?;
    let direction = Matrix3::from_column_slice(&tm);
    if (direction.transpose() * direction - Matrix3::identity()).abs().max() > DIRECTION_TOL {
        return Err(Error::NonOrthonormalDirection { path: path.to_path_buf() });
    }
    let (_, ty) = get("ElementType")?;
    let elem = match ty {
        "MET_FLOAT" => 4,
        "MET_UCHAR" => 1,
        other => return Err(Error::UnsupportedElementType { path: path.to_path_buf(), ty: other.to_string() }),
    };
    for flag in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB", "CompressedData"] {
        if let Some((n, v)) = keys.get(flag) {
            if v.eq_ignore_ascii_case("true") {
                return Err(header_err(path, *n, format!("{flag} = True is not supported")));
            }
        }
    }
    let (n, data_file) = get("ElementDataFile")?;
    if data_file.eq_ignore_ascii_case("LOCAL") {
        return Err(header_err(path, n, "inline payloads are not supported"));
    }
    let raw_path = path.parent().unwrap_or(Path::new("")).join(data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;

    let grid = Grid::new(dims, spacing, Vec3::from(offset), direction)?;
    let expected = grid.len() * elem;
    if bytes.len() != expected {
        return Err(Error::PayloadSizeMismatch { path: raw_path, expected, actual: bytes.len() });
    }
    if elem == 1 {
        if bytes.iter().all(|&b| b <= 1) {
            return Ok(Image::Mask(Mask3D::new(grid, bytes.iter().map(|&b| b == 1).collect())?));
        }
        return Ok(Image::Volume(Volume3D::new(grid, bytes.iter().map(|&b| b as f32).collect())?));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Image::Volume(Volume3D::new(grid, data)?))
}

/// Reads a volume, converting masks to 0/1 scalars.
pub fn read_scalar_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    Ok(read_volume(path)?.into_volume())
}

/// Reads a file that must hold a binary mask.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3D> {
    let path = path.as_ref();
    match read_volume(path)? {
        Image::Mask(m) => Ok(m),
        Image::Volume(v) => {
            if v.data().iter().all(|&x| x == 0.0 || x == 1.0) {
                Mask3D::new(v.grid().clone(), v.data().iter().map(|&x| x == 1.0).collect())
            } else {
                Err(Error::InvalidArgument(format!("{} is not a binary mask", path.display())))
            }
        }
    }
}

fn raw_name(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| format!("{s}.raw"))
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))
}

fn header(grid: &Grid, ty: &str, raw: &str) -> String {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let d = grid.dims();
    let o = grid.origin();
    let mut h = String::new();
    let _ = writeln!(h, "ObjectType = Image");
    let _ = writeln!(h, "NDims = 3");
    let _ = writeln!(h, "DimSize = {} {} {}", d[0], d[1], d[2]);
    let _ = writeln!(h, "ElementSpacing = {}", join(&grid.spacing()));
    let _ = writeln!(h, "Offset = {}", join(&[o.x, o.y, o.z]));
    let _ = writeln!(h, "TransformMatrix = {}", join(grid.direction().as_slice()));
    let _ = writeln!(h, "ElementType = {ty}");
    let _ = writeln!(h, "ElementDataFile = {raw}");
    h
}

fn write_pair(path: &Path, grid: &Grid, ty: &str, payload: &[u8]) -> Result<()> {
    let raw = raw_name(path)?;
    let raw_path = path.with_file_name(&raw);
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header(grid, ty, &raw)).map_err(|e| Error::io(path, e))
}

/// Writes `v` as `MET_FLOAT` to `path` (`.mhd`) and a sibling `.raw`.
pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(path.as_ref(), v.grid(), "MET_FLOAT", &payload)
}

/// Writes `m` as `MET_UCHAR` 0/1.
pub fn write_mask(m: &Mask3D, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = m.data().iter().map(|&b| b as u8).collect();
    write_pair(path.as_ref(), m.grid(), "MET_UCHAR", &payload)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    match img {
        Image::Volume(v) => write_volume(v, path),
        Image::Mask(m) => write_mask(m, path),
    }
}

/// Component file names for a field stored at `path`: `x.mhd` becomes
/// `x_ux.mhd`, `x_uy.mhd`, `x_uz.mhd`.
pub fn field_component_paths(path: impl AsRef<Path>) -> [PathBuf; 3] {
    let path = path.as_ref();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("field");
    ["ux", "uy", "uz"].map(|c| path.with_file_name(format!("{stem}_{c}.mhd")))
}

/// Writes the three displacement components as `MET_FLOAT` volumes
/// (values are rounded to single precision).
pub fn write_field(u: &DeformationField, path: impl AsRef<Path>) -> Result<()> {
    for (d, p) in field_component_paths(path).iter().enumerate() {
        let data = u.component(d).iter().map(|&x| x as f32).collect();
        write_volume(&Volume3D::new(u.grid().clone(), data)?, p)?;
    }
    Ok(())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    let paths = field_component_paths(path);
    let mut grid: Option<Grid> = None;
    let mut data = Vec::new();
    for p in &paths {
        let v = read_scalar_volume(p)?;
        match &grid {
            Some(g) => g.check_same(v.grid(), "field components disagree")?,
            None => grid = Some(v.grid().clone()),
        }
        data.extend(v.data().iter().map(|&x| x as f64));
    }
    DeformationField::from_planar(grid.expect("three components"), data)
}

const LANDMARK_HEADER: &str = "id,x,y,z";

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, path)
}

/// Parses landmark CSV text; `path` is only used in error messages.
pub fn parse_landmarks(text: &str, path: &Path) -> Result<LandmarkSet> {
    let bad = |line: usize, msg: String| Error::MalformedLine { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LANDMARK_HEADER => {}
        _ => return Err(bad(1, format!("expected header '{LANDMARK_HEADER}'"))),
    }
    let mut entries = Vec::new();
    for (n, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(n + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(bad(n + 1, "empty id".into()));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = fields[a + 1]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(n + 1, format!("'{}' is not a finite number", fields[a + 1])))?;
        }
        entries.push(Landmark { id: fields[0].to_string(), position: Vec3::from(p) });
    }
    LandmarkSet::new(entries)
}

pub fn format_landmarks(ls: &LandmarkSet) -> Result<String> {
    let mut out = String::from(LANDMARK_HEADER);
    out.push('\n');
    for l in ls.iter() {
        if l.id.contains(',') || l.id.contains('\n') || l.id.trim() != l.id || l.id.is_empty() {
            return Err(Error::InvalidArgument(format!("landmark id {:?} cannot be written", l.id)));
        }
        let p = l.position;
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", l.id, p.x, p.y, p.z);
    }
    Ok(out)
}

pub fn write_landmarks(ls: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_landmarks(ls)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix44> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, path)
}

pub fn parse_matrix(text: &str, path: &Path) -> Result<Matrix44> {
    let mut vals = Vec::with_capacity(16);
    for (n, line) in text.lines().enumerate() {
        for tok in line.split_whitespace() {
            let v = tok.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::MalformedLine {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("'{tok}' is not a finite number"),
            })?;
            vals.push(v);
        }
    }
    let arr: [f64; 16] =
        vals.as_slice().try_into().map_err(|_| Error::WrongCount { path: path.to_path_buf(), count: vals.len() })?;
    Matrix44::from_row_major(&arr).ok_or_else(|| Error::BadBottomRow { path: path.to_path_buf() })
}

/// Row-major, one row per line, shortest round-trip decimal form.
pub fn format_matrix(m: &Matrix44) -> String {
    let mut out = String::new();
    for row in &m.0 {
        let _ = writeln!(out, "{}", row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "));
    }
    out
}

pub fn write_matrix(m: &Matrix44, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_matrix(m)).map_err(|e| Error::io(path, e))
}
