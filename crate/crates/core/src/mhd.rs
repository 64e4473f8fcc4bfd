//! MetaImage (`.mhd` header + `.raw` payload) reading and writing.
//!
//! Only uncompressed little-endian 3D scalar images are supported. Volumes
//! are written as `MET_FLOAT`, label volumes as `MET_UCHAR`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{ChannelKind, Geometry, LabelVolume, Volume3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
    UChar,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_FLOAT" => Ok(ElementType::Float),
            "MET_UCHAR" => Ok(ElementType::UChar),
            other => Err(Error::format(
                "ElementType",
                format!("unsupported element type `{other}`"),
            )),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
            ElementType::UChar => "MET_UCHAR",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
            ElementType::UChar => 1,
        }
    }
}

/// Parsed header fields we act on.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaHeader {
    pub geometry: Geometry,
    pub element_type: ElementType,
    pub data_file: PathBuf,
}

const IGNORED_KEYS: &[&str] = &[
    "BinaryData",
    "TransformMatrix",
    "Rotation",
    "Orientation",
    "CenterOfRotation",
    "AnatomicalOrientation",
    "Comment",
    "Modality",
];

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(
            key,
            format!("expected 3 values, found {} in `{value}`", parts.len()),
        ));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::format(key, format!("cannot parse `{p}`")))?,
        );
    }
    match <[T; 3]>::try_from(out) {
        Ok(arr) => Ok(arr),
        Err(_) => unreachable!(),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::format(key, format!("expected True/False, got `{value}`"))),
    }
}

/// Parses header text. `header_dir` resolves a relative `ElementDataFile`.
pub fn parse_header(text: &str, header_dir: &Path) -> Result<MetaHeader> {
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(
                format!("line {}", lineno + 1),
                format!("expected `Key = Value`, got `{line}`"),
            ));
        };
        fields.insert(key.trim(), value.trim());
    }

    for (&key, &value) in &fields {
        match key {
            "ObjectType" | "NDims" | "DimSize" | "ElementType" | "ElementSpacing" | "Offset"
            | "Origin" | "Position" | "ElementDataFile" => {}
            "BinaryDataByteOrderMSB" | "ByteOrderMSB" => {
                if parse_bool(key, value)? {
                    return Err(Error::format(key, "big-endian payloads are not supported"));
                }
            }
            "CompressedData" => {
                if parse_bool(key, value)? {
                    return Err(Error::format(key, "compressed payloads are not supported"));
                }
            }
            "ElementNumberOfChannels" => {
                if value != "1" {
                    return Err(Error::format(key, "only scalar images are supported"));
                }
            }
            k if IGNORED_KEYS.contains(&k) => {}
            other => log::warn!("ignoring unknown MetaImage key `{other}`"),
        }
    }

    if let Some(obj) = fields.get("ObjectType") {
        if *obj != "Image" {
            return Err(Error::format("ObjectType", format!("expected Image, got `{obj}`")));
        }
    }
    if let Some(nd) = fields.get("NDims") {
        if nd.parse::<usize>().ok() != Some(3) {
            return Err(Error::format("NDims", format!("expected 3, got `{nd}`")));
        }
    }
    let dims: [usize; 3] = parse_triple(
        "DimSize",
        fields
            .get("DimSize")
            .ok_or_else(|| Error::format("DimSize", "missing"))?,
    )?;
    let spacing: [f64; 3] = match fields.get("ElementSpacing") {
        Some(v) => parse_triple("ElementSpacing", v)?,
        None => [1.0; 3],
    };
    let origin_key = ["Offset", "Origin", "Position"]
        .into_iter()
        .find(|k| fields.contains_key(k));
    let origin: [f64; 3] = match origin_key {
        Some(k) => parse_triple(k, fields[k])?,
        None => [0.0; 3],
    };
    let element_type = ElementType::parse(
        fields
            .get("ElementType")
            .ok_or_else(|| Error::format("ElementType", "missing"))?,
    )?;
    let data_file = fields
        .get("ElementDataFile")
        .ok_or_else(|| Error::format("ElementDataFile", "missing"))?;
    if data_file.eq_ignore_ascii_case("LOCAL") || data_file.starts_with("LIST") {
        return Err(Error::format(
            "ElementDataFile",
            format!("`{data_file}` is not supported; a separate raw file is required"),
        ));
    }
    let geometry = Geometry::new(dims, spacing, origin).map_err(|e| match e {
        Error::Geometry(msg) => Error::format("DimSize/ElementSpacing", msg),
        other => other,
    })?;
    Ok(MetaHeader {
        geometry,
        element_type,
        data_file: header_dir.join(data_file),
    })
}

/// Parses only the header file, leaving the payload untouched.
pub fn read_header(path: impl AsRef<Path>) -> Result<MetaHeader> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_header(&text, path.parent().unwrap_or_else(|| Path::new(".")))
}

fn read_payload(path: &Path) -> Result<(MetaHeader, Vec<f64>)> {
    let header = read_header(path)?;
    let bytes = fs::read(&header.data_file).map_err(|e| Error::io(&header.data_file, e))?;
    let n = header.geometry.len();
    let expected = (n * header.element_type.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Size {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data: Vec<f64> = match header.element_type {
        ElementType::Float => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        ElementType::Short => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        ElementType::UChar => bytes.iter().map(|&b| b as f64).collect(),
    };
    Ok((header, data))
}

/// Reads a scalar volume. Integer element types are converted without rescaling.
pub fn read_mhd(path: impl AsRef<Path>) -> Result<Volume3> {
    let (header, data) = read_payload(path.as_ref())?;
    Volume3::new(header.geometry, data, ChannelKind::Generic)
}

/// Reads a label volume; every voxel must hold an integral class id in `{0, 1, 2}`.
pub fn read_label_mhd(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let (header, data) = read_payload(path.as_ref())?;
    let mut labels = Vec::with_capacity(data.len());
    for (i, v) in data.into_iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=2.0).contains(&v) {
            return Err(Error::format(
                "ElementDataFile",
                format!("voxel {i} holds {v}, which is not a class id"),
            ));
        }
        labels.push(v as u8);
    }
    LabelVolume::new(header.geometry, labels)
}

fn raw_path_for(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn write_pair(path: &Path, geometry: &Geometry, element_type: ElementType, payload: &[u8]) -> Result<()> {
    let raw = raw_path_for(path);
    let raw_name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Parameter(format!("cannot derive raw file name from {}", path.display())))?;
    let [nx, ny, nz] = geometry.dims;
    let [sx, sy, sz] = geometry.spacing;
    let [ox, oy, oz] = geometry.origin;
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         Offset = {ox} {oy} {oz}\n\
         ElementSpacing = {sx} {sy} {sz}\n\
         DimSize = {nx} {ny} {nz}\n\
         ElementType = {}\n\
         ElementDataFile = {raw_name}\n",
        element_type.tag()
    );
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes `vol` as a `MET_FLOAT` header/raw pair. The raw file takes the
/// header's name with a `.raw` extension. Values are narrowed to `f32`.
pub fn write_mhd(vol: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::with_capacity(vol.data().len() * 4);
    for &v in vol.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_pair(path.as_ref(), vol.geometry(), ElementType::Float, &payload)
}

pub fn write_label_mhd(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_pair(path.as_ref(), labels.geometry(), ElementType::UChar, labels.labels())
}
