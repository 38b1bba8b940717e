//! MetaImage (.mhd + .raw) reading and writing for the small subset the
//! toolkit emits: 3-D little-endian MET_FLOAT or MET_SHORT volumes with
//! x-fastest voxel order.

use std::fs;
use std::path::Path;
use thiserror::Error;
use vgan_core::Volume;

#[derive(Debug, Error)]
pub enum MhdError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed header line")]
    MalformedLine { line: usize },
    #[error("line {line}: unknown header key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("missing header key {0}")]
    MissingKey(&'static str),
    #[error("line {line}: bad value for {key}")]
    BadValue { line: usize, key: String },
    #[error("unsupported element type {0}")]
    UnsupportedElementType(String),
    #[error("data size mismatch: header declares {expected} voxels, raw file has {actual}")]
    DataSizeMismatch { expected: usize, actual: usize },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Float,
    Short,
}

impl ElementType {
    fn name(self) -> &'static str {
        match self {
            ElementType::Float => "MET_FLOAT",
            ElementType::Short => "MET_SHORT",
        }
    }

    fn byte_size(self) -> usize {
        match self {
            ElementType::Float => 4,
            ElementType::Short => 2,
        }
    }
}

const KEYS: [&str; 9] = [
    "ObjectType",
    "NDims",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "DimSize",
    "ElementSpacing",
    "Offset",
    "ElementType",
    "ElementDataFile",
];

fn io_err(path: &Path, source: std::io::Error) -> MhdError {
    MhdError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<path>` (header) plus a raw file next to it named after the
/// header stem. MET_SHORT rounds values to the nearest representable
/// 16-bit integer; MET_FLOAT is lossless.
pub fn write_metaimage(v: &Volume, path: &Path, etype: ElementType) -> Result<(), MhdError> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    let raw_name = format!("{stem}.raw");
    let (nx, ny, nz) = v.dims();
    let (sx, sy, sz) = v.spacing();
    let (ox, oy, oz) = v.origin();
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         DimSize = {nx} {ny} {nz}\n\
         ElementSpacing = {sx} {sy} {sz}\n\
         Offset = {ox} {oy} {oz}\n\
         ElementType = {}\n\
         ElementDataFile = {raw_name}\n",
        etype.name()
    );
    fs::write(path, header).map_err(|e| io_err(path, e))?;
    let raw_path = path.with_file_name(&raw_name);
    let mut bytes = Vec::with_capacity(v.len() * etype.byte_size());
    match etype {
        ElementType::Float => {
            for &x in v.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        ElementType::Short => {
            for &x in v.data() {
                let q = x.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
                bytes.extend_from_slice(&q.to_le_bytes());
            }
        }
    }
    fs::write(&raw_path, bytes).map_err(|e| io_err(&raw_path, e))
}

pub fn read_metaimage(path: &Path) -> Result<Volume, MhdError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut fields: Vec<Option<String>> = vec![None; KEYS.len()];
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let (key, value) = raw_line
            .split_once('=')
            .ok_or(MhdError::MalformedLine { line })?;
        let key = key.trim();
        let value = value.trim().to_string();
        let slot = KEYS
            .iter()
            .position(|&k| k == key)
            .ok_or_else(|| MhdError::UnknownKey {
                line,
                key: key.to_string(),
            })?;
        fields[slot] = Some(value);
    }
    let get = |name: &'static str| -> Result<&str, MhdError> {
        let slot = KEYS.iter().position(|&k| k == name).unwrap();
        fields[slot]
            .as_deref()
            .ok_or(MhdError::MissingKey(name))
    };
    let expect = |name: &'static str, want: &str| -> Result<(), MhdError> {
        let got = get(name)?;
        if got != want {
            return Err(MhdError::BadValue {
                line: 0,
                key: name.to_string(),
            });
        }
        Ok(())
    };
    expect("ObjectType", "Image")?;
    expect("NDims", "3")?;
    expect("BinaryData", "True")?;
    expect("BinaryDataByteOrderMSB", "False")?;

    let parse3 = |name: &'static str| -> Result<[f64; 3], MhdError> {
        let parts: Vec<&str> = get(name)?.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(MhdError::BadValue {
                line: 0,
                key: name.to_string(),
            });
        }
        let mut out = [0.0; 3];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p.parse().map_err(|_| MhdError::BadValue {
                line: 0,
                key: name.to_string(),
            })?;
        }
        Ok(out)
    };
    let dims = parse3("DimSize")?;
    let (nx, ny, nz) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let spacing = parse3("ElementSpacing")?;
    let offset = parse3("Offset")?;
    let etype = match get("ElementType")? {
        "MET_FLOAT" => ElementType::Float,
        "MET_SHORT" => ElementType::Short,
        other => return Err(MhdError::UnsupportedElementType(other.to_string())),
    };
    let raw_path = path.with_file_name(get("ElementDataFile")?);
    let bytes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    let expected = nx * ny * nz;
    let actual = bytes.len() / etype.byte_size();
    if bytes.len() % etype.byte_size() != 0 || actual != expected {
        return Err(MhdError::DataSizeMismatch { expected, actual });
    }
    let data: Vec<f32> = match etype {
        ElementType::Float => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        ElementType::Short => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
    };
    Volume::new(
        (nx, ny, nz),
        (spacing[0] as f32, spacing[1] as f32, spacing[2] as f32),
        (offset[0] as f32, offset[1] as f32, offset[2] as f32),
        data,
    )
    .map_err(|e| MhdError::InvalidVolume(format!("{e:?}")))
}
