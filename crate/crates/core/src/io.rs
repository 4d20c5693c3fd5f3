//! MetaImage (`.mhd` header + `.raw` data) reading and writing.
//!
//! Intensity volumes are stored as little-endian `MET_FLOAT`; displacement
//! fields as `MET_DOUBLE` with three interleaved channels, x fastest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, GridDomain, ScalarVolume, Vec3, AIR_HU};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ElementType {
    UChar,
    Short,
    Float,
    Double,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "MET_UCHAR" => Self::UChar,
            "MET_SHORT" => Self::Short,
            "MET_FLOAT" => Self::Float,
            "MET_DOUBLE" => Self::Double,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::UChar => "MET_UCHAR",
            Self::Short => "MET_SHORT",
            Self::Float => "MET_FLOAT",
            Self::Double => "MET_DOUBLE",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::UChar => 1,
            Self::Short => 2,
            Self::Float => 4,
            Self::Double => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::UChar => f64::from(b[0]),
            Self::Short => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Self::Float => f64::from(f32::from_le_bytes(b.try_into().unwrap())),
            Self::Double => f64::from_le_bytes(b.try_into().unwrap()),
        }
    }
}

struct Header {
    domain: GridDomain,
    channels: usize,
    element: ElementType,
    data_file: PathBuf,
}

fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn fmt3(v: impl IntoIterator<Item = impl std::fmt::Display>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_pair(path: &Path, domain: &GridDomain, channels: usize, element: ElementType, payload: &[u8]) -> Result<()> {
    let raw = raw_path(path);
    let raw_name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Invalid(format!("unusable volume path {}", path.display())))?;
    let mut header = String::new();
    header.push_str("ObjectType = Image\nNDims = 3\n");
    header.push_str("BinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n");
    header.push_str(&format!("DimSize = {}\n", fmt3(domain.dims)));
    header.push_str(&format!("ElementSpacing = {}\n", fmt3(domain.spacing)));
    header.push_str(&format!("Offset = {}\n", fmt3(domain.origin)));
    if channels > 1 {
        header.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    header.push_str(&format!("ElementType = {}\n", element.name()));
    header.push_str(&format!("ElementDataFile = {raw_name}\n"));

    let mut f = std::fs::File::create(&raw).map_err(|e| Error::io(&raw, e))?;
    f.write_all(payload).map_err(|e| Error::io(&raw, e))?;
    let mut h = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    h.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_header(path: &Path) -> Result<Header> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    let mut keys = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected `key = value`", n + 1)))?;
        keys.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    let get = |k: &str| {
        keys.get(k)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing key {k}")))
    };
    let triple = |k: &str| -> Result<Vec3> {
        let parts: Vec<&str> = get(k)?.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad(format!("{k} needs 3 values")));
        }
        let mut out = [0.0; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.parse().map_err(|_| bad(format!("{k}: cannot parse {p:?}")))?;
        }
        Ok(out)
    };

    if get("NDims")? != "3" {
        return Err(bad("only 3D images are supported".into()));
    }
    if let Some(msb) = keys.get("BinaryDataByteOrderMSB").or(keys.get("ElementByteOrderMSB")) {
        if msb.eq_ignore_ascii_case("true") {
            return Err(bad("big-endian data is not supported".into()));
        }
    }
    if keys
        .get("CompressedData")
        .is_some_and(|c| c.eq_ignore_ascii_case("true"))
    {
        return Err(bad("compressed data is not supported".into()));
    }
    if let Some(m) = keys.get("TransformMatrix") {
        let m: Vec<f64> = m.split_whitespace().filter_map(|x| x.parse().ok()).collect();
        if m != [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] {
            return Err(bad("only identity orientation is supported".into()));
        }
    }
    let dims_parts: Vec<&str> = get("DimSize")?.split_whitespace().collect();
    if dims_parts.len() != 3 {
        return Err(bad("DimSize needs 3 values".into()));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(dims_parts) {
        *d = p.parse().map_err(|_| bad(format!("DimSize: cannot parse {p:?}")))?;
    }
    let spacing = match keys.get("ElementSpacing") {
        Some(_) => triple("ElementSpacing")?,
        None => [1.0; 3],
    };
    let origin = match (keys.get("Offset"), keys.get("Origin"), keys.get("Position")) {
        (Some(_), _, _) => triple("Offset")?,
        (None, Some(_), _) => triple("Origin")?,
        (None, None, Some(_)) => triple("Position")?,
        _ => [0.0; 3],
    };
    let channels = match keys.get("ElementNumberOfChannels") {
        Some(c) => c.parse().map_err(|_| bad(format!("bad channel count {c:?}")))?,
        None => 1,
    };
    let element = ElementType::parse(get("ElementType")?)
        .ok_or_else(|| bad(format!("unsupported ElementType {}", keys["ElementType"])))?;
    let data_name = get("ElementDataFile")?;
    if data_name == "LOCAL" || data_name.starts_with("LIST") || data_name.contains('%') {
        return Err(bad(format!("ElementDataFile {data_name} is not supported")));
    }
    let data_file = path.parent().unwrap_or(Path::new(".")).join(data_name);
    let domain = GridDomain::new(dims, spacing, origin).map_err(|e| bad(e.to_string()))?;
    Ok(Header {
        domain,
        channels,
        element,
        data_file,
    })
}

fn read_payload(h: &Header) -> Result<Vec<f64>> {
    let bytes = std::fs::read(&h.data_file).map_err(|e| Error::io(&h.data_file, e))?;
    let size = h.element.size();
    let expected = h.domain.len() * h.channels * size;
    if bytes.len() != expected {
        return Err(Error::format(
            &h.data_file,
            format!("{} bytes of data, header implies {expected}", bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(size).map(|b| h.element.decode(b)).collect())
}

/// Writes intensities as 32-bit floats; values not representable in `f32`
/// are rounded.
pub fn write_volume(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = vol.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_pair(path.as_ref(), &vol.domain, 1, ElementType::Float, &payload)
}

/// Reads a single-channel volume; samples outside it read as `background`.
pub fn read_volume_with_background(path: impl AsRef<Path>, background: f64) -> Result<ScalarVolume> {
    let path = path.as_ref();
    let h = parse_header(path)?;
    if h.channels != 1 {
        return Err(Error::format(path, format!("expected 1 channel, found {}", h.channels)));
    }
    let data = read_payload(&h)?;
    ScalarVolume::new(h.domain, data, background)
}

/// Reads an intensity volume (air background).
pub fn read_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    read_volume_with_background(path, AIR_HU)
}

/// Reads a binary mask (background 0).
pub fn read_mask(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let path = path.as_ref();
    let m = read_volume_with_background(path, 0.0)?;
    m.ensure_binary(&path.display().to_string())?;
    Ok(m)
}

pub fn write_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = field
        .u
        .iter()
        .flat_map(|v| v.iter().flat_map(|c| c.to_le_bytes()))
        .collect();
    write_pair(path.as_ref(), &field.domain, 3, ElementType::Double, &payload)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let h = parse_header(path)?;
    if h.channels != 3 {
        return Err(Error::format(
            path,
            format!("displacement field needs 3 channels, found {}", h.channels),
        ));
    }
    let data = read_payload(&h)?;
    let u = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    DisplacementField::new(h.domain, u)
}
