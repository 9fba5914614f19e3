//! `VSEG1` volume files.
//!
//! A UTF-8 header of `key=value` lines, terminated by `\n\0`, followed by
//! the raw little-endian payload in storage order:
//!
//! ```text
//! magic=VSEG1
//! kind=image            # or label
//! dims=64 64 64
//! modality_names=t1,t1c,t2,flair
//! spacing_mm=1 1 1
//! dtype=f32             # u8 for labels
//! byte_order=little
//! num_classes=5         # labels only
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{voxel_count, Dims, LabelVolume, MultiModalVolume};
use crate::{Error, Result};

pub(crate) const MAGIC: &str = "VSEG1";
pub(crate) const TERMINATOR: &[u8] = b"\n\0";

/// Either kind of volume, as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadedVolume {
    Image(MultiModalVolume),
    Label(LabelVolume),
}

fn fmt_triple<T: std::fmt::Display>(v: &[T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

pub fn save_image(path: impl AsRef<Path>, vol: &MultiModalVolume) -> Result<()> {
    let header = format!(
        "magic={MAGIC}\nkind=image\ndims={}\nmodality_names={}\nspacing_mm={}\ndtype=f32\nbyte_order=little",
        fmt_triple(&vol.dims),
        vol.modality_names.join(","),
        fmt_triple(&vol.spacing_mm),
    );
    let mut bytes = Vec::with_capacity(header.len() + 2 + vol.data.len() * 4);
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(TERMINATOR);
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write(path.as_ref(), &bytes)
}

pub fn save_label(path: impl AsRef<Path>, vol: &LabelVolume) -> Result<()> {
    let header = format!(
        "magic={MAGIC}\nkind=label\ndims={}\nmodality_names=label\nspacing_mm=1 1 1\ndtype=u8\nbyte_order=little\nnum_classes={}",
        fmt_triple(&vol.dims),
        vol.num_classes,
    );
    let mut bytes = Vec::with_capacity(header.len() + 2 + vol.labels.len());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(TERMINATOR);
    bytes.extend_from_slice(&vol.labels);
    write(path.as_ref(), &bytes)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits a file into its parsed header map and payload bytes.
pub(crate) fn split_header<'a>(
    bytes: &'a [u8],
    magic: &str,
) -> Result<(BTreeMap<String, String>, &'a [u8])> {
    let end = bytes
        .windows(TERMINATOR.len())
        .position(|w| w == TERMINATOR)
        .ok_or_else(|| Error::Format("header terminator not found".into()))?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("header line without '=': {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    match map.get("magic") {
        Some(m) if m == magic => {}
        other => return Err(Error::Format(format!("bad magic {other:?}, expected {magic}"))),
    }
    Ok((map, &bytes[end + TERMINATOR.len()..]))
}

pub(crate) fn field<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("missing header field {key:?}")))
}

fn parse_triple<T: std::str::FromStr>(s: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = s
        .split_whitespace()
        .map(|p| p.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("cannot parse {key}={s:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Format(format!("{key} needs three values, got {s:?}")))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<LoadedVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, payload) = split_header(&bytes, MAGIC)?;
    if field(&h, "byte_order")? != "little" {
        return Err(Error::Format("only little-endian payloads are supported".into()));
    }
    let dims: Dims = parse_triple(field(&h, "dims")?, "dims")?;
    match field(&h, "kind")? {
        "image" => {
            if field(&h, "dtype")? != "f32" {
                return Err(Error::Format("image payload must be f32".into()));
            }
            let names: Vec<String> = field(&h, "modality_names")?
                .split(',')
                .map(str::to_string)
                .collect();
            let spacing: [f64; 3] = parse_triple(field(&h, "spacing_mm")?, "spacing_mm")?;
            let expected = names.len() * voxel_count(dims) * 4;
            if payload.len() != expected {
                return Err(Error::SizeMismatch(format!(
                    "header declares {} modalities of {dims:?} ({expected} bytes), payload has {} bytes",
                    names.len(),
                    payload.len()
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            MultiModalVolume::new(dims, names, spacing, data).map(LoadedVolume::Image)
        }
        "label" => {
            if field(&h, "dtype")? != "u8" {
                return Err(Error::Format("label payload must be u8".into()));
            }
            let num_classes: u8 = field(&h, "num_classes")?
                .parse()
                .map_err(|_| Error::Format("bad num_classes".into()))?;
            if payload.len() != voxel_count(dims) {
                return Err(Error::SizeMismatch(format!(
                    "header declares {dims:?} ({} bytes), payload has {} bytes",
                    voxel_count(dims),
                    payload.len()
                )));
            }
            LabelVolume::new(dims, num_classes, payload.to_vec()).map(LoadedVolume::Label)
        }
        other => Err(Error::Format(format!("unknown kind {other:?}"))),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<MultiModalVolume> {
    match load_volume(path)? {
        LoadedVolume::Image(v) => Ok(v),
        LoadedVolume::Label(_) => Err(Error::Format("expected an image volume, found labels".into())),
    }
}

pub fn load_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match load_volume(path)? {
        LoadedVolume::Label(v) => Ok(v),
        LoadedVolume::Image(_) => Err(Error::Format("expected a label volume, found an image".into())),
    }
}
