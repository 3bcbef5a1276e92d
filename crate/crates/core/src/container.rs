//! Self-describing array container used for pair files, checkpoints and
//! enhanced outputs.
//!
//! Layout: an optional metadata line `{"meta": {...}}`, then for every array a
//! one-line JSON header followed by its raw little-endian row-major payload,
//! and finally a little-endian CRC32 of all payload bytes concatenated.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HEADER_MARKER: &[u8] = b"{\"name\":\"";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
    }
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        "u8" => Some(1),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    order: String,
    endianness: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Option<serde_json::Value>,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn with_meta(meta: serde_json::Value) -> Self {
        Self {
            meta: Some(meta),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: ArrayData) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "array `{name}` payload does not match its shape"
        );
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut payload_crc = crc32fast::Hasher::new();
        if let Some(meta) = &self.meta {
            let line = serde_json::to_string(&MetaLine { meta: meta.clone() })
                .expect("metadata serializes");
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        for a in &self.arrays {
            let header = ArrayHeader {
                name: a.name.clone(),
                dtype: a.data.dtype().to_string(),
                shape: a.shape.clone(),
                order: "row-major".into(),
                endianness: "little".into(),
            };
            out.extend_from_slice(serde_json::to_string(&header).expect("header").as_bytes());
            out.push(b'\n');
            let start = out.len();
            a.data.write_le(&mut out);
            payload_crc.update(&out[start..]);
        }
        out.extend_from_slice(&payload_crc.finalize().to_le_bytes());
        out
    }

    /// Parses container bytes; `origin` labels errors (usually the file path).
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let fail = |reason: String| Error::format(origin, reason);
        if bytes.len() < 4 {
            return Err(fail(format!("file is {} bytes, too short for a checksum", bytes.len())));
        }
        let payload_end = bytes.len() - 4;
        let mut pos = 0;
        let mut meta = None;
        let mut arrays = Vec::new();
        let mut crc = crc32fast::Hasher::new();
        while pos < payload_end {
            let nl = bytes[pos..payload_end]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| fail(format!("unterminated header line at byte {pos}")))?;
            let line = &bytes[pos..pos + nl];
            pos += nl + 1;
            if pos == nl + 1 && meta.is_none() && line.starts_with(b"{\"meta\"") {
                let m: MetaLine = serde_json::from_slice(line)
                    .map_err(|e| fail(format!("malformed metadata line: {e}")))?;
                meta = Some(m.meta);
                continue;
            }
            let header: ArrayHeader = serde_json::from_slice(line)
                .map_err(|e| fail(format!("malformed array header: {e}")))?;
            if header.order != "row-major" || header.endianness != "little" {
                return Err(fail(format!(
                    "array `{}`: unsupported layout {}/{}",
                    header.name, header.order, header.endianness
                )));
            }
            let size = dtype_size(&header.dtype).ok_or_else(|| {
                fail(format!("array `{}`: unsupported dtype `{}`", header.name, header.dtype))
            })?;
            let declared = header.shape.iter().product::<usize>() * size;
            let consistent = pos + declared == payload_end
                || (pos + declared < payload_end && bytes[pos + declared..].starts_with(HEADER_MARKER));
            if !consistent {
                let actual = find_marker(&bytes[pos..payload_end]).unwrap_or(payload_end - pos);
                return Err(fail(format!(
                    "array `{}`: header declares shape {:?} of {} ({} bytes) but the payload holds {} bytes",
                    header.name, header.shape, header.dtype, declared, actual
                )));
            }
            let raw = &bytes[pos..pos + declared];
            crc.update(raw);
            pos += declared;
            let data = match header.dtype.as_str() {
                "f32" => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                "f64" => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => ArrayData::U8(raw.to_vec()),
            };
            arrays.push(NamedArray {
                name: header.name,
                shape: header.shape,
                data,
            });
        }
        let stored = u32::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        let computed = crc.finalize();
        if stored != computed {
            return Err(fail(format!(
                "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
            )));
        }
        Ok(Self { meta, arrays })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

fn find_marker(hay: &[u8]) -> Option<usize> {
    hay.windows(HEADER_MARKER.len()).position(|w| w == HEADER_MARKER)
}

/// Writes `bytes` to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, |f| f.write_all(bytes))
}

/// Like [`write_atomic`] with a caller-supplied writer; if it fails the
/// destination is left untouched and the temp file removed.
pub fn write_atomic_with(
    path: &Path,
    fill: impl FnOnce(&mut fs::File) -> std::io::Result<()>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Precondition(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        fill(&mut f)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
