//! Sidecar volume format: a JSON header next to little-endian raw payloads.
//!
//! ```json
//! {"dims":[nx,ny,nz], "dtype":"f32", "order":"x-fastest",
//!  "spacing":[sx,sy,sz], "data":"vol.raw", "mask":"vol_mask.raw"}
//! ```
//!
//! Paths inside the header are relative to the header's directory. The mask
//! payload holds one byte per voxel (0 or 1) and is optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{Dims, Mask, Volume};
use crate::error::{Error, Result};

pub(crate) const ORDER_X_FASTEST: &str = "x-fastest";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct RawHeader {
    pub dims: [usize; 3],
    pub dtype: String,
    pub order: String,
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl RawHeader {
    pub(crate) fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: RawHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        if header.order != ORDER_X_FASTEST {
            return Err(Error::Header {
                path: path.to_owned(),
                message: format!("unsupported order {:?}", header.order),
            });
        }
        if header.dims.iter().any(|&n| n == 0) {
            return Err(Error::Header {
                path: path.to_owned(),
                message: "dims must be positive".into(),
            });
        }
        Ok(header)
    }

    pub(crate) fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("header serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn sibling(header: &Path, rel: &str) -> PathBuf {
    header.parent().unwrap_or_else(|| Path::new(".")).join(rel)
}

pub(crate) fn payload_names(header: &Path) -> (String, String) {
    let stem = header
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    (format!("{stem}.raw"), format!("{stem}_mask.raw"))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_mask_payload(path: &Path, dims: Dims) -> Result<Vec<bool>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != dims.len() {
        return Err(Error::PayloadSizeMismatch {
            expected: dims.len(),
            found: bytes.len(),
        });
    }
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Header {
                path: path.to_owned(),
                message: format!("mask byte {other} at voxel {i} is not 0/1"),
            }),
        })
        .collect()
}

/// Loads a volume and its mask (all-ones when the header names no mask).
pub fn load_volume(path: impl AsRef<Path>) -> Result<(Volume, Mask)> {
    let path = path.as_ref();
    let header = RawHeader::read(path)?;
    if header.dtype != "f32" {
        return Err(Error::Header {
            path: path.to_owned(),
            message: format!("volume dtype must be f32, got {:?}", header.dtype),
        });
    }
    let dims = Dims(header.dims);
    let bytes = read_bytes(&sibling(path, &header.data))?;
    if bytes.len() != dims.len() * 4 {
        return Err(Error::PayloadSizeMismatch {
            expected: dims.len() * 4,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let volume = Volume::with_spacing(dims, header.spacing, data)?;
    let mask = match &header.mask {
        Some(rel) => Mask::new(dims, read_mask_payload(&sibling(path, rel), dims)?)?,
        None => Mask::full(dims),
    };
    Ok((volume, mask))
}

/// Writes `<stem>.raw` (and `<stem>_mask.raw` when a mask is given) next to the header.
pub fn save_volume(volume: &Volume, mask: Option<&Mask>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(m) = mask {
        super::grid::ensure_same_dims(volume.dims(), m.dims(), "save_volume mask")?;
    }
    let (data_name, mask_name) = payload_names(path);
    let bytes: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(&sibling(path, &data_name), &bytes)?;
    if let Some(m) = mask {
        let bits: Vec<u8> = m.bits().iter().map(|&b| b as u8).collect();
        write_bytes(&sibling(path, &mask_name), &bits)?;
    }
    RawHeader {
        dims: volume.dims().0,
        dtype: "f32".into(),
        order: ORDER_X_FASTEST.into(),
        spacing: volume.spacing(),
        data: data_name,
        mask: mask.map(|_| mask_name),
        extra: Default::default(),
    }
    .write(path)
}
