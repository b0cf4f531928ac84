use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{voxel_count, DType, Volume};
use crate::error::{Error, Result};

/// JSON sidecar describing a headerless little-endian raw volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    pub dtype: DType,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl RawSidecar {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("raw sidecar: {e}")))
    }
}

pub fn parse_raw(bytes: &[u8], sidecar: &RawSidecar) -> Result<Volume> {
    let n = voxel_count(sidecar.dims)
        .and_then(|n| n.checked_mul(sidecar.dtype.bytes()))
        .ok_or_else(|| Error::Corrupt("sidecar dims overflow".into()))?;
    if bytes.len() != n {
        return Err(Error::Corrupt(format!(
            "raw file has {} bytes, sidecar dims {:?} x {:?} need {n}",
            bytes.len(),
            sidecar.dims,
            sidecar.dtype
        )));
    }
    let data = bytes
        .chunks_exact(sidecar.dtype.bytes())
        .map(|c| sidecar.dtype.decode(c, false))
        .collect();
    let mut v = Volume::new("", sidecar.dims, sidecar.spacing, data)?;
    v.set_voxel_bytes(sidecar.dtype.bytes() as u32);
    Ok(v)
}

/// Writes `path` (raw voxels) and its `.json` sidecar.
pub fn write_raw(v: &Volume, dtype: DType, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(v.data().len() * dtype.bytes());
    for &x in v.data() {
        dtype.encode(x, &mut out);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let sidecar = RawSidecar {
        dims: v.dims(),
        spacing: v.spacing(),
        dtype,
    };
    let side = path.with_extension("json");
    std::fs::write(&side, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(side, e))
}
