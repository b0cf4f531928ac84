//! Volumetric images: the in-memory grid, file readers and writers, and
//! deterministic synthetic generators used by tests and demos.

mod nifti;
mod raw;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};

pub use self::nifti::{encode_nifti, parse_nifti, write_nifti};
pub use self::raw::{parse_raw, write_raw, RawSidecar};

/// Scalar storage types accepted on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Uint8,
    Int16,
    Uint16,
    Float32,
}

impl DType {
    pub fn bytes(self) -> usize {
        match self {
            DType::Uint8 => 1,
            DType::Int16 | DType::Uint16 => 2,
            DType::Float32 => 4,
        }
    }

    fn decode(self, chunk: &[u8], big_endian: bool) -> f32 {
        macro_rules! from {
            ($t:ty) => {{
                let arr = chunk.try_into().unwrap();
                if big_endian {
                    <$t>::from_be_bytes(arr)
                } else {
                    <$t>::from_le_bytes(arr)
                }
            }};
        }
        match self {
            DType::Uint8 => chunk[0] as f32,
            DType::Int16 => from!(i16) as f32,
            DType::Uint16 => from!(u16) as f32,
            DType::Float32 => from!(f32),
        }
    }

    /// Little-endian encoding; integer types round and saturate.
    fn encode(self, value: f32, out: &mut Vec<u8>) {
        match self {
            DType::Uint8 => out.push(value.round().clamp(0.0, 255.0) as u8),
            DType::Int16 => out.extend_from_slice(
                &(value.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16).to_le_bytes(),
            ),
            DType::Uint16 => out.extend_from_slice(
                &(value.round().clamp(0.0, u16::MAX as f32) as u16).to_le_bytes(),
            ),
            DType::Float32 => out.extend_from_slice(&value.to_le_bytes()),
        }
    }
}

/// A 3D scalar grid, x-fastest layout, with physical voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    id: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
    voxel_bytes: u32,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Corrupt(format!("non-positive dims {dims:?}")));
        }
        let len = voxel_count(dims)
            .ok_or_else(|| Error::Corrupt(format!("dims {dims:?} overflow")))?;
        if len != data.len() {
            return Err(Error::Corrupt(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                len
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Corrupt(format!("non-positive spacing {spacing:?}")));
        }
        Ok(Volume {
            id: id.into(),
            dims,
            spacing,
            data,
            voxel_bytes: 4,
        })
    }

    /// Zero-filled volume with unit spacing.
    pub fn zeros(id: impl Into<String>, dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(id, dims, [1.0; 3], vec![0.0; n]).expect("valid dims")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    /// Bytes per voxel of the file this volume was read from (4 when built
    /// in memory).
    pub fn voxel_bytes(&self) -> u32 {
        self.voxel_bytes
    }

    pub fn set_voxel_bytes(&mut self, bytes: u32) {
        self.voxel_bytes = bytes;
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Voxel value with coordinates clamped to the grid (replicate border).
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64, z: i64) -> f32 {
        let cx = x.clamp(0, self.dims[0] as i64 - 1) as usize;
        let cy = y.clamp(0, self.dims[1] as i64 - 1) as usize;
        let cz = z.clamp(0, self.dims[2] as i64 - 1) as usize;
        self.get(cx, cy, cz)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Returns a copy with `f` applied to every voxel.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            id: self.id.clone(),
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
            voxel_bytes: self.voxel_bytes,
        }
    }

    pub(crate) fn with_data(&self, data: Vec<f32>, dims: [usize; 3]) -> Volume {
        debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Volume {
            id: self.id.clone(),
            dims,
            spacing: self.spacing,
            data,
            voxel_bytes: self.voxel_bytes,
        }
    }
}

pub(crate) fn voxel_count(dims: [usize; 3]) -> Option<usize> {
    dims[0].checked_mul(dims[1])?.checked_mul(dims[2])
}

/// Affine rescale to [0, 1]; constant volumes map to all zeros.
pub fn normalize(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return v.map(|_| 0.0);
    }
    if lo == 0.0 && hi == 1.0 {
        return v.clone();
    }
    v.map(|x| ((x - lo) / range).clamp(0.0, 1.0))
}

/// Loads a NIfTI-1 (`.nii`, `.nii.gz`) or raw+JSON-sidecar volume. The id
/// defaults to the file stem.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let lower = name.to_ascii_lowercase();
    let stem = lower
        .strip_suffix(".nii.gz")
        .or_else(|| lower.strip_suffix(".nii"))
        .map(|s| name[..s.len()].to_string())
        .unwrap_or_else(|| {
            path.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string()
        });

    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut vol = if lower.ends_with(".raw") || lower.ends_with(".bin") {
        let sidecar_path = path.with_extension("json");
        let sidecar = std::fs::read(&sidecar_path).map_err(|e| {
            Error::Config(format!(
                "raw volume {} needs sidecar {}: {e}",
                path.display(),
                sidecar_path.display()
            ))
        })?;
        let sidecar = RawSidecar::parse(&sidecar)?;
        parse_raw(&bytes, &sidecar)?
    } else {
        parse_nifti(&bytes)?
    };
    vol.set_id(stem);
    Ok(vol)
}

/// File extensions `load_volume` understands.
pub fn is_volume_path(path: &Path) -> bool {
    let lower = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    lower.ends_with(".nii") || lower.ends_with(".nii.gz") || lower.ends_with(".raw")
}
