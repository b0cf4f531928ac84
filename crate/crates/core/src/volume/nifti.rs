//! Minimal single-file NIfTI-1 support: `dim`, `datatype`, `pixdim`,
//! `vox_offset` and `scl_slope`/`scl_inter`. Orientation fields are ignored.

use std::io::Read;
use std::path::Path;

use flate2::read::MultiGzDecoder;

use super::{voxel_count, DType, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DEFAULT_VOX_OFFSET: usize = 352;
/// Upper bound on decompressed size, guards against gzip bombs.
const MAX_DECOMPRESSED: u64 = 4 << 30;

fn datatype_name(code: i16) -> &'static str {
    match code {
        1 => "binary",
        2 => "uint8",
        4 => "int16",
        8 => "int32",
        16 => "float32",
        32 => "complex64",
        64 => "float64",
        128 => "rgb24",
        256 => "int8",
        512 => "uint16",
        768 => "uint32",
        1024 => "int64",
        1280 => "uint64",
        1536 => "float128",
        2304 => "rgba32",
        _ => "unknown",
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.buf[off], self.buf[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

/// Parses an in-memory `.nii` or gzip-compressed `.nii.gz` image.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(bytes)
            .take(MAX_DECOMPRESSED)
            .read_to_end(&mut out)
            .map_err(|e| Error::Corrupt(format!("gzip stream: {e}")))?;
        return parse_uncompressed(&out);
    }
    parse_uncompressed(bytes)
}

fn parse_uncompressed(buf: &[u8]) -> Result<Volume> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Corrupt(format!(
            "NIfTI header needs {HEADER_SIZE} bytes, got {}",
            buf.len()
        )));
    }
    let sizeof_hdr = [buf[0], buf[1], buf[2], buf[3]];
    let big_endian = if i32::from_le_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        false
    } else if i32::from_be_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::Format("not a NIfTI-1 file (sizeof_hdr != 348)".into()));
    };
    match &buf[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::Format(
                "two-file NIfTI (.hdr/.img) is not supported".into(),
            ))
        }
        other => return Err(Error::Format(format!("bad NIfTI magic {other:?}"))),
    }
    let r = Reader { buf, big_endian };

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Corrupt(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for i in 1..=ndim as usize {
        let d = r.i16(40 + 2 * i);
        if d < 1 {
            return Err(Error::Corrupt(format!("dim[{i}] = {d}")));
        }
        if i <= 3 {
            dims[i - 1] = d as usize;
        } else if d != 1 {
            return Err(Error::Format(format!(
                "only 3D volumes are supported (dim[{i}] = {d})"
            )));
        }
    }

    let code = r.i16(70);
    let dtype = match code {
        2 => DType::Uint8,
        4 => DType::Int16,
        512 => DType::Uint16,
        16 => DType::Float32,
        other => {
            return Err(Error::Format(format!(
                "unsupported NIfTI datatype {other} ({})",
                datatype_name(other)
            )))
        }
    };

    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = r.f32(76 + 4 * (i + 1)).abs() as f64;
        if p > 0.0 && p.is_finite() {
            *s = p;
        }
    }

    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= 0.0) {
        return Err(Error::Corrupt(format!("vox_offset {vox_offset}")));
    }
    let offset = (vox_offset as usize).max(if vox_offset == 0.0 {
        DEFAULT_VOX_OFFSET
    } else {
        HEADER_SIZE
    });

    let slope = r.f32(112);
    let inter = r.f32(116);

    let n = voxel_count(dims).ok_or_else(|| Error::Corrupt("dims overflow".into()))?;
    let need = n
        .checked_mul(dtype.bytes())
        .and_then(|b| b.checked_add(offset))
        .ok_or_else(|| Error::Corrupt("data size overflow".into()))?;
    if buf.len() < need {
        return Err(Error::Corrupt(format!(
            "header declares {} bytes of voxel data at offset {offset}, file has {}",
            need - offset,
            buf.len().saturating_sub(offset)
        )));
    }

    let scale = slope != 0.0 && slope.is_finite() && inter.is_finite();
    let data = buf[offset..need]
        .chunks_exact(dtype.bytes())
        .map(|c| {
            let v = dtype.decode(c, big_endian);
            if scale {
                v * slope + inter
            } else {
                v
            }
        })
        .collect();
    let mut v = Volume::new("", dims, spacing, data)?;
    v.set_voxel_bytes(dtype.bytes() as u32);
    Ok(v)
}

/// Serializes a volume as little-endian single-file NIfTI-1.
pub fn encode_nifti(v: &Volume, dtype: DType) -> Vec<u8> {
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims = v.dims();
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    let code: i16 = match dtype {
        DType::Uint8 => 2,
        DType::Int16 => 4,
        DType::Uint16 => 512,
        DType::Float32 => 16,
    };
    h[70..72].copy_from_slice(&code.to_le_bytes());
    h[72..74].copy_from_slice(&((dtype.bytes() * 8) as i16).to_le_bytes());
    let sp = v.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(DEFAULT_VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(v.data().len() * dtype.bytes());
    for &x in v.data() {
        dtype.encode(x, &mut h);
    }
    h
}

/// Writes a single-file NIfTI-1 image, gzip-compressed when the path ends
/// in `.gz`.
pub fn write_nifti(v: &Volume, dtype: DType, path: &Path) -> Result<()> {
    let mut bytes = encode_nifti(v, dtype);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        std::io::Write::write_all(&mut enc, &bytes).map_err(|e| Error::io(path, e))?;
        bytes = enc.finish().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
