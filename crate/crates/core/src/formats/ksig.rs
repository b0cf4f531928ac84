//! `.ksig` signature files.
//!
//! Little-endian layout:
//!
//! ```text
//! "KSIG"  version:u32
//! image_id:   len:u16 + UTF-8
//! subject_id: len:u16 + UTF-8
//! source_dims: 3 x u32   source_voxel_bytes: u32   count: u32
//! count x { pos 3xf32, sigma f32, frame rows 0..2 6xf32, dog_value f32, descr 64xu8 }
//! ```
//!
//! The third frame row is not stored; it is rebuilt as the cross product of
//! the first two, which is exactly how frames are produced.

use std::path::Path;

use crate::descriptor::{complete_frame, Keypoint, Signature, DESCRIPTOR_LEN};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KSIG";
pub const VERSION: u32 = 1;
pub const KEYPOINT_BYTES: usize = 4 * (3 + 1 + 6 + 1) + DESCRIPTOR_LEN;

pub fn encode_signature(sig: &Signature) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + sig.image_id.len() + sig.subject_id.len() + sig.len() * KEYPOINT_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for s in [&sig.image_id, &sig.subject_id] {
        let n = u16::try_from(s.len()).map_err(|_| Error::Format(format!("identifier longer than 65535 bytes: {s:.32}...")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    for d in sig.source_dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&sig.source_voxel_bytes.to_le_bytes());
    let count = u32::try_from(sig.len()).map_err(|_| Error::Format("too many keypoints".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for k in &sig.keypoints {
        let floats = k
            .pos
            .iter()
            .chain([&k.sigma])
            .chain(k.frame[0].iter())
            .chain(k.frame[1].iter())
            .chain([&k.dog_value]);
        for f in floats {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&k.descr);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("signature truncated while reading {what} at byte {}", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not valid UTF-8")))
    }
}

fn f32s<const N: usize>(b: &[u8]) -> [f32; N] {
    std::array::from_fn(|i| f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap()))
}

pub fn decode_signature(bytes: &[u8]) -> Result<Signature> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("not a .ksig file (magic {magic:02x?})")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported .ksig version {version} (expected {VERSION})")));
    }
    let image_id = r.string("image_id")?;
    let subject_id = r.string("subject_id")?;
    let source_dims = [r.u32("dims")?, r.u32("dims")?, r.u32("dims")?];
    let source_voxel_bytes = r.u32("voxel bytes")?;
    let count = r.u32("keypoint count")? as usize;
    let remaining = bytes.len() - r.at;
    if count.checked_mul(KEYPOINT_BYTES) != Some(remaining) {
        return Err(Error::Corrupt(format!(
            "header declares {count} keypoints ({} bytes) but {remaining} bytes follow",
            count as u64 * KEYPOINT_BYTES as u64
        )));
    }
    let keypoints = bytes[r.at..]
        .chunks_exact(KEYPOINT_BYTES)
        .map(|c| {
            let f: [f32; 11] = f32s(&c[..44]);
            Keypoint {
                pos: [f[0], f[1], f[2]],
                sigma: f[3],
                frame: complete_frame([f[4], f[5], f[6]], [f[7], f[8], f[9]]),
                dog_value: f[10],
                descr: c[44..].try_into().unwrap(),
            }
        })
        .collect();
    Ok(Signature {
        image_id,
        subject_id,
        keypoints,
        source_dims,
        source_voxel_bytes,
    })
}

pub fn write_signature(path: &Path, sig: &Signature) -> Result<u64> {
    let bytes = encode_signature(sig)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_signature(path: &Path) -> Result<Signature> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_signature(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(n: usize) -> Signature {
        Signature {
            image_id: "img-0001".into(),
            subject_id: "sub-0001".into(),
            keypoints: (0..n)
                .map(|i| Keypoint {
                    pos: [i as f32, 1.5, -2.25],
                    sigma: 1.6,
                    frame: complete_frame([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
                    dog_value: -0.04,
                    descr: std::array::from_fn(|j| ((j + i) % 64) as u8),
                })
                .collect(),
            source_dims: [256, 256, 256],
            source_voxel_bytes: 2,
        }
    }

    #[test]
    fn layout_size() {
        assert_eq!(KEYPOINT_BYTES, 108);
        let bytes = encode_signature(&sig(3)).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 2 + 8 + 2 + 8 + 12 + 4 + 4 + 3 * 108);
    }

    #[test]
    fn empty_signature_round_trips() {
        let s = sig(0);
        assert_eq!(decode_signature(&encode_signature(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut b = encode_signature(&sig(1)).unwrap();
        b[0] = b'X';
        assert!(matches!(decode_signature(&b), Err(Error::Format(m)) if m.contains("magic")));
        let mut b = encode_signature(&sig(1)).unwrap();
        b[4] = 2;
        assert!(matches!(decode_signature(&b), Err(Error::Format(m)) if m.contains("version 2")));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let b = encode_signature(&sig(2)).unwrap();
        for cut in [0, 3, 7, 20, b.len() - 1] {
            assert!(decode_signature(&b[..cut]).is_err(), "cut {cut}");
        }
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode_signature(&long), Err(Error::Corrupt(_))));
    }

    #[test]
    fn huge_count_does_not_allocate() {
        let mut b = encode_signature(&sig(0)).unwrap();
        let n = b.len();
        b[n - 4..].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_signature(&b), Err(Error::Corrupt(_))));
    }

    fn arb_keypoint() -> impl Strategy<Value = Keypoint> {
        (
            proptest::array::uniform3(-1e4f32..1e4),
            0.1f32..100.0,
            proptest::array::uniform3(-1f32..1.0),
            proptest::array::uniform3(-1f32..1.0),
            any::<f32>(),
            proptest::collection::vec(any::<u8>(), DESCRIPTOR_LEN),
        )
            .prop_map(|(pos, sigma, r0, r1, dog_value, d)| Keypoint {
                pos,
                sigma,
                frame: complete_frame(r0, r1),
                dog_value,
                descr: d.try_into().unwrap(),
            })
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            id in "[a-zA-Z0-9_\\-é]{0,40}",
            subject in "[a-z0-9\\-]{0,20}",
            kps in proptest::collection::vec(arb_keypoint(), 0..20),
            dims in proptest::array::uniform3(1u32..1024),
            vb in 1u32..8,
        ) {
            let s = Signature { image_id: id, subject_id: subject, keypoints: kps, source_dims: dims, source_voxel_bytes: vb };
            let bytes = encode_signature(&s).unwrap();
            let back = decode_signature(&bytes).unwrap();
            prop_assert_eq!(encode_signature(&back).unwrap(), bytes);
            prop_assert_eq!(back.keypoints.len(), s.keypoints.len());
            for (a, b) in back.keypoints.iter().zip(&s.keypoints) {
                prop_assert_eq!(a.dog_value.to_bits(), b.dog_value.to_bits());
                for (ra, rb) in a.frame.iter().zip(&b.frame) {
                    for (x, y) in ra.iter().zip(rb) {
                        prop_assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
            }
        }

        #[test]
        fn decoding_noise_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
            let _ = decode_signature(&bytes);
        }
    }
}
