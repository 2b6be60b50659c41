//! Dataset file, little-endian: magic `DLGS`, version `u16`, record count
//! `u32`, then per sequence the intrinsics (4 x f64), two target-to-reference
//! poses (6 x f64 each) and three frames (height and width as `u32`, RGB as
//! f32, depth as f32). A CRC32 of every preceding byte closes the file.

use std::path::Path;

use super::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DLGS";
pub const DATASET_VERSION: u16 = 1;

const HEADER: usize = 4 + 2 + 4;
const RECORD_FIXED: usize = 4 * 8 + 2 * 6 * 8;

pub fn to_bytes(seqs: &[Sequence]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let count = u32::try_from(seqs.len()).map_err(|_| Error::Data("too many sequences".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for s in seqs {
        for v in s.k.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &s.poses {
            for v in p.to_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for f in &s.frames {
            let (h, w) = (f.height(), f.width());
            if f.image.shape() != [h, w, 3] {
                return Err(Error::shape("dataset frame", f.image.shape(), &[h, w, 3]));
            }
            for d in [h, w] {
                let d = u32::try_from(d).map_err(|_| Error::Data("frame too large".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in f.image.data().iter().chain(f.depth.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("wanted {n} bytes at offset {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s<const N: usize>(&mut self) -> Result<[f64; N]> {
        let b = self.take(8 * N)?;
        Ok(std::array::from_fn(|i| {
            f64::from_le_bytes(b[8 * i..8 * i + 8].try_into().unwrap_or([0; 8]))
        }))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Data("frame too large".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    /// Skips one record, reading only its frame sizes.
    fn skip_record(&mut self) -> Result<()> {
        self.take(RECORD_FIXED)?;
        for _ in 0..3 {
            let (h, w) = (self.u32()? as usize, self.u32()? as usize);
            let n = h.checked_mul(w).and_then(|p| p.checked_mul(16)).ok_or_else(|| Error::Data("frame too large".into()))?;
            self.take(n)?;
        }
        Ok(())
    }

    fn frame(&mut self) -> Result<Frame> {
        let (h, w) = (self.u32()? as usize, self.u32()? as usize);
        let image = self.f32s(h * w * 3)?;
        let depth = self.f32s(h * w)?;
        Ok(Frame {
            image: Tensor::new([h, w, 3], image)?,
            depth: Tensor::new([h, w], depth)?,
        })
    }
}

/// Parses a dataset; nothing is returned unless the checksum matches.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<Sequence>> {
    if bytes.len() < HEADER + 4 {
        return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let body = &bytes[..bytes.len() - 4];
    let tail = &bytes[bytes.len() - 4..];
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if stored != computed {
        // a short file also fails the checksum; report it as truncation
        if &bytes[..4] == DATASET_MAGIC {
            let mut scan = Reader { bytes: body, pos: HEADER };
            for _ in 0..count {
                if let Err(e @ Error::Truncated(_)) = scan.skip_record() {
                    return Err(e);
                }
            }
        }
        return Err(Error::Checksum { stored, computed });
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Data("not a dataset file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let mut r = Reader { bytes: body, pos: HEADER };
    let mut seqs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let [fx, fy, cx, cy] = r.f64s::<4>()?;
        let k = Intrinsics::new(fx, fy, cx, cy).map_err(|e| Error::Data(e.to_string()))?;
        let poses = [Pose::from_array(r.f64s::<6>()?), Pose::from_array(r.f64s::<6>()?)];
        let frames = [r.frame()?, r.frame()?, r.frame()?];
        let (h, w) = (frames[1].height(), frames[1].width());
        if frames.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(Error::Data("frames of one sequence differ in size".into()));
        }
        seqs.push(Sequence { k, poses, frames });
    }
    if r.pos != body.len() {
        return Err(Error::Data(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(seqs)
}

/// Writes through a temporary file and renames it into place.
pub fn write_dataset(seqs: &[Sequence], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(seqs)?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    from_bytes(&std::fs::read(path)?)
}
