// SPDX-License-Identifier: Apache-2.0

//! Binary motion files.
//!
//! Little-endian layout:
//!
//! | bytes      | field                          |
//! |------------|--------------------------------|
//! | 4          | magic `SSDM`                   |
//! | 4          | version (u32, = 1)             |
//! | 4          | frame count F (u32)            |
//! | 4          | fps (f32)                      |
//! | 4          | joint count (u32, = 22)        |
//! | F·22·6·4   | local 6D rotations (f32)       |
//! | F·3·4      | root translation, meters (f32) |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pose::{PoseSequence, NUM_JOINTS, POSE_DIM};

pub const MAGIC: [u8; 4] = *b"SSDM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionFile {
    pub fps: f32,
    pub pose: PoseSequence,
}

/// Header fields, readable without the payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionHeader {
    pub version: u32,
    pub frames: u32,
    pub fps: f32,
    pub joints: u32,
}

impl MotionHeader {
    pub fn payload_len(&self) -> usize {
        self.frames as usize * (self.joints as usize * 6 + 3) * 4
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated {
            needed: usize::MAX,
            available: self.buf.len(),
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::TrailingBytes(extra)),
        }
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<MotionHeader> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC.to_vec(),
            found: magic.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let frames = r.u32()?;
    let fps = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::Corrupt(format!("frame rate {fps} is not a positive number")));
    }
    let joints = r.u32()?;
    if joints as usize != NUM_JOINTS {
        return Err(Error::InvalidArgument(format!(
            "expected {NUM_JOINTS} joints, file has {joints}"
        )));
    }
    Ok(MotionHeader {
        version,
        frames,
        fps,
        joints,
    })
}

impl MotionFile {
    pub fn new(pose: PoseSequence, fps: f32) -> Self {
        Self { fps, pose }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let frames = self.pose.frames();
        let mut out = Vec::with_capacity(HEADER_LEN + frames * (POSE_DIM + 3) * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(frames as u32).to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        out.extend_from_slice(&(NUM_JOINTS as u32).to_le_bytes());
        for v in self.pose.rotations.iter().chain(&self.pose.root_translation) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let h = read_header(&mut r)?;
        let frames = h.frames as usize;
        let rotations = r.f32s(frames * POSE_DIM)?;
        let root = r.f32s(frames * 3)?;
        r.finish()?;
        if let Some(i) = rotations.iter().chain(&root).position(|v| !v.is_finite()) {
            return Err(Error::Corrupt(format!("non-finite value at payload index {i}")));
        }
        Ok(Self {
            fps: h.fps,
            pose: PoseSequence::new(rotations, root)?,
        })
    }
}

pub fn header_from_bytes(buf: &[u8]) -> Result<MotionHeader> {
    read_header(&mut Reader::new(buf))
}

pub fn write_motion(path: &Path, file: &MotionFile) -> Result<()> {
    fs::write(path, file.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_motion(path: &Path) -> Result<MotionFile> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    MotionFile::from_bytes(&buf)
}

pub const EXTENSION: &str = "ssdm";

/// File name used for sequence `index` in a generated dataset.
pub fn sequence_file_name(index: usize) -> String {
    format!("seq_{index:04}.{EXTENSION}")
}

/// Every motion file in `dir`, sorted by file name.
pub fn read_motion_dir(dir: &Path) -> Result<Vec<(String, MotionFile)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .{EXTENSION} files in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, read_motion(&p)?))
        })
        .collect()
}

/// Human-readable header summary.
pub fn dump(path: &Path) -> Result<String> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = header_from_bytes(&buf)?;
    let expected = HEADER_LEN + h.payload_len();
    let status = if expected == buf.len() { "ok" } else { "size mismatch" };
    Ok(format!(
        "{}: version={} frames={} fps={} joints={} bytes={} expected={} ({status})",
        path.display(),
        h.version,
        h.frames,
        h.fps,
        h.joints,
        buf.len(),
        expected
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MotionFile {
        let mut pose = PoseSequence::rest(3);
        pose.rotations[7] = -0.25;
        pose.root_translation[4] = 1.5;
        MotionFile::new(pose, 60.0)
    }

    #[test]
    fn round_trip() {
        let f = sample();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 3 * (POSE_DIM + 3) * 4);
        assert_eq!(MotionFile::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn typed_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MotionFile::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            MotionFile::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        assert!(matches!(
            MotionFile::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            MotionFile::from_bytes(&bytes[..2]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(MotionFile::from_bytes(&long), Err(Error::TrailingBytes(1))));
        let mut nan = bytes;
        nan[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(MotionFile::from_bytes(&nan), Err(Error::Corrupt(_))));
    }
}
