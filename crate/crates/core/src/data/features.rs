//! Per-frame feature tracks and the `MMFT` file format.
//!
//! Layout (little-endian): magic `MMFT`, version `u32`, name length `u32`,
//! UTF-8 feature-set name, frame count `u32`, dimension `u32`, presence
//! bitmap of `ceil(n/8)` bytes (LSB first, frame 1 is bit 0), then
//! `n * dim` `f32` values. Rows of absent frames are written as zeros and
//! ignored on read.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MMFT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub video_id: String,
    pub feature_set: String,
    dim: usize,
    data: Vec<f32>,
    present: Vec<bool>,
}

/// One imputed frame and the frame its row was copied from (both 1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Imputation {
    pub frame: usize,
    pub donor: usize,
}

impl FeatureTrack {
    /// `data` is `present.len() * dim` values, row-major.
    pub fn new(
        video_id: impl Into<String>,
        feature_set: impl Into<String>,
        dim: usize,
        data: Vec<f32>,
        present: Vec<bool>,
    ) -> Result<Self> {
        let feature_set = feature_set.into();
        if dim == 0 {
            return Err(Error::validation(format!("{feature_set}: zero dimension")));
        }
        if data.len() != present.len() * dim {
            return Err(Error::validation(format!(
                "{feature_set}: {} values for {} frames of dim {dim}",
                data.len(),
                present.len()
            )));
        }
        let mut track = FeatureTrack {
            video_id: video_id.into(),
            feature_set,
            dim,
            data,
            present,
        };
        track.zero_absent_rows();
        Ok(track)
    }

    /// A track with every frame present.
    pub fn complete(
        video_id: impl Into<String>,
        feature_set: impl Into<String>,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let n = data.len().checked_div(dim).unwrap_or(0);
        Self::new(video_id, feature_set, dim, data, vec![true; n])
    }

    fn zero_absent_rows(&mut self) {
        let dim = self.dim;
        for (row, &p) in self.data.chunks_exact_mut(dim).zip(&self.present) {
            if !p {
                row.fill(0.0);
            }
        }
    }

    pub fn n_frames(&self) -> usize {
        self.present.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// Row of 1-based `frame`.
    pub fn row(&self, frame: usize) -> &[f32] {
        let i = frame - 1;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io(format!("<{} features>", self.feature_set), e);
        let n = self.n_frames();
        let mut buf = Vec::with_capacity(24 + self.feature_set.len() + n.div_ceil(8) + self.data.len() * 4);
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        buf.extend_from_slice(&u32_of(self.feature_set.len())?.to_le_bytes());
        buf.extend_from_slice(self.feature_set.as_bytes());
        buf.extend_from_slice(&u32_of(n)?.to_le_bytes());
        buf.extend_from_slice(&u32_of(self.dim)?.to_le_bytes());
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        for (i, &p) in self.present.iter().enumerate() {
            if p {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&bitmap);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read<R: Read>(mut r: R, video_id: &str, source: &str) -> Result<Self> {
        let io = |e| Error::io(source, e);
        let bad = |msg: String| Error::validation(format!("{source}: {msg}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != FEATURE_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != FEATURE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let name_len = read_u32(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("feature-set name is not UTF-8".into()))?;
        let n = read_u32(&mut r).map_err(io)? as usize;
        let dim = read_u32(&mut r).map_err(io)? as usize;
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut bitmap).map_err(io)?;
        let present = (0..n).map(|i| bitmap[i / 8] >> (i % 8) & 1 == 1).collect();
        let mut bytes = vec![0u8; n * dim * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureTrack::new(video_id, name, dim, data, present)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path, video_id: &str) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file), video_id, &path.display().to_string())
    }
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::validation(format!("{v} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Fills every absent frame with the row of the temporally nearest present
/// frame; equidistant donors resolve to the earlier frame. The returned
/// track is complete and the list records each fill.
pub fn impute_missing(track: &FeatureTrack) -> Result<(FeatureTrack, Vec<Imputation>)> {
    let n = track.n_frames();
    if !track.present.iter().any(|&p| p) {
        return Err(Error::validation(format!(
            "video {}, {}: no frame present, nothing to impute from",
            track.video_id, track.feature_set
        )));
    }
    if let Some(i) = (0..n).find(|&i| track.present[i] && !track.row(i + 1).iter().all(|v| v.is_finite())) {
        return Err(Error::validation(format!(
            "video {}, {}: frame {} has non-finite values",
            track.video_id,
            track.feature_set,
            i + 1
        )));
    }

    // nearest present index at or before / at or after each frame
    let mut prev = vec![None; n];
    let mut last = None;
    for (i, (slot, &here)) in prev.iter_mut().zip(&track.present).enumerate() {
        if here {
            last = Some(i);
        }
        *slot = last;
    }
    let mut next = vec![None; n];
    let mut upcoming = None;
    for i in (0..n).rev() {
        if track.present[i] {
            upcoming = Some(i);
        }
        next[i] = upcoming;
    }

    let mut out = track.clone();
    let mut fills = Vec::new();
    let dim = track.dim;
    for i in 0..n {
        if track.present[i] {
            continue;
        }
        let donor = match (prev[i], next[i]) {
            (Some(p), Some(q)) => {
                if i - p <= q - i {
                    p
                } else {
                    q
                }
            }
            (Some(p), None) => p,
            (None, Some(q)) => q,
            (None, None) => unreachable!("at least one frame is present"),
        };
        out.data
            .copy_within(donor * dim..(donor + 1) * dim, i * dim);
        out.present[i] = true;
        fills.push(Imputation {
            frame: i + 1,
            donor: donor + 1,
        });
    }
    Ok((out, fills))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Track whose frame `f` row is `[f, 10 f]`, with the given frames present.
    fn track(n: usize, present: &[usize]) -> FeatureTrack {
        let data = (1..=n).flat_map(|f| [f as f32, 10.0 * f as f32]).collect();
        let mask = (1..=n).map(|f| present.contains(&f)).collect();
        FeatureTrack::new("v", "mae", 2, data, mask).unwrap()
    }

    #[test]
    fn tie_goes_to_earlier_frame() {
        let (t, fills) = impute_missing(&track(5, &[1, 2, 4, 5])).unwrap();
        assert_eq!(t.row(3), &[2.0, 20.0]);
        assert_eq!(fills, vec![Imputation { frame: 3, donor: 2 }]);
        assert!(t.is_complete());
    }

    #[test]
    fn trailing_gap_uses_last_present() {
        let (t, _) = impute_missing(&track(6, &[1, 2, 3, 4])).unwrap();
        assert_eq!(t.row(6), &[4.0, 40.0]);
        assert_eq!(t.row(5), &[4.0, 40.0]);
    }

    #[test]
    fn single_donor_fills_everything() {
        let (t, fills) = impute_missing(&track(10, &[10])).unwrap();
        for f in 1..=9 {
            assert_eq!(t.row(f), &[10.0, 100.0]);
        }
        assert_eq!(fills.len(), 9);
    }

    #[test]
    fn no_present_frames_rejected() {
        assert!(impute_missing(&track(3, &[])).is_err());
    }

    #[test]
    fn complete_track_is_fixed_point() {
        let full = track(4, &[1, 2, 3, 4]);
        let (t, fills) = impute_missing(&full).unwrap();
        assert_eq!(t, full);
        assert!(fills.is_empty());
    }

    #[test]
    fn absent_rows_read_as_zero() {
        let t = track(3, &[1, 3]);
        assert_eq!(t.row(2), &[0.0, 0.0]);
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        // header: 4 magic + 4 version + 4 len + 3 name + 4 n + 4 dim, then bitmap
        assert_eq!(&buf[..4], b"MMFT");
        assert_eq!(buf[23], 0b101);
        let back = FeatureTrack::read(buf.as_slice(), "v", "mem").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut buf = Vec::new();
        track(3, &[1, 2, 3]).write(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(FeatureTrack::read(buf.as_slice(), "v", "mem").is_err());
    }
}
