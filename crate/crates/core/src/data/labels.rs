use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 8;

/// Label of a frame without annotation.
pub const INVALID_LABEL: i8 = -1;

/// Expression names by class index.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "neutral",
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
    "other",
];

/// Per-frame labels of one video. Frames are numbered from 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTrack {
    pub video_id: String,
    labels: Vec<i8>,
}

impl LabelTrack {
    pub fn new(video_id: impl Into<String>, labels: Vec<i8>) -> Result<Self> {
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != INVALID_LABEL && !(0..NUM_CLASSES as i8).contains(&l))
        {
            return Err(Error::validation(format!("label {bad} outside {{-1, 0..7}}")));
        }
        Ok(LabelTrack {
            video_id: video_id.into(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    /// Label of 1-based `frame`.
    pub fn get(&self, frame: usize) -> Option<i8> {
        frame.checked_sub(1).and_then(|i| self.labels.get(i)).copied()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l >= 0).collect()
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            if l >= 0 {
                h[l as usize] += 1;
            }
        }
        h
    }

    /// Extends with invalid frames up to `n` frames.
    pub fn pad_to(&mut self, n: usize) -> Result<()> {
        if self.labels.len() > n {
            return Err(Error::validation(format!(
                "video {}: labels cover {} frames, video has {n}",
                self.video_id,
                self.labels.len()
            )));
        }
        self.labels.resize(n, INVALID_LABEL);
        Ok(())
    }

    /// Parses a `frame,label` CSV. `source` names the input in errors.
    pub fn read_csv<R: Read>(reader: R, video_id: &str, source: &str) -> Result<Self> {
        let parse_err = |line: u64, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        if header.iter().map(str::trim).ne(["frame", "label"]) {
            return Err(parse_err(1, format!("expected header `frame,label`, got `{}`", header.iter().collect::<Vec<_>>().join(","))));
        }
        let mut seen = HashSet::new();
        let mut labels: Vec<i8> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 2 {
                return Err(parse_err(line, format!("expected 2 fields, got {}", rec.len())));
            }
            let frame: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("frame `{}` is not a positive integer", &rec[0])))?;
            if frame == 0 {
                return Err(parse_err(line, "frames are numbered from 1".into()));
            }
            let label: i64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("label `{}` is not an integer", &rec[1])))?;
            if label != -1 && !(0..NUM_CLASSES as i64).contains(&label) {
                return Err(parse_err(line, format!("label {label} outside {{-1, 0..7}}")));
            }
            if !seen.insert(frame) {
                return Err(parse_err(line, format!("duplicate frame {frame}")));
            }
            if labels.len() < frame {
                labels.resize(frame, INVALID_LABEL);
            }
            labels[frame - 1] = label as i8;
        }
        LabelTrack::new(video_id, labels)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::validation(format!("writing labels: {e}"));
        w.write_record(["frame", "label"]).map_err(csv_err)?;
        for (i, l) in self.labels.iter().enumerate() {
            w.write_record([(i + 1).to_string(), l.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::validation(format!("writing labels: {e}")))?;
        Ok(())
    }
}

/// Loads labels from a CSV file; the video id is the file stem.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelTrack> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_labels_for(path, &id)
}

pub fn load_labels_for(path: &Path, video_id: &str) -> Result<LabelTrack> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    LabelTrack::read_csv(std::io::BufReader::new(file), video_id, &path.display().to_string())
}
