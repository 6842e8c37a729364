//! Label and feature loading, missing-frame repair, input assembly and
//! segmentation.

mod assemble;
mod features;
mod labels;
mod manifest;
mod registry;
mod segment;

pub use assemble::{assemble_inputs, feature_layout, AssembledInputs, FeatureBlock};
pub use features::{impute_missing, FeatureTrack, Imputation, FEATURE_MAGIC, FEATURE_VERSION};
pub use labels::{load_labels, load_labels_for, LabelTrack, CLASS_NAMES, INVALID_LABEL, NUM_CLASSES};
pub use manifest::{Manifest, Splits, VideoEntry};
pub use registry::{FeatureRegistry, FeatureSpec, Modality};
pub use segment::{segment_video, SegmentSpan};

use crate::error::{Error, Result};

/// Model-ready data of one video: concatenated `[f_v; f_a]` rows and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoData {
    pub id: String,
    pub n_frames: usize,
    pub input_dim: usize,
    /// `n_frames x input_dim`, row-major.
    pub inputs: Vec<f32>,
    pub labels: LabelTrack,
}

/// A window of one video fed to a temporal encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub video_id: String,
    pub span: SegmentSpan,
    /// `window x input_dim`, row-major.
    pub features: Vec<f32>,
    pub labels: Vec<i8>,
    pub valid: Vec<bool>,
}

impl Segment {
    pub fn window(&self) -> usize {
        self.span.len()
    }
}

impl VideoData {
    /// Input rows of the frames in `span`.
    pub fn frame_rows(&self, span: SegmentSpan) -> &[f32] {
        let rows = span.rows();
        &self.inputs[rows.start * self.input_dim..rows.end * self.input_dim]
    }

    pub fn segment(&self, span: SegmentSpan) -> Segment {
        let rows = span.rows();
        let labels = self.labels.labels()[rows.clone()].to_vec();
        Segment {
            video_id: self.id.clone(),
            span,
            features: self.frame_rows(span).to_vec(),
            valid: labels.iter().map(|&l| l >= 0).collect(),
            labels,
        }
    }

    pub fn segments(&self, l: usize, p: usize) -> Result<Vec<Segment>> {
        Ok(segment_video(self.n_frames, l, p)?
            .into_iter()
            .map(|s| self.segment(s))
            .collect())
    }
}

/// Feature repairs made while loading one video.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoRepairs {
    pub video_id: String,
    /// `(feature set, imputation)` pairs.
    pub fills: Vec<(String, Imputation)>,
}

impl VideoRepairs {
    /// Distinct frames that had at least one feature set imputed.
    pub fn frames_imputed(&self) -> usize {
        let mut frames: Vec<usize> = self.fills.iter().map(|(_, f)| f.frame).collect();
        frames.sort_unstable();
        frames.dedup();
        frames.len()
    }
}

/// Reads and imputes the tracks of `entry` for the requested feature sets.
pub fn load_tracks(
    manifest: &Manifest,
    entry: &VideoEntry,
    names: &[String],
    registry: &FeatureRegistry,
) -> Result<(Vec<FeatureTrack>, VideoRepairs)> {
    let mut repairs = VideoRepairs {
        video_id: entry.id.clone(),
        fills: Vec::new(),
    };
    let mut tracks = Vec::with_capacity(names.len());
    for name in names {
        let rel = entry.features.get(name).ok_or_else(|| {
            Error::validation(format!("video {}: no file for feature set `{name}`", entry.id))
        })?;
        let path = manifest.resolve(rel);
        let raw = FeatureTrack::load(&path, &entry.id)?;
        if raw.feature_set != *name {
            return Err(Error::validation(format!(
                "{}: holds feature set `{}`, manifest says `{name}`",
                path.display(),
                raw.feature_set
            )));
        }
        let expected = registry.get(name)?.dim;
        if raw.dim() != expected {
            return Err(Error::validation(format!(
                "{}: dimension mismatch for `{name}`: expected {expected}, actual {}",
                path.display(),
                raw.dim()
            )));
        }
        if raw.n_frames() != entry.n_frames {
            return Err(Error::validation(format!(
                "{}: {} frames, manifest says {}",
                path.display(),
                raw.n_frames(),
                entry.n_frames
            )));
        }
        let (track, fills) = impute_missing(&raw)?;
        repairs
            .fills
            .extend(fills.into_iter().map(|f| (name.clone(), f)));
        tracks.push(track);
    }
    Ok((tracks, repairs))
}

pub fn load_video_labels(manifest: &Manifest, entry: &VideoEntry) -> Result<LabelTrack> {
    let mut labels = load_labels_for(&manifest.resolve(&entry.label_file), &entry.id)?;
    labels.pad_to(entry.n_frames)?;
    Ok(labels)
}

/// Loads, repairs and assembles one video.
pub fn load_video(
    manifest: &Manifest,
    entry: &VideoEntry,
    visual: &[String],
    audio: &[String],
    registry: &FeatureRegistry,
) -> Result<(VideoData, VideoRepairs)> {
    let names: Vec<String> = visual.iter().chain(audio).cloned().collect();
    let (tracks, repairs) = load_tracks(manifest, entry, &names, registry)?;
    let assembled = assemble_inputs(&tracks, visual, audio, registry)?;
    let labels = load_video_labels(manifest, entry)?;
    Ok((
        VideoData {
            id: entry.id.clone(),
            n_frames: entry.n_frames,
            input_dim: assembled.input_dim(),
            inputs: assembled.concatenated(),
            labels,
        },
        repairs,
    ))
}

/// Train and validation videos with a shared input layout.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub input_dim: usize,
    pub layout: Vec<FeatureBlock>,
    pub train: Vec<VideoData>,
    pub val: Vec<VideoData>,
}

pub fn load_split(
    manifest: &Manifest,
    split: &str,
    visual: &[String],
    audio: &[String],
) -> Result<Vec<VideoData>> {
    let registry = manifest.registry()?;
    manifest
        .split(split)?
        .iter()
        .map(|id| {
            let entry = manifest.video(id)?;
            load_video(manifest, entry, visual, audio, &registry).map(|(v, _)| v)
        })
        .collect()
}

pub fn load_dataset(manifest: &Manifest, visual: &[String], audio: &[String]) -> Result<Dataset> {
    let registry = manifest.registry()?;
    let layout = feature_layout(&registry, visual, audio)?;
    let input_dim = layout.iter().map(|b| b.dim).sum();
    Ok(Dataset {
        input_dim,
        layout,
        train: load_split(manifest, "train", visual, audio)?,
        val: load_split(manifest, "val", visual, audio)?,
    })
}
