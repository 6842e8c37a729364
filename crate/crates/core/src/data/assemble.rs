use serde::Serialize;

use super::features::FeatureTrack;
use super::registry::{FeatureRegistry, Modality};
use crate::error::{Error, Result};

/// Column block of one feature set inside the concatenated input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FeatureBlock {
    pub name: String,
    pub modality: Modality,
    pub offset: usize,
    pub dim: usize,
}

/// Per-frame visual and audio vectors of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInputs {
    pub video_id: String,
    pub n_frames: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// `n_frames x visual_dim`, row-major.
    pub visual: Vec<f32>,
    /// `n_frames x audio_dim`, row-major.
    pub audio: Vec<f32>,
    /// Concatenation order, visual blocks first.
    pub layout: Vec<FeatureBlock>,
}

impl AssembledInputs {
    pub fn input_dim(&self) -> usize {
        self.visual_dim + self.audio_dim
    }

    /// `[f_v; f_a]` per frame: `n_frames x input_dim`, row-major.
    pub fn concatenated(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.n_frames * self.input_dim());
        for i in 0..self.n_frames {
            out.extend_from_slice(&self.visual[i * self.visual_dim..(i + 1) * self.visual_dim]);
            out.extend_from_slice(&self.audio[i * self.audio_dim..(i + 1) * self.audio_dim]);
        }
        out
    }
}

/// Column layout for the requested feature sets, in request order.
pub fn feature_layout(
    registry: &FeatureRegistry,
    visual: &[String],
    audio: &[String],
) -> Result<Vec<FeatureBlock>> {
    registry.total_dim(visual, Modality::Visual)?;
    registry.total_dim(audio, Modality::Audio)?;
    let mut offset = 0;
    let mut layout = Vec::new();
    for (names, modality) in [(visual, Modality::Visual), (audio, Modality::Audio)] {
        for name in names {
            if layout.iter().any(|b: &FeatureBlock| &b.name == name) {
                return Err(Error::config(format!("feature set `{name}` requested twice")));
            }
            let dim = registry.get(name)?.dim;
            layout.push(FeatureBlock {
                name: name.clone(),
                modality,
                offset,
                dim,
            });
            offset += dim;
        }
    }
    Ok(layout)
}

/// Concatenates imputed tracks into per-frame `f_v` and `f_a` in the given
/// name order.
pub fn assemble_inputs(
    tracks: &[FeatureTrack],
    visual: &[String],
    audio: &[String],
    registry: &FeatureRegistry,
) -> Result<AssembledInputs> {
    let layout = feature_layout(registry, visual, audio)?;
    let find = |name: &str| {
        tracks
            .iter()
            .find(|t| t.feature_set == name)
            .ok_or_else(|| Error::validation(format!("no track for feature set `{name}`")))
    };
    let mut n_frames = None;
    let mut video_id = String::new();
    for block in &layout {
        let t = find(&block.name)?;
        if t.dim() != block.dim {
            return Err(Error::validation(format!(
                "video {}, {}: dimension {} but registry expects {}",
                t.video_id,
                block.name,
                t.dim(),
                block.dim
            )));
        }
        if !t.is_complete() {
            return Err(Error::validation(format!(
                "video {}, {}: track has absent frames; impute first",
                t.video_id, block.name
            )));
        }
        match n_frames {
            None => {
                n_frames = Some(t.n_frames());
                video_id = t.video_id.clone();
            }
            Some(n) if n != t.n_frames() => {
                return Err(Error::validation(format!(
                    "video {}: `{}` has {} frames, expected {n}",
                    t.video_id,
                    block.name,
                    t.n_frames()
                )))
            }
            Some(_) => {}
        }
    }
    let n = n_frames.ok_or_else(|| Error::config("no feature sets requested"))?;

    let gather = |modality: Modality| -> Result<(usize, Vec<f32>)> {
        let blocks: Vec<&FeatureBlock> = layout.iter().filter(|b| b.modality == modality).collect();
        let dim: usize = blocks.iter().map(|b| b.dim).sum();
        let mut out = Vec::with_capacity(n * dim);
        let sources = blocks
            .iter()
            .map(|b| find(&b.name))
            .collect::<Result<Vec<_>>>()?;
        for f in 1..=n {
            for t in &sources {
                out.extend_from_slice(t.row(f));
            }
        }
        Ok((dim, out))
    };
    let (visual_dim, visual_data) = gather(Modality::Visual)?;
    let (audio_dim, audio_data) = gather(Modality::Audio)?;
    Ok(AssembledInputs {
        video_id,
        n_frames: n,
        visual_dim,
        audio_dim,
        visual: visual_data,
        audio: audio_data,
        layout,
    })
}
