use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSpec, FeatureTrack, LabelTrack, Manifest, Modality, Splits, VideoEntry, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const SYNTH_VISUAL: &str = "synth_visual";
pub const SYNTH_AUDIO: &str = "synth_audio";

/// Parameters of the class-conditional Gaussian fixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// Standard deviation of the per-frame noise around the class mean.
    pub sigma: f64,
    pub seed: u64,
    /// Trailing videos assigned to the validation split.
    pub val_videos: usize,
    /// Label runs have lengths drawn uniformly from this inclusive range.
    pub min_run: usize,
    pub max_run: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            videos: 20,
            frames: 200,
            visual_dim: 64,
            audio_dim: 32,
            sigma: 1.0,
            seed: 0,
            val_videos: 4,
            min_run: 10,
            max_run: 40,
        }
    }
}

/// Writes `manifest.json`, `labels/*.csv` and `features/*.mmft` under `dir`
/// and returns the manifest. Class means (one per class and modality, entries
/// from a standard normal) are drawn first; then every video gets
/// piecewise-constant labels and features `mean[label] + sigma * N(0, I)`.
pub fn synth_dataset(config: &SynthConfig, dir: &Path) -> Result<Manifest> {
    if config.videos == 0 || config.frames == 0 || config.visual_dim == 0 || config.audio_dim == 0 {
        return Err(Error::config("synth sizes must be positive"));
    }
    if config.val_videos >= config.videos {
        return Err(Error::config(format!(
            "{} validation videos leave no training videos out of {}",
            config.val_videos, config.videos
        )));
    }
    if config.min_run == 0 || config.min_run > config.max_run {
        return Err(Error::config(format!(
            "label run range {}..={} is empty",
            config.min_run, config.max_run
        )));
    }
    if !(config.sigma >= 0.0 && config.sigma.is_finite()) {
        return Err(Error::config(format!("sigma must be finite and >= 0, got {}", config.sigma)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let means_v: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| (0..config.visual_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let means_a: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| (0..config.audio_dim).map(|_| normal(&mut rng)).collect())
        .collect();

    let mut videos = Vec::with_capacity(config.videos);
    for v in 0..config.videos {
        let id = format!("synth_{v:03}");
        let mut labels = Vec::with_capacity(config.frames);
        while labels.len() < config.frames {
            let class = rng.random_range(0..NUM_CLASSES) as i8;
            let run = rng.random_range(config.min_run..=config.max_run);
            let take = run.min(config.frames - labels.len());
            labels.extend(std::iter::repeat_n(class, take));
        }
        let draw = |means: &[Vec<f64>], dim: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
            let mut out = Vec::with_capacity(config.frames * dim);
            for &y in &labels {
                for m in &means[y as usize] {
                    out.push((m + config.sigma * normal(rng)) as f32);
                }
            }
            out
        };
        let visual = draw(&means_v, config.visual_dim, &mut rng);
        let audio = draw(&means_a, config.audio_dim, &mut rng);

        let label_file = format!("labels/{id}.csv");
        let mut csv = Vec::new();
        LabelTrack::new(id.clone(), labels)?.write_csv(&mut csv)?;
        write_atomic(&dir.join(&label_file), &csv)?;

        let mut features = BTreeMap::new();
        for (name, dim, data) in [
            (SYNTH_VISUAL, config.visual_dim, visual),
            (SYNTH_AUDIO, config.audio_dim, audio),
        ] {
            let rel = format!("features/{id}.{name}.mmft");
            FeatureTrack::complete(id.clone(), name, dim, data)?.save(&dir.join(&rel))?;
            features.insert(name.to_string(), rel);
        }
        videos.push(VideoEntry {
            id,
            n_frames: config.frames,
            label_file,
            features,
        });
    }

    let n_train = config.videos - config.val_videos;
    let splits = Splits {
        train: videos[..n_train].iter().map(|v| v.id.clone()).collect(),
        val: videos[n_train..].iter().map(|v| v.id.clone()).collect(),
    };
    let mut manifest = Manifest::new(videos, splits, dir);
    manifest.feature_sets.insert(
        SYNTH_VISUAL.into(),
        FeatureSpec {
            dim: config.visual_dim,
            modality: Modality::Visual,
        },
    );
    manifest.feature_sets.insert(
        SYNTH_AUDIO.into(),
        FeatureSpec {
            dim: config.audio_dim,
            modality: Modality::Audio,
        },
    );
    manifest.validate()?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
