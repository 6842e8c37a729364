//! Fusion, temporal encoders and the classification head.

mod config;
mod fusion;
mod head;
mod layers;
mod lstm;
mod transformer;

pub use config::{EncoderKind, LstmConfig, ModelConfig, SegmentConfig, TransformerConfig};
pub use fusion::FusionLayer;
pub use head::ClassificationHead;
pub use layers::{LayerNorm, Linear, Mode};
pub use lstm::{LstmCarry, LstmEncoder, LstmLayer, LstmState};
pub use transformer::{sinusoidal_table, EncoderLayer, TransformerEncoder};

use std::ops::Range;

use mmexpr_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{segment_video, VideoData};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub enum Encoder {
    Lstm(LstmEncoder),
    Transformer(TransformerEncoder),
}

/// Fusion, encoder and head with parameter handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub fusion: FusionLayer,
    pub encoder: Encoder,
    pub head: ClassificationHead,
}

impl Model {
    /// Builds the model and its freshly initialised parameters. Parameters are
    /// drawn in registration order (fusion, encoder, head) from one stream
    /// seeded by `seed`.
    pub fn new(config: &ModelConfig, input_dim: usize, seed: u64) -> Result<(Model, ParamStore<f32>)> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::config("model input dimension must be positive"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = FusionLayer::new(&mut store, input_dim, config.d_model, &mut rng)?;
        let (encoder, enc_dim) = match config.encoder {
            EncoderKind::Lstm => (
                Encoder::Lstm(LstmEncoder::new(
                    &mut store,
                    config.d_model,
                    config.lstm.hidden,
                    config.lstm.layers,
                    &mut rng,
                )?),
                config.lstm.hidden,
            ),
            EncoderKind::Transformer => (
                Encoder::Transformer(TransformerEncoder::new(
                    &mut store,
                    config.d_model,
                    &config.transformer,
                    config.segment.l,
                    &mut rng,
                )?),
                config.d_model,
            ),
        };
        let head = ClassificationHead::new(
            &mut store,
            enc_dim,
            &config.head,
            config.classes,
            config.head_dropout,
            &mut rng,
        )?;
        Ok((
            Model {
                config: config.clone(),
                input_dim,
                fusion,
                encoder,
                head,
            },
            store,
        ))
    }

    /// Rebuilds the model around stored parameters, checking names and shapes.
    pub fn with_params(config: &ModelConfig, input_dim: usize, params: &ParamStore<f32>) -> Result<(Model, ParamStore<f32>)> {
        let (model, mut store) = Model::new(config, input_dim, 0)?;
        store.load_from(params)?;
        Ok((model, store))
    }

    /// Per-frame logits of a whole video (`n_frames x classes`), eval mode.
    /// Frames covered by several overlapping segments get the mean of their
    /// segment logits.
    pub fn predict_logits(&self, params: &ParamStore<f32>, video: &VideoData) -> Result<Tensor<f32>> {
        if video.input_dim != self.input_dim {
            return Err(Error::validation(format!(
                "video {}: {} input features per frame, model expects {}",
                video.id, video.input_dim, self.input_dim
            )));
        }
        let SegmentConfig { l, p } = self.config.segment;
        let classes = self.config.classes;
        let spans = segment_video(video.n_frames, l, p)?;
        let mut sum = vec![0f64; video.n_frames * classes];
        let mut count = vec![0u32; video.n_frames];
        let mut carry = match &self.encoder {
            Encoder::Lstm(e) => Some(LstmCarry::<f32>::new(video.id.clone(), e)),
            Encoder::Transformer(_) => None,
        };
        for span in spans {
            let seg = video.segment(span);
            let mut g = Graph::frozen(params);
            let x = g.constant(Tensor::new(&[seg.window(), self.input_dim], seg.features)?);
            let fused = self.fusion.forward(&mut g, x)?;
            let encoded = match (&self.encoder, carry.as_mut()) {
                (Encoder::Lstm(e), Some(c)) => e.encode_segment(&mut g, fused, c, span.index)?,
                (Encoder::Transformer(t), _) => t.encode(&mut g, fused, &mut Mode::Eval, None)?,
                (Encoder::Lstm(_), None) => unreachable!("lstm carry is created above"),
            };
            let logits = self.head.forward(&mut g, encoded, &mut Mode::Eval)?;
            let values = g.value(logits);
            for (r, frame) in span.rows().enumerate() {
                count[frame] += 1;
                for (acc, &v) in sum[frame * classes..(frame + 1) * classes]
                    .iter_mut()
                    .zip(values.row(r))
                {
                    *acc += v as f64;
                }
            }
        }
        let data = sum
            .chunks(classes)
            .zip(&count)
            .flat_map(|(row, &c)| row.iter().map(move |&s| (s / c as f64) as f32))
            .collect();
        Ok(Tensor::new(&[video.n_frames, classes], data)?)
    }

    /// Transformer path over segments stacked row-wise in `x`
    /// (`rows x input_dim`): fusion, encoder and head.
    pub fn transformer_logits<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        spans: &[Range<usize>],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let Encoder::Transformer(t) = &self.encoder else {
            return Err(Error::config("model has no transformer encoder"));
        };
        let fused = self.fusion.forward(g, x)?;
        let encoded = t.encode_batch(g, fused, spans, mode, None)?;
        self.head.forward(g, encoded, mode)
    }
}
