//! RDrop objective, the Adam training loop, and the synthetic fixture.

mod rdrop;
mod synth;

pub use rdrop::{rdrop_loss, rdrop_value};
pub use synth::{synth_dataset, SynthConfig, SYNTH_AUDIO, SYNTH_VISUAL};

use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use mmexpr_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{segment_video, SegmentSpan, VideoData, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::evaluation::{confusion_valid, macro_f1, ConfusionMatrix, MetricReport};
use crate::io::write_atomic;
use crate::models::{Encoder, LstmCarry, Mode, Model};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Segments per step for the Transformer.
    pub batch_segments: usize,
    /// Videos per batch for the LSTM.
    pub batch_videos: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 25,
            alpha: 5.0,
            seed: 0,
            batch_segments: 8,
            batch_videos: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.batch_segments == 0 || self.batch_videos == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        Ok(())
    }
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Frame-weighted mean RDrop loss over the epoch's batches.
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub per_class_f1: [f64; NUM_CLASSES],
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub best_params: ParamStore<f32>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode macro F1 of `model` over `videos`, counting frames with a valid
/// label.
pub fn evaluate_model(model: &Model, params: &ParamStore<f32>, videos: &[VideoData]) -> Result<MetricReport> {
    let mut cm = ConfusionMatrix::new();
    for v in videos {
        let logits = model.predict_logits(params, v)?;
        let preds: Vec<u8> = (0..v.n_frames).map(|r| argmax(logits.row(r)) as u8).collect();
        cm.merge(&confusion_valid(v.labels.labels(), &preds)?);
    }
    Ok(macro_f1(&cm))
}

/// Trains `params` in place for `config.epochs` epochs and returns the log and
/// the parameters of the epoch with the best validation macro F1 (earliest on
/// ties). Without validation videos the training videos are scored instead.
///
/// With `out_dir`, `best.ckpt`, `last.ckpt` and `train_log.jsonl` are
/// rewritten after every epoch. `on_epoch` sees each record as it is made
/// and ends training early by returning `Break`.
/// Given equal inputs and seed, parameters and log values other than
/// `wall_ms` are bitwise reproducible.
pub fn train(
    model: &Model,
    params: &mut ParamStore<f32>,
    train_videos: &[VideoData],
    val_videos: &[VideoData],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_videos.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    for v in train_videos.iter().chain(val_videos) {
        if v.input_dim != model.input_dim {
            return Err(Error::validation(format!(
                "video {}: {} input features per frame, model expects {}",
                v.id, v.input_dim, model.input_dim
            )));
        }
    }
    let scored = if val_videos.is_empty() { train_videos } else { val_videos };

    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut ctx = EpochContext {
            model,
            adam: &mut adam,
            rng: &mut rng,
            config,
            epoch,
            batch: 0,
            loss_sum: 0.0,
            frames: 0,
        };
        match &model.encoder {
            Encoder::Transformer(_) => ctx.transformer_epoch(params, train_videos)?,
            Encoder::Lstm(_) => ctx.lstm_epoch(params, train_videos)?,
        }
        let train_loss = if ctx.frames == 0 { 0.0 } else { ctx.loss_sum / ctx.frames as f64 };
        let report = evaluate_model(model, params, scored)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_macro_f1: report.macro_f1,
            per_class_f1: report.per_class_f1,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if best.as_ref().is_none_or(|b| report.macro_f1 > b.1) {
            best = Some((epoch, report.macro_f1, params.clone()));
            if let Some(dir) = out_dir {
                save_checkpoint(params, &dir.join(BEST_CHECKPOINT))?;
            }
        }
        let flow = on_epoch(&record);
        log.push(record);
        if let Some(dir) = out_dir {
            save_checkpoint(params, &dir.join(LAST_CHECKPOINT))?;
            write_log(&log, &dir.join(TRAIN_LOG))?;
        }
        if flow.is_break() {
            break;
        }
    }
    let (best_epoch, best_val_macro_f1, best_params) =
        best.unwrap_or_else(|| (0, 0.0, params.clone()));
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_macro_f1,
        best_params,
    })
}

pub fn save_checkpoint(params: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    params.write_checkpoint(&mut bytes)?;
    write_atomic(path, &bytes)
}

fn write_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

struct EpochContext<'a> {
    model: &'a Model,
    adam: &'a mut Adam<f32>,
    rng: &'a mut ChaCha8Rng,
    config: &'a TrainConfig,
    epoch: usize,
    batch: usize,
    loss_sum: f64,
    frames: usize,
}

impl EpochContext<'_> {
    /// Shuffled segments from all videos, `batch_segments` per step, each
    /// segment attending only within itself.
    fn transformer_epoch(&mut self, params: &mut ParamStore<f32>, videos: &[VideoData]) -> Result<()> {
        let seg = self.model.config.segment;
        let mut items: Vec<(usize, SegmentSpan)> = Vec::new();
        for (vi, v) in videos.iter().enumerate() {
            items.extend(segment_video(v.n_frames, seg.l, seg.p)?.into_iter().map(|s| (vi, s)));
        }
        items.shuffle(self.rng);
        for chunk in items.chunks(self.config.batch_segments) {
            let dim = self.model.input_dim;
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            let mut spans = Vec::with_capacity(chunk.len());
            for &(vi, span) in chunk {
                let v = &videos[vi];
                let start = targets.len();
                rows.extend_from_slice(v.frame_rows(span));
                targets.extend_from_slice(&v.labels.labels()[span.rows()]);
                spans.push(start..targets.len());
            }
            self.batch += 1;
            let grads = {
                let mut g = Graph::with_params(params);
                let loss = self.guard(|rng| {
                    let x = g.constant(Tensor::new(&[targets.len(), dim], rows)?);
                    let fused = self.model.fusion.forward(&mut g, x)?;
                    let Encoder::Transformer(t) = &self.model.encoder else {
                        unreachable!("transformer epoch on a transformer model")
                    };
                    let mut pass = |g: &mut Graph<'_, f32>| -> Result<Var> {
                        let mut mode = Mode::Train(&mut *rng);
                        let h = t.encode_batch(g, fused, &spans, &mut mode, None)?;
                        self.model.head.forward(g, h, &mut mode)
                    };
                    let l1 = pass(&mut g)?;
                    let l2 = pass(&mut g)?;
                    rdrop_loss(&mut g, l1, l2, &targets, self.config.alpha)
                })?;
                match loss {
                    Some(loss) => Some(self.finish(&g, loss, &targets)?),
                    None => None,
                }
            };
            if let Some(grads) = grads {
                self.adam.step(params, &grads)?;
            }
        }
        Ok(())
    }

    /// Shuffled videos, `batch_videos` per batch. Step `k` of a batch runs
    /// segment `k` of every member that has one, starting from the state each
    /// video carried out of segment `k - 1`. The encoder runs once per
    /// segment; only the head is applied twice.
    fn lstm_epoch(&mut self, params: &mut ParamStore<f32>, videos: &[VideoData]) -> Result<()> {
        let Encoder::Lstm(enc) = &self.model.encoder else {
            unreachable!("lstm epoch on an lstm model")
        };
        let seg = self.model.config.segment;
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(self.rng);
        let dim = self.model.input_dim;
        for chunk in order.chunks(self.config.batch_videos) {
            let members: Vec<&VideoData> = chunk.iter().map(|&i| &videos[i]).collect();
            let spans: Vec<Vec<SegmentSpan>> = members
                .iter()
                .map(|v| segment_video(v.n_frames, seg.l, seg.p))
                .collect::<Result<_>>()?;
            let mut carries: Vec<LstmCarry<f32>> =
                members.iter().map(|v| LstmCarry::new(v.id.clone(), enc)).collect();
            let steps = spans.iter().map(Vec::len).max().unwrap_or(0);
            for k in 0..steps {
                self.batch += 1;
                let mut targets = Vec::new();
                let grads = {
                    let mut g = Graph::with_params(params);
                    let loss = self.guard(|rng| {
                        let mut encoded = Vec::new();
                        for ((v, sp), carry) in members.iter().zip(&spans).zip(carries.iter_mut()) {
                            let Some(&span) = sp.get(k) else { continue };
                            let rows = v.frame_rows(span).to_vec();
                            let x = g.constant(Tensor::new(&[span.len(), dim], rows)?);
                            let fused = self.model.fusion.forward(&mut g, x)?;
                            encoded.push(enc.encode_segment(&mut g, fused, carry, span.index)?);
                            targets.extend_from_slice(&v.labels.labels()[span.rows()]);
                        }
                        let h = g.concat(&encoded, 0)?;
                        let l1 = self.model.head.forward(&mut g, h, &mut Mode::Train(&mut *rng))?;
                        let l2 = self.model.head.forward(&mut g, h, &mut Mode::Train(&mut *rng))?;
                        rdrop_loss(&mut g, l1, l2, &targets, self.config.alpha)
                    })?;
                    match loss {
                        Some(loss) => Some(self.finish(&g, loss, &targets)?),
                        None => None,
                    }
                };
                if let Some(grads) = grads {
                    self.adam.step(params, &grads)?;
                }
            }
        }
        Ok(())
    }

    /// Runs a forward closure, reporting NaNs with epoch and batch.
    fn guard<T>(&mut self, f: impl FnOnce(&mut ChaCha8Rng) -> Result<T>) -> Result<T> {
        let (epoch, batch) = (self.epoch, self.batch);
        f(self.rng).map_err(|e| match e {
            Error::Tensor(TensorError::NaN { op, input }) => Error::NonFiniteLoss {
                epoch,
                batch,
                detail: format!("NaN entering {op} (input {input})"),
            },
            other => other,
        })
    }

    fn finish(&mut self, g: &Graph<'_, f32>, loss: Var, targets: &[i8]) -> Result<mmexpr_tensor::Gradients<f32>> {
        let value = g.value(loss).item().unwrap_or(f32::NAN);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                batch: self.batch,
                detail: format!("loss {value}"),
            });
        }
        let valid = targets.iter().filter(|&&y| y >= 0).count();
        self.loss_sum += value as f64 * valid as f64;
        self.frames += valid;
        Ok(g.backward(loss)?)
    }
}
