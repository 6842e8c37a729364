//! Per-frame predictions, their CSV form, and vote fusion.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Tolerance on the per-frame probability sum.
pub const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTrack {
    pub video_id: String,
    pub preds: Vec<u8>,
    pub probs: Vec<[f64; NUM_CLASSES]>,
}

fn softmax(row: &[f32]) -> [f64; NUM_CLASSES] {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut out = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v as f64 - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    out
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl PredictionTrack {
    pub fn new(video_id: impl Into<String>, preds: Vec<u8>, probs: Vec<[f64; NUM_CLASSES]>) -> Result<Self> {
        let video_id = video_id.into();
        if preds.len() != probs.len() {
            return Err(Error::validation(format!(
                "video {video_id}: {} predictions but {} probability rows",
                preds.len(),
                probs.len()
            )));
        }
        for (i, (&p, row)) in preds.iter().zip(&probs).enumerate() {
            if let Some(msg) = row_problem(p, row) {
                return Err(Error::validation(format!("video {video_id}, frame {}: {msg}", i + 1)));
            }
        }
        Ok(PredictionTrack { video_id, preds, probs })
    }

    /// Softmax of each logit row; the prediction is the first maximal logit.
    pub fn from_logits(video_id: impl Into<String>, logits: &mmexpr_tensor::Tensor<f32>) -> Result<Self> {
        if logits.rank() != 2 || logits.last_dim() != NUM_CLASSES {
            return Err(Error::validation(format!(
                "expected [frames, {NUM_CLASSES}] logits, got {:?}",
                logits.shape()
            )));
        }
        let n = logits.shape()[0];
        let mut preds = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for r in 0..n {
            let row = logits.row(r);
            let as_f64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            preds.push(argmax(&as_f64) as u8);
            probs.push(softmax(row));
        }
        Self::new(video_id, preds, probs)
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let csv_err = |e: csv::Error| Error::validation(format!("writing predictions: {e}"));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(header()).map_err(csv_err)?;
        for (i, (p, row)) in self.preds.iter().zip(&self.probs).enumerate() {
            let mut rec = vec![(i + 1).to_string(), p.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.8e}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::validation(format!("writing predictions: {e}")))?;
        Ok(())
    }

    /// Parses the `frame,pred,prob_0..prob_7` CSV. Frames must run 1, 2, ...
    pub fn read_csv<R: Read>(reader: R, video_id: &str, source: &str) -> Result<Self> {
        let parse_err = |line: u64, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let got = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        if got.iter().map(str::trim).ne(header()) {
            return Err(parse_err(
                1,
                format!("expected header `{}`", header().join(",")),
            ));
        }
        let mut preds = Vec::new();
        let mut probs = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != NUM_CLASSES + 2 {
                return Err(parse_err(line, format!("expected {} fields, got {}", NUM_CLASSES + 2, rec.len())));
            }
            let frame: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("frame `{}` is not an integer", &rec[0])))?;
            if frame != preds.len() + 1 {
                return Err(parse_err(line, format!("expected frame {}, got {frame}", preds.len() + 1)));
            }
            let pred: u8 = rec[1]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("prediction `{}` is not a class index", &rec[1])))?;
            let mut row = [0.0; NUM_CLASSES];
            for (c, v) in row.iter_mut().enumerate() {
                *v = rec[c + 2]
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("prob_{c} `{}` is not a number", &rec[c + 2])))?;
            }
            if let Some(msg) = row_problem(pred, &row) {
                return Err(parse_err(line, msg));
            }
            preds.push(pred);
            probs.push(row);
        }
        Ok(PredictionTrack {
            video_id: video_id.to_string(),
            preds,
            probs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_csv(&mut bytes)?;
        write_atomic(path, &bytes)
    }

    /// Reads `path`; the video id is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), &id, &path.display().to_string())
    }
}

fn header() -> Vec<String> {
    let mut h = vec!["frame".to_string(), "pred".to_string()];
    h.extend((0..NUM_CLASSES).map(|c| format!("prob_{c}")));
    h
}

fn row_problem(pred: u8, row: &[f64; NUM_CLASSES]) -> Option<String> {
    if pred as usize >= NUM_CLASSES {
        return Some(format!("prediction {pred} outside 0..{NUM_CLASSES}"));
    }
    if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Some("probabilities must be finite and nonnegative".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Some(format!("probabilities sum to {sum}, not 1"));
    }
    None
}

/// Fuses member tracks frame by frame: the most frequent label wins; among
/// tied labels the highest mean probability wins; an exact remaining tie goes
/// to the lowest class index. Fused probabilities are the member mean. Member
/// order does not affect the result.
pub fn vote(tracks: &[PredictionTrack]) -> Result<PredictionTrack> {
    if tracks.len() < 2 {
        return Err(Error::validation(format!(
            "vote needs at least 2 members, got {}",
            tracks.len()
        )));
    }
    let first = &tracks[0];
    for t in &tracks[1..] {
        if t.video_id != first.video_id {
            return Err(Error::validation(format!(
                "vote members disagree on video: `{}` vs `{}`",
                first.video_id, t.video_id
            )));
        }
        if t.len() != first.len() {
            return Err(Error::validation(format!(
                "video {}: members have {} and {} frames",
                first.video_id,
                first.len(),
                t.len()
            )));
        }
    }
    let k = tracks.len() as f64;
    let mut preds = Vec::with_capacity(first.len());
    let mut probs = Vec::with_capacity(first.len());
    let mut column = Vec::with_capacity(tracks.len());
    for f in 0..first.len() {
        let mut counts = [0usize; NUM_CLASSES];
        for t in tracks {
            counts[t.preds[f] as usize] += 1;
        }
        let mut mean = [0.0; NUM_CLASSES];
        for (c, m) in mean.iter_mut().enumerate() {
            // Summing in sorted order makes the mean independent of member order.
            column.clear();
            column.extend(tracks.iter().map(|t| t.probs[f][c]));
            column.sort_by(f64::total_cmp);
            *m = column.iter().sum::<f64>() / k;
        }
        let top = *counts.iter().max().unwrap_or(&0);
        let mut winner = None::<usize>;
        for c in (0..NUM_CLASSES).filter(|&c| counts[c] == top) {
            if winner.is_none_or(|w| mean[c] > mean[w]) {
                winner = Some(c);
            }
        }
        preds.push(winner.unwrap_or(0) as u8);
        probs.push(mean);
    }
    Ok(PredictionTrack {
        video_id: first.video_id.clone(),
        preds,
        probs,
    })
}

/// Ensemble description: member prediction directories and the fusion rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<PathBuf>,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default = "default_tie_break")]
    pub tie_break: String,
}

fn default_strategy() -> String {
    "majority_vote".into()
}

fn default_tie_break() -> String {
    "mean_probability".into()
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(Error::config(format!(
                "an ensemble needs at least 2 members, got {}",
                self.members.len()
            )));
        }
        if self.strategy != "majority_vote" {
            return Err(Error::config(format!("unknown strategy `{}`", self.strategy)));
        }
        if self.tie_break != "mean_probability" {
            return Err(Error::config(format!("unknown tie_break `{}`", self.tie_break)));
        }
        Ok(())
    }
}

/// Loads every `*.csv` in `dir`, keyed by video id.
pub fn load_prediction_dir(dir: &Path) -> Result<BTreeMap<String, PredictionTrack>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let track = PredictionTrack::load(&path)?;
            out.insert(track.video_id.clone(), track);
        }
    }
    Ok(out)
}

/// Votes every video present in all member directories. Videos missing from
/// any member are an error.
pub fn vote_dirs(members: &[BTreeMap<String, PredictionTrack>]) -> Result<Vec<PredictionTrack>> {
    let Some(first) = members.first() else {
        return Err(Error::validation("no ensemble members"));
    };
    for (i, m) in members.iter().enumerate() {
        if m.keys().ne(first.keys()) {
            return Err(Error::validation(format!(
                "member {} covers different videos than member 1",
                i + 1
            )));
        }
    }
    first
        .keys()
        .map(|id| {
            let tracks: Vec<PredictionTrack> = members.iter().map(|m| m[id].clone()).collect();
            vote(&tracks)
        })
        .collect()
}
