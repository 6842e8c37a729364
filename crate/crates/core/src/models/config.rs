use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Lstm,
    Transformer,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(EncoderKind::Lstm),
            "transformer" => Ok(EncoderKind::Transformer),
            other => Err(Error::config(format!(
                "unknown encoder `{other}` (expected lstm or transformer)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            hidden: 256,
            layers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ffn_dim: usize,
    /// Adds fixed sinusoidal position encodings after fusion.
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 4,
            heads: 4,
            dropout: 0.3,
            ffn_dim: 2048,
            positional_encoding: true,
        }
    }
}

/// Segment length `l` and stride `p`, in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub l: usize,
    pub p: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { l: 128, p: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub d_model: usize,
    pub lstm: LstmConfig,
    pub transformer: TransformerConfig,
    /// Hidden sizes of the classification head.
    pub head: Vec<usize>,
    /// Dropout applied before each hidden affine of the head.
    pub head_dropout: f64,
    pub classes: usize,
    pub segment: SegmentConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Transformer,
            d_model: 1024,
            lstm: LstmConfig::default(),
            transformer: TransformerConfig::default(),
            head: vec![512, 256],
            head_dropout: 0.3,
            classes: NUM_CLASSES,
            segment: SegmentConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_encoder(encoder: EncoderKind) -> Self {
        ModelConfig {
            encoder,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(format!("model config: {msg}")));
        if self.classes != NUM_CLASSES {
            return fail(format!("classes must be {NUM_CLASSES}, got {}", self.classes));
        }
        if self.d_model == 0 || self.head.contains(&0) {
            return fail("layer sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return fail(format!("head_dropout {} outside [0, 1)", self.head_dropout));
        }
        let SegmentConfig { l, p } = self.segment;
        if l == 0 || p == 0 || p > l {
            return fail(format!("segment needs 1 <= p <= l, got l={l}, p={p}"));
        }
        match self.encoder {
            EncoderKind::Lstm => {
                if self.lstm.hidden == 0 || self.lstm.layers == 0 {
                    return fail("lstm hidden size and layer count must be positive".into());
                }
                if p != l {
                    return fail(format!(
                        "lstm segments must not overlap (p must equal l), got l={l}, p={p}"
                    ));
                }
            }
            EncoderKind::Transformer => {
                let t = &self.transformer;
                if t.layers == 0 || t.heads == 0 || t.ffn_dim == 0 {
                    return fail("transformer layers, heads and ffn_dim must be positive".into());
                }
                if !self.d_model.is_multiple_of(t.heads) {
                    return fail(format!(
                        "d_model {} is not divisible by {} heads",
                        self.d_model, t.heads
                    ));
                }
                if !(0.0..1.0).contains(&t.dropout) {
                    return fail(format!("transformer dropout {} outside [0, 1)", t.dropout));
                }
            }
        }
        Ok(())
    }
}
