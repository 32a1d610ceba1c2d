use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::RESERVED;
use crate::error::{Error, Result};

/// Decoder sub-layer stacking order and IFM form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// TEM ⇒ SEM ⇒ IFM
    Standard,
    /// SEM ⇒ TEM ⇒ IFM
    SemTemIfm,
    /// SEM ⇒ IFM, no target self-attention
    SemIfm,
    /// TEM ⇒ SEM ⇒ single Add&Norm
    Simplified,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 4] = [
        DecoderVariant::Standard,
        DecoderVariant::SemTemIfm,
        DecoderVariant::SemIfm,
        DecoderVariant::Simplified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderVariant::Standard => "standard",
            DecoderVariant::SemTemIfm => "sem_tem_ifm",
            DecoderVariant::SemIfm => "sem_ifm",
            DecoderVariant::Simplified => "simplified",
        }
    }

    pub fn has_tem(self) -> bool {
        self != DecoderVariant::SemIfm
    }

    pub fn has_ffn(self) -> bool {
        self != DecoderVariant::Simplified
    }
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown decoder variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Base,
    Big,
    Toy,
}

impl Preset {
    /// `(d_model, n_heads, d_ff)`
    pub fn geometry(self) -> (usize, usize, usize) {
        match self {
            Preset::Base => (512, 8, 2048),
            Preset::Big => (1024, 16, 4096),
            Preset::Toy => (64, 4, 128),
        }
    }

    pub fn default_layers(self) -> usize {
        match self {
            Preset::Base | Preset::Big => 6,
            Preset::Toy => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Base => "base",
            Preset::Big => "big",
            Preset::Toy => "toy",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Preset::Base),
            "big" => Ok(Preset::Big),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub variant: DecoderVariant,
    /// `None` for free-form geometries.
    pub preset: Option<Preset>,
}

impl ModelConfig {
    pub fn preset(preset: Preset, src_vocab: usize, tgt_vocab: usize) -> Self {
        let (d_model, n_heads, d_ff) = preset.geometry();
        let layers = preset.default_layers();
        Self {
            d_model,
            n_heads,
            d_ff,
            n_enc_layers: layers,
            n_dec_layers: layers,
            src_vocab,
            tgt_vocab,
            dropout: 0.1,
            max_len: if preset == Preset::Toy { 64 } else { 256 },
            variant: DecoderVariant::Standard,
            preset: Some(preset),
        }
    }

    pub fn base(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self::preset(Preset::Base, src_vocab, tgt_vocab)
    }

    pub fn big(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self::preset(Preset::Big, src_vocab, tgt_vocab)
    }

    pub fn toy(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self::preset(Preset::Toy, src_vocab, tgt_vocab)
    }

    pub fn with_variant(mut self, variant: DecoderVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_dec_layers(mut self, n: usize) -> Self {
        self.n_dec_layers = n;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Checks every structural constraint, naming the first violated one.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model {} must be even for position encodings", self.d_model));
        }
        for (name, v) in [("src_vocab", self.src_vocab), ("tgt_vocab", self.tgt_vocab)] {
            if v <= RESERVED {
                return bad(format!("{name} {v} leaves no room beyond the {RESERVED} reserved ids"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(p) = self.preset {
            let (d, h, ff) = p.geometry();
            if (self.d_model, self.n_heads, self.d_ff) != (d, h, ff) {
                return bad(format!(
                    "preset {p} requires d_model={d}, n_heads={h}, d_ff={ff}; got {}, {}, {}",
                    self.d_model, self.n_heads, self.d_ff
                ));
            }
            if matches!(p, Preset::Base | Preset::Big) && self.n_enc_layers != 6 {
                return bad(format!("preset {p} requires 6 encoder layers, got {}", self.n_enc_layers));
            }
        }
        Ok(())
    }
}
