//! Experiment settings: built-in defaults, then a TOML file, then
//! `--set section.key=value` overrides, then dedicated flags.

use std::path::Path;

use declab::bench::BenchSettings;
use declab::data::ReorderRule;
use declab::model::{DecoderVariant, Preset};
use declab::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub data: DataSettings,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub probe: ProbeSettings,
    pub bench: BenchSection,
}

/// Synthetic task used by `gen-data`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Per-side vocabulary size, the 4 reserved ids included.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub rule: ReorderRule,
    pub block_size: usize,
    pub seed: u64,
    pub pairs: usize,
    pub heldout: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            vocab: 24,
            min_len: 3,
            max_len: 8,
            rule: ReorderRule::AdjacentSwap,
            block_size: 3,
            seed: 7,
            pairs: 2200,
            heldout: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub preset: Preset,
    pub variant: DecoderVariant,
    /// Preset default when absent.
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub dropout: f64,
    pub max_len: Option<usize>,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            preset: Preset::Toy,
            variant: DecoderVariant::Standard,
            enc_layers: None,
            dec_layers: None,
            dropout: 0.1,
            max_len: None,
            seed: 1,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, src_vocab: usize, tgt_vocab: usize) -> declab::model::ModelConfig {
        let mut c = declab::model::ModelConfig::preset(self.preset, src_vocab, tgt_vocab)
            .with_variant(self.variant)
            .with_dropout(self.dropout);
        if let Some(n) = self.enc_layers {
            c.n_enc_layers = n;
        }
        if let Some(n) = self.dec_layers {
            c.n_dec_layers = n;
        }
        if let Some(n) = self.max_len {
            c.max_len = n;
        }
        c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_tokens: usize,
    pub warmup: usize,
    pub lr_scale: f64,
    pub label_smoothing: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_tokens: 400,
            warmup: 200,
            lr_scale: 1.0,
            label_smoothing: 0.1,
            clip_norm: None,
            seed: 1,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainSettings {
    pub fn config(&self, out: &Path) -> TrainConfig {
        TrainConfig {
            batch_tokens: self.batch_tokens,
            max_steps: self.steps,
            label_smoothing: self.label_smoothing,
            seed: self.seed,
            warmup_steps: self.warmup,
            lr_scale: self.lr_scale,
            clip_norm: self.clip_norm,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            checkpoint_dir: Some(out.to_path_buf()),
            log_path: Some(out.join("train_log.jsonl")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    /// Probe width and heads; the NMT model's when absent.
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub steps: u64,
    pub batch_tokens: usize,
    pub warmup: usize,
    pub lr_scale: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            d_model: None,
            n_heads: None,
            steps: 300,
            batch_tokens: 400,
            warmup: 100,
            lr_scale: 1.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub reps: usize,
    pub discard: usize,
    pub steps: u64,
    pub batch_tokens: usize,
    pub seed: u64,
    pub max_sentences: usize,
    pub length_penalty: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchSettings::default();
        Self {
            reps: b.reps,
            discard: b.discard,
            steps: b.steps,
            batch_tokens: b.batch_tokens,
            seed: b.seed,
            max_sentences: b.max_sentences,
            length_penalty: b.length_penalty,
        }
    }
}

impl BenchSection {
    pub fn settings(&self) -> BenchSettings {
        BenchSettings {
            reps: self.reps,
            discard: self.discard,
            steps: self.steps,
            batch_tokens: self.batch_tokens,
            seed: self.seed,
            max_sentences: self.max_sentences,
            length_penalty: self.length_penalty,
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Settings {
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects SECTION.KEY=VALUE, got `{s}`")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| CliError::Usage(format!("--set key `{key}` needs a section, e.g. train.steps")))?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let Some(t) = entry.as_table_mut() else {
                return Err(CliError::Usage(format!("`{section}` is not a section")));
            };
            t.insert(field.to_string(), parse_value(raw.trim()));
        }
        toml::Value::Table(table)
            .try_into::<Settings>()
            .map_err(|e| CliError::Usage(format!("invalid settings: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize to TOML")
    }
}
