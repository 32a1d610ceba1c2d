//! Parameter accounting by decoder operation and throughput measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batchify, frame_source, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::{build_model, DecoderVariant, Model, ModelConfig, ModelLayout};
use crate::training::{train_step, OptimizerState, Schedule, TrainConfig};

/// Parameter counts of one decoder layer, split by operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    pub layer: usize,
    pub self_attn: usize,
    pub enc_attn: usize,
    pub ffn: usize,
    pub layer_norms: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub layers: Vec<LayerParams>,
    /// Decoder-wide sums of the per-layer groups.
    pub self_attn: usize,
    pub enc_attn: usize,
    pub ffn: usize,
    pub layer_norms: usize,
    /// Source/target embeddings and the output projection.
    pub embeddings: usize,
    /// The whole encoder stack.
    pub encoder: usize,
    pub total: usize,
}

impl ParamBreakdown {
    pub fn decoder_total(&self) -> usize {
        self.self_attn + self.enc_attn + self.ffn + self.layer_norms
    }
}

/// Millions with one decimal, as printed in parameter tables.
pub fn millions(n: usize) -> String {
    format!("{:.1}", n as f64 / 1e6)
}

fn classify(name: &str, n: usize, out: &mut ParamBreakdown) -> Result<()> {
    let unknown = || Error::Invalid(format!("cannot classify parameter `{name}`"));
    if ["src_embed", "tgt_embed"].contains(&name) || name.starts_with("out_proj.") {
        out.embeddings += n;
    } else if name.starts_with("encoder.") {
        out.encoder += n;
    } else if let Some(rest) = name.strip_prefix("decoder.layer") {
        let (idx, path) = rest.split_once('.').ok_or_else(unknown)?;
        let layer: usize = idx.parse().map_err(|_| unknown())?;
        if layer == 0 || layer > out.layers.len() {
            return Err(unknown());
        }
        let lp = &mut out.layers[layer - 1];
        let segs: Vec<&str> = path.split('.').collect();
        if segs.iter().any(|s| s.starts_with("ln")) {
            lp.layer_norms += n;
        } else {
            match segs.first().copied() {
                Some("tem") => lp.self_attn += n,
                Some("sem") => lp.enc_attn += n,
                Some("ifm") if segs.get(1) == Some(&"ffn") => lp.ffn += n,
                _ => return Err(unknown()),
            }
        }
        lp.total += n;
    } else {
        return Err(unknown());
    }
    out.total += n;
    Ok(())
}

fn breakdown<'a>(n_dec_layers: usize, params: impl Iterator<Item = (&'a str, usize)>) -> Result<ParamBreakdown> {
    let mut out = ParamBreakdown {
        layers: (1..=n_dec_layers)
            .map(|layer| LayerParams {
                layer,
                ..Default::default()
            })
            .collect(),
        self_attn: 0,
        enc_attn: 0,
        ffn: 0,
        layer_norms: 0,
        embeddings: 0,
        encoder: 0,
        total: 0,
    };
    for (name, n) in params {
        classify(name, n, &mut out)?;
    }
    for l in &out.layers {
        out.self_attn += l.self_attn;
        out.enc_attn += l.enc_attn;
        out.ffn += l.ffn;
        out.layer_norms += l.layer_norms;
    }
    Ok(out)
}

/// Groups a built model's parameters by the operation their name encodes.
pub fn count_params(model: &Model) -> Result<ParamBreakdown> {
    breakdown(
        model.config.n_dec_layers,
        model.store.iter().map(|(_, p)| (p.name.as_str(), p.tensor.len())),
    )
}

/// Same as [`count_params`] without allocating any weights.
pub fn count_params_for(config: &ModelConfig) -> Result<ParamBreakdown> {
    let (_, specs) = ModelLayout::declare(config)?;
    breakdown(config.n_dec_layers, specs.iter().map(|s| (s.name.as_str(), s.numel())))
}

/// Minimum, median and maximum of repeated measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub samples: Vec<f64>,
}

impl Dispersion {
    pub fn of(samples: Vec<f64>) -> Self {
        let mut s = samples.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Self {
            min: s[0],
            median,
            max: s[n - 1],
            samples,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "beam", rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeMode::Greedy => f.write_str("greedy"),
            DecodeMode::Beam(k) => write!(f, "beam{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub reps: usize,
    /// Untimed warm-up steps (train) or sentences (inference) per repetition.
    pub discard: usize,
    pub steps: u64,
    pub batch_tokens: usize,
    pub seed: u64,
    pub max_sentences: usize,
    pub length_penalty: f64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            reps: 3,
            discard: 5,
            steps: 40,
            batch_tokens: 400,
            seed: 1,
            max_sentences: 100,
            length_penalty: 1.0,
        }
    }
}

impl BenchSettings {
    fn check(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Config(format!("benchmarks need at least 3 repetitions, got {}", self.reps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variant: DecoderVariant,
    pub preset: String,
    pub decode_mode: Option<DecodeMode>,
    pub train_words_per_sec: Option<Dispersion>,
    pub infer_sentences_per_sec: Option<Dispersion>,
    pub reps: usize,
    /// True when every inference repetition produced identical tokens.
    pub outputs_stable: Option<bool>,
    pub hardware: String,
}

pub fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}; {threads} hardware threads; {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

fn preset_name(config: &ModelConfig) -> String {
    config.preset.map(|p| p.to_string()).unwrap_or_else(|| "custom".into())
}

/// Training throughput in target tokens per second. Every repetition starts
/// from a fresh model built with the same seed and replays the same batches.
pub fn bench_train(config: &ModelConfig, corpus: &ParallelCorpus, s: &BenchSettings) -> Result<BenchReport> {
    s.check()?;
    corpus.check_vocab(config.src_vocab, config.tgt_vocab)?;
    let batches = batchify(corpus, s.batch_tokens, s.seed, 0)?;
    let tc = TrainConfig {
        batch_tokens: s.batch_tokens,
        seed: s.seed,
        ..Default::default()
    };
    let sched = Schedule::new(config.d_model, tc.warmup_steps)?;
    let total = s.discard as u64 + s.steps;
    let mut samples = Vec::with_capacity(s.reps);
    for _ in 0..s.reps {
        let mut model = build_model(config, s.seed)?;
        let mut opt = OptimizerState::new(&model.store);
        let mut words = 0usize;
        let mut t0 = Instant::now();
        for step in 1..=total {
            if step == s.discard as u64 + 1 {
                t0 = Instant::now();
            }
            let batch = &batches[(step as usize - 1) % batches.len()];
            train_step(&mut model, &mut opt, batch, sched.lr_at(step)?, &tc, step)?;
            if step > s.discard as u64 {
                words += batch.tgt_tokens;
            }
        }
        samples.push(words as f64 / t0.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(BenchReport {
        variant: config.variant,
        preset: preset_name(config),
        decode_mode: None,
        train_words_per_sec: Some(Dispersion::of(samples)),
        infer_sentences_per_sec: None,
        reps: s.reps,
        outputs_stable: None,
        hardware: hardware_note(),
    })
}

fn decode_one(model: &Model, src: &[usize], mode: DecodeMode, s: &BenchSettings) -> Result<Vec<usize>> {
    let enc = model.encode(&frame_source(src))?;
    let max_steps = (2 * src.len() + 2).min(model.config.max_len - 1);
    match mode {
        DecodeMode::Greedy => model.greedy_decode(&enc, max_steps),
        DecodeMode::Beam(k) => model.beam_decode(&enc, k, max_steps, s.length_penalty),
    }
}

/// Inference throughput in sentences per second, one sentence at a time.
pub fn bench_infer(model: &Model, corpus: &ParallelCorpus, mode: DecodeMode, s: &BenchSettings) -> Result<BenchReport> {
    s.check()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("inference benchmark needs sentences".into()));
    }
    corpus.check_vocab(model.config.src_vocab, model.config.tgt_vocab)?;
    let n = corpus.len().min(s.max_sentences.max(1));
    let sents = &corpus.pairs[..n];
    let mut samples = Vec::with_capacity(s.reps);
    let mut first: Option<Vec<Vec<usize>>> = None;
    let mut stable = true;
    for _ in 0..s.reps {
        for p in sents.iter().take(s.discard) {
            decode_one(model, &p.src, mode, s)?;
        }
        let t0 = Instant::now();
        let outs = sents
            .iter()
            .map(|p| decode_one(model, &p.src, mode, s))
            .collect::<Result<Vec<_>>>()?;
        samples.push(n as f64 / t0.elapsed().as_secs_f64().max(1e-9));
        match &first {
            None => first = Some(outs),
            Some(f) => stable &= *f == outs,
        }
    }
    Ok(BenchReport {
        variant: model.config.variant,
        preset: preset_name(&model.config),
        decode_mode: Some(mode),
        train_words_per_sec: None,
        infer_sentences_per_sec: Some(Dispersion::of(samples)),
        reps: s.reps,
        outputs_stable: Some(stable),
        hardware: hardware_note(),
    })
}
