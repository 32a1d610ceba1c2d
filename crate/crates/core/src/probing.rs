//! Forced-decoding probes over captured decoder representations.
//!
//! A probe is a one-layer decoder that reads a captured sequence `H` through
//! cross-attention and is trained to regenerate the source or target
//! sentence. Its per-token NLL on held-out data measures how much of that
//! sentence `H` still carries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, AttnMask, Init, IfmParams, Linear, ModuleTag, TemParams};
use crate::data::{frame_source, frame_target, ParallelCorpus, Split, BOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Model, Padded};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::training::{adam_step, OptimizerState, Schedule};

pub const DUMP_MAGIC: &[u8; 8] = b"DECLABDP";
pub const DUMP_VERSION: u32 = 1;

/// Captured representations of one sentence pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpSentence {
    pub id: usize,
    /// Source words (no EOS).
    pub src: Vec<usize>,
    /// Target words (no EOS).
    pub tgt: Vec<usize>,
    /// `(layer, tag) → [T, d]` with `T = tgt.len() + 1`.
    pub reps: BTreeMap<(usize, ModuleTag), Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationDump {
    pub d_model: usize,
    pub n_layers: usize,
    pub tags: Vec<ModuleTag>,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub split: Split,
    pub sentences: Vec<DumpSentence>,
}

/// Teacher-forced traces of every pair, detached from any tape.
pub fn capture(model: &Model, corpus: &ParallelCorpus, split: Split) -> Result<RepresentationDump> {
    if corpus.is_empty() {
        return Err(Error::Invalid("nothing to capture from an empty corpus".into()));
    }
    corpus.check_vocab(model.config.src_vocab, model.config.tgt_vocab)?;
    let v = model.config.variant;
    let tags: Vec<ModuleTag> = ModuleTag::ALL
        .into_iter()
        .filter(|t| match t {
            ModuleTag::TemOut => v.has_tem(),
            ModuleTag::IfmFfn => v.has_ffn(),
            _ => true,
        })
        .collect();
    let mut sentences = Vec::with_capacity(corpus.len());
    for (ci, chunk) in corpus.pairs.chunks(64).enumerate() {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|p| frame_source(&p.src)).collect();
        let tgts: Vec<Vec<usize>> = chunk.iter().map(|p| frame_target(&p.tgt).0).collect();
        for (k, (_, trace)) in model.trace_batch(&srcs, &tgts)?.into_iter().enumerate() {
            let mut reps = BTreeMap::new();
            for lt in trace.layers {
                for (tag, t) in lt.reps {
                    reps.insert((lt.layer, tag), t);
                }
            }
            let p = &chunk[k];
            sentences.push(DumpSentence {
                id: ci * 64 + k,
                src: p.src.clone(),
                tgt: p.tgt.clone(),
                reps,
            });
        }
    }
    Ok(RepresentationDump {
        d_model: model.config.d_model,
        n_layers: model.config.n_dec_layers,
        tags,
        src_vocab: model.config.src_vocab,
        tgt_vocab: model.config.tgt_vocab,
        split,
        sentences,
    })
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Format("representation dump is truncated".into()));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn ids(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit the dump format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl RepresentationDump {
    /// Binary layout: magic, version, then `n_sentences, n_layers, n_tags,
    /// tag codes, d_model, src_vocab, tgt_vocab, split`; each sentence holds
    /// its id, length-prefixed source and target ids, `T`, and one `[T, d]`
    /// little-endian `f64` matrix per (layer, tag) in layer-major order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        put_u32(&mut out, self.sentences.len())?;
        put_u32(&mut out, self.n_layers)?;
        put_u32(&mut out, self.tags.len())?;
        out.extend(self.tags.iter().map(|t| t.code()));
        put_u32(&mut out, self.d_model)?;
        put_u32(&mut out, self.src_vocab)?;
        put_u32(&mut out, self.tgt_vocab)?;
        out.push(match self.split {
            Split::Train => 0,
            Split::Heldout => 1,
        });
        for s in &self.sentences {
            put_u32(&mut out, s.id)?;
            for ids in [&s.src, &s.tgt] {
                put_u32(&mut out, ids.len())?;
                for &i in ids {
                    put_u32(&mut out, i)?;
                }
            }
            let t = s.tgt.len() + 1;
            put_u32(&mut out, t)?;
            for layer in 1..=self.n_layers {
                for tag in &self.tags {
                    let m = s
                        .reps
                        .get(&(layer, *tag))
                        .ok_or_else(|| Error::Format(format!("sentence {} lacks layer {layer} {tag}", s.id)))?;
                    if m.shape() != [t, self.d_model] {
                        return Err(Error::shape("dump matrix", m.shape(), &[t, self.d_model]));
                    }
                    for v in m.values() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(8)? != DUMP_MAGIC {
            return Err(Error::Format("not a representation dump (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported dump version {version}")));
        }
        let n = r.u32()?;
        let n_layers = r.u32()?;
        let n_tags = r.u32()?;
        let tags = (0..n_tags)
            .map(|_| {
                let c = r.u8()?;
                ModuleTag::from_code(c).ok_or_else(|| Error::Format(format!("unknown tag code {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let d_model = r.u32()?;
        let src_vocab = r.u32()?;
        let tgt_vocab = r.u32()?;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Heldout,
            c => return Err(Error::Format(format!("unknown split code {c}"))),
        };
        let mut sentences = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.u32()?;
            let src = r.ids()?;
            let tgt = r.ids()?;
            let t = r.u32()?;
            if t != tgt.len() + 1 {
                return Err(Error::Format(format!("sentence {id}: {t} rows for {} target words", tgt.len())));
            }
            let mut reps = BTreeMap::new();
            for layer in 1..=n_layers {
                for &tag in &tags {
                    let raw = r.take(8 * t * d_model)?;
                    let vals = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    reps.insert((layer, tag), Tensor::new(vec![t, d_model], vals)?);
                }
            }
            sentences.push(DumpSentence { id, src, tgt, reps });
        }
        if !r.0.is_empty() {
            return Err(Error::Format("trailing bytes after the last sentence".into()));
        }
        Ok(Self {
            d_model,
            n_layers,
            tags,
            src_vocab,
            tgt_vocab,
            split,
            sentences,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn has(&self, layer: usize, tag: ModuleTag) -> bool {
        layer >= 1 && layer <= self.n_layers && self.tags.contains(&tag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeSide {
    Source,
    Target,
}

impl fmt::Display for ProbeSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeSide::Source => "source",
            ProbeSide::Target => "target",
        })
    }
}

impl FromStr for ProbeSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "source" | "src" => Ok(ProbeSide::Source),
            "target" | "tgt" => Ok(ProbeSide::Target),
            _ => Err(Error::Invalid(format!("unknown probe side `{s}`"))),
        }
    }
}

/// Cross-attention restriction applied by the probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every position of `H` is visible.
    Unmasked,
    /// Predicting target word `i` sees only `H[0..=i]`, the rows computed
    /// before word `i` was fed to the decoder.
    History,
}

impl MaskMode {
    pub fn for_side(side: ProbeSide) -> Self {
        match side {
            ProbeSide::Source => MaskMode::Unmasked,
            ProbeSide::Target => MaskMode::History,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub side: ProbeSide,
    pub layer: usize,
    pub tag: ModuleTag,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub steps: u64,
    pub batch_tokens: usize,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub seed: u64,
    pub mask_mode: MaskMode,
}

impl ProbeConfig {
    /// Defaults: NMT width and heads, `d_ff = 2·d_model`.
    pub fn new(side: ProbeSide, layer: usize, tag: ModuleTag, d_model: usize, n_heads: usize) -> Self {
        Self {
            side,
            layer,
            tag,
            d_model,
            n_heads,
            d_ff: 2 * d_model,
            steps: 300,
            batch_tokens: 400,
            warmup_steps: 100,
            lr_scale: 1.0,
            seed: 1,
            mask_mode: MaskMode::for_side(side),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || !self.d_model.is_multiple_of(self.n_heads) || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "probe geometry d_model={} n_heads={} d_ff={} is invalid",
                self.d_model, self.n_heads, self.d_ff
            )));
        }
        if self.mask_mode != MaskMode::for_side(self.side) {
            return Err(Error::Config(format!(
                "{} probing requires mask mode {:?}",
                self.side,
                MaskMode::for_side(self.side)
            )));
        }
        if self.layer == 0 {
            return Err(Error::Config("probed layers are numbered from 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ProbeLayout {
    embed: ParamId,
    self_attn: TemParams,
    cross: blocks::AttentionParams,
    ifm: IfmParams,
    out: Linear,
}

/// One-layer decoder with its own embeddings and output projection.
#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub config: ProbeConfig,
    pub vocab: usize,
    pub store: ParamStore,
    layout: ProbeLayout,
    pe: Tensor,
    max_len: usize,
}

pub fn build_probe(config: &ProbeConfig, vocab: usize, seed: u64) -> Result<ProbeModel> {
    config.validate()?;
    if vocab <= crate::data::RESERVED {
        return Err(Error::Config(format!("probe vocabulary {vocab} is too small")));
    }
    let d = config.d_model;
    let mut init = Init::new();
    let embed = init.embedding("probe.embed", vocab, d);
    let self_attn = TemParams {
        attn: init.attention("probe.self_attn", d, config.n_heads)?,
        ln: init.layer_norm("probe.self_attn.ln", d),
    };
    let cross = init.attention("probe.cross_attn", d, config.n_heads)?;
    let ifm = IfmParams {
        ln1: init.layer_norm("probe.ln1", d),
        ffn: Some(init.ffn("probe.ffn", d, config.d_ff)),
        ln2: Some(init.layer_norm("probe.ln2", d)),
    };
    let out = init.linear("probe.out_proj", d, vocab);
    let store = Init::materialize(init.specs(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let max_len = 256;
    Ok(ProbeModel {
        config: config.clone(),
        vocab,
        store,
        layout: ProbeLayout {
            embed,
            self_attn,
            cross,
            ifm,
            out,
        },
        pe: blocks::sinusoidal_position_encoding(max_len, d)?,
        max_len,
    })
}

/// One probe example: the representation rows and the sequence to recover.
struct Example<'a> {
    h: &'a Tensor,
    x: &'a [usize],
}

fn examples<'a>(dump: &'a RepresentationDump, cfg: &ProbeConfig) -> Result<Vec<Example<'a>>> {
    if !dump.has(cfg.layer, cfg.tag) {
        return Err(Error::Invalid(format!(
            "dump has no layer {} {} representation",
            cfg.layer, cfg.tag
        )));
    }
    if dump.d_model != cfg.d_model {
        return Err(Error::Config(format!(
            "probe width {} differs from representation width {}",
            cfg.d_model, dump.d_model
        )));
    }
    Ok(dump
        .sentences
        .iter()
        .map(|s| Example {
            h: &s.reps[&(cfg.layer, cfg.tag)],
            x: match cfg.side {
                ProbeSide::Source => &s.src,
                ProbeSide::Target => &s.tgt,
            },
        })
        .collect())
}

impl ProbeModel {
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn side_vocab(&self, dump: &RepresentationDump) -> Result<()> {
        let v = match self.config.side {
            ProbeSide::Source => dump.src_vocab,
            ProbeSide::Target => dump.tgt_vocab,
        };
        if v != self.vocab {
            return Err(Error::Config(format!(
                "probe vocabulary {} does not match the {} side ({v})",
                self.vocab, self.config.side
            )));
        }
        Ok(())
    }

    /// Logits `[B, N, V]` for recovering each `x` from its `h`.
    fn forward_vars(&self, tape: &mut Tape, batch: &[Example]) -> Result<(Var, Padded, Padded)> {
        let d = self.config.d_model;
        let b = batch.len();
        let th = batch.iter().map(|e| e.h.shape()[0]).max().unwrap_or(0);
        let mut hv = vec![0.0; b * th * d];
        let mut h_lens = Vec::with_capacity(b);
        for (i, e) in batch.iter().enumerate() {
            let n = e.h.shape()[0];
            hv[i * th * d..i * th * d + n * d].copy_from_slice(e.h.values());
            h_lens.push(n);
        }
        let h = tape.constant(vec![b, th, d], hv)?;

        let inputs: Vec<Vec<usize>> = batch
            .iter()
            .map(|e| std::iter::once(BOS).chain(e.x[..e.x.len() - 1].iter().copied()).collect())
            .collect();
        let targets: Vec<Vec<usize>> = batch.iter().map(|e| e.x.to_vec()).collect();
        let inp = Padded::new(&inputs)?;
        let tgt = Padded::new(&targets)?;
        if inp.width > self.max_len {
            return Err(Error::Invalid(format!("probe sequence of length {} is too long", inp.width)));
        }

        let table = tape.param(&self.store, self.layout.embed);
        let e = tape.embedding(table, &inp.ids, &[b, inp.width])?;
        let e = tape.scale(e, (d as f64).sqrt())?;
        let pe = tape.constant(vec![inp.width, d], self.pe.values()[..inp.width * d].to_vec())?;
        let x = tape.add(e, pe)?;

        let causal = AttnMask::causal(b, inp.width);
        let masked = self.config.mask_mode == MaskMode::History;
        let cross_mask = AttnMask::from_fn(b, inp.width, th, |bb, i, j| j < h_lens[bb] && (!masked || j <= i));
        let (c, _) = blocks::tem_forward(tape, &self.store, &self.layout.self_attn, x, &causal, 0.0)?;
        let (s, _) = blocks::sem_forward(tape, &self.store, &self.layout.cross, c, h, &cross_mask, 0.0)?;
        let (l, _) = blocks::ifm_forward(tape, &self.store, &self.layout.ifm, s, c, 0.0)?;
        let logits = blocks::linear(tape, &self.store, &self.layout.out, l)?;
        Ok((logits, inp, tgt))
    }

    /// Next-token logits `[N, V]` for one sequence, for inspection.
    pub fn logits(&self, h: &Tensor, x: &[usize]) -> Result<Tensor> {
        if x.is_empty() {
            return Err(Error::Invalid("cannot probe an empty sequence".into()));
        }
        let mut tape = Tape::no_grad();
        let (logits, _, _) = self.forward_vars(&mut tape, &[Example { h, x }])?;
        Tensor::new(vec![x.len(), self.vocab], tape.value(logits).to_vec())
    }

    fn loss(&self, tape: &mut Tape, batch: &[Example]) -> Result<(Var, crate::tensor::CeStats)> {
        let (logits, inp, tgt) = self.forward_vars(tape, batch)?;
        let flat = tape.reshape(logits, vec![inp.batch * inp.width, self.vocab])?;
        tape.cross_entropy(flat, &tgt.ids, PAD, 0.0)
    }
}

fn probe_batches(exs: &[Example], batch_tokens: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(epoch));
    let mut order: Vec<usize> = (0..exs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| exs[i].x.len());
    let mut groups = Vec::new();
    let mut cur = Vec::new();
    let mut tok = 0;
    for i in order {
        let n = exs[i].x.len().max(exs[i].h.shape()[0]);
        if !cur.is_empty() && tok + n > batch_tokens {
            groups.push(std::mem::take(&mut cur));
            tok = 0;
        }
        cur.push(i);
        tok += n;
    }
    groups.push(cur);
    groups.shuffle(&mut rng);
    groups
}

/// Trains the probe on a captured dump; returns the mean NLL per token of
/// each step. The NMT model is not involved: the dump is plain data.
pub fn probe_train(probe: &mut ProbeModel, dump: &RepresentationDump) -> Result<Vec<f64>> {
    probe.side_vocab(dump)?;
    let cfg = probe.config.clone();
    let exs = examples(dump, &cfg)?;
    if exs.is_empty() {
        return Err(Error::Invalid("probe training dump is empty".into()));
    }
    let mut sched = Schedule::new(cfg.d_model, cfg.warmup_steps)?;
    sched.scale = cfg.lr_scale;
    let mut opt = OptimizerState::new(&probe.store);
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < cfg.steps {
        for group in probe_batches(&exs, cfg.batch_tokens, cfg.seed, epoch) {
            if step >= cfg.steps {
                break;
            }
            step += 1;
            let batch: Vec<Example> = group.iter().map(|&i| Example { h: exs[i].h, x: exs[i].x }).collect();
            let mut tape = Tape::new();
            let (loss, stats) = probe.loss(&mut tape, &batch)?;
            let loss = tape.scale(loss, 1.0 / stats.tokens as f64)?;
            tape.backward(loss, &mut probe.store)?;
            drop(tape);
            adam_step(&mut probe.store, &mut opt, sched.lr_at(step)?, 1.0)?;
            curve.push(stats.nll_sum / stats.tokens as f64);
        }
        epoch += 1;
    }
    Ok(curve)
}

/// One cell of the probing grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub layer: usize,
    pub tag: ModuleTag,
    pub side: ProbeSide,
    pub nll_sum: f64,
    pub tokens: usize,
    pub nll_per_token: f64,
    pub ppl: f64,
}

/// Forced-decoding NLL of every held-out sequence, summed.
pub fn probe_eval(probe: &ProbeModel, dump: &RepresentationDump) -> Result<ProbeCell> {
    probe.side_vocab(dump)?;
    let cfg = &probe.config;
    let exs = examples(dump, cfg)?;
    if exs.is_empty() {
        return Err(Error::Invalid("held-out dump is empty".into()));
    }
    let mut nll_sum = 0.0;
    let mut tokens = 0;
    for chunk in exs.chunks(64) {
        let mut tape = Tape::no_grad();
        let (_, stats) = probe.loss(&mut tape, chunk)?;
        nll_sum += stats.nll_sum;
        tokens += stats.tokens;
    }
    let nll_per_token = nll_sum / tokens as f64;
    Ok(ProbeCell {
        layer: cfg.layer,
        tag: cfg.tag,
        side: cfg.side,
        nll_sum,
        tokens,
        nll_per_token,
        ppl: nll_per_token.exp(),
    })
}

/// Probe settings shared by every cell of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeBudget {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub steps: u64,
    pub batch_tokens: usize,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub seed: u64,
}

impl ProbeBudget {
    pub fn from_config(c: &ProbeConfig) -> Self {
        Self {
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            steps: c.steps,
            batch_tokens: c.batch_tokens,
            warmup_steps: c.warmup_steps,
            lr_scale: c.lr_scale,
            seed: c.seed,
        }
    }

    pub fn config(&self, side: ProbeSide, layer: usize, tag: ModuleTag) -> ProbeConfig {
        ProbeConfig {
            side,
            layer,
            tag,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            steps: self.steps,
            batch_tokens: self.batch_tokens,
            warmup_steps: self.warmup_steps,
            lr_scale: self.lr_scale,
            seed: self.seed,
            mask_mode: MaskMode::for_side(side),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub budget: ProbeBudget,
    pub cells: Vec<ProbeCell>,
}

impl ProbeReport {
    /// Trains and evaluates one independent probe per requested cell.
    pub fn run(
        budget: &ProbeBudget,
        train: &RepresentationDump,
        heldout: &RepresentationDump,
        cells: &[(ProbeSide, usize, ModuleTag)],
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(cells.len());
        for &(side, layer, tag) in cells {
            let cfg = budget.config(side, layer, tag);
            let vocab = match side {
                ProbeSide::Source => train.src_vocab,
                ProbeSide::Target => train.tgt_vocab,
            };
            let mut probe = build_probe(&cfg, vocab, budget.seed)?;
            probe_train(&mut probe, train)?;
            out.push(probe_eval(&probe, heldout)?);
        }
        Ok(Self {
            budget: budget.clone(),
            cells: out,
        })
    }

    /// Every (side, layer, tag) cell present in `dump`.
    pub fn all_cells(dump: &RepresentationDump, sides: &[ProbeSide]) -> Vec<(ProbeSide, usize, ModuleTag)> {
        let mut v = Vec::new();
        for &side in sides {
            for layer in 1..=dump.n_layers {
                for &tag in &dump.tags {
                    v.push((side, layer, tag));
                }
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, ReorderRule, SyntheticTaskSpec};
    use crate::model::{build_model, DecoderVariant, ModelConfig};

    fn tiny_model(v: DecoderVariant, layers: usize) -> (Model, ParallelCorpus) {
        let spec = SyntheticTaskSpec::new(12, 2, 5, ReorderRule::AdjacentSwap, 4).unwrap();
        let corpus = gen_synthetic(&spec, 6).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: layers,
            src_vocab: 12,
            tgt_vocab: 12,
            dropout: 0.0,
            max_len: 16,
            variant: v,
            preset: None,
        };
        (build_model(&cfg, 2).unwrap(), corpus)
    }

    #[test]
    fn capture_cardinality_and_round_trip() {
        let (m, c) = tiny_model(DecoderVariant::Standard, 6);
        let dump = capture(&m, &c, Split::Train).unwrap();
        for s in &dump.sentences {
            assert_eq!(s.reps.len(), 5 * 6);
            assert!(s.reps.values().all(|t| t.shape()[0] == s.tgt.len() + 1));
        }
        let bytes = dump.to_bytes().unwrap();
        let back = RepresentationDump::from_bytes(&bytes).unwrap();
        assert_eq!(back, dump);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(RepresentationDump::from_bytes(&bytes[..bytes.len() - 3]).is_err());

        let (m, c) = tiny_model(DecoderVariant::Simplified, 2);
        let dump = capture(&m, &c, Split::Heldout).unwrap();
        assert!(!dump.tags.contains(&ModuleTag::IfmFfn));
        assert!(dump.sentences[0].reps.keys().all(|(_, t)| *t != ModuleTag::IfmFfn));
    }

    #[test]
    fn probe_construction() {
        let cfg = ProbeConfig::new(ProbeSide::Source, 1, ModuleTag::SemOut, 8, 2);
        let a = build_probe(&cfg, 12, 5).unwrap();
        let b = build_probe(&cfg, 12, 5).unwrap();
        assert_eq!(a.store, b.store);
        let c = build_probe(&cfg, 12, 6).unwrap();
        assert_eq!(a.num_params(), c.num_params());
        let h = Tensor::filled(vec![3, 8], 0.5);
        let logits = a.logits(&h, &[4, 5, 6, 7]).unwrap();
        assert_eq!(logits.shape(), &[4, 12]);

        let mut bad = cfg.clone();
        bad.mask_mode = MaskMode::History;
        assert!(build_probe(&bad, 12, 0).is_err());
        let mut bad = ProbeConfig::new(ProbeSide::Target, 1, ModuleTag::SemOut, 8, 2);
        bad.mask_mode = MaskMode::Unmasked;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn side_and_layer_mismatches_are_errors() {
        let (m, c) = tiny_model(DecoderVariant::SemIfm, 2);
        let dump = capture(&m, &c, Split::Train).unwrap();
        let cfg = ProbeConfig::new(ProbeSide::Source, 1, ModuleTag::TemOut, 8, 2);
        let mut p = build_probe(&cfg, 12, 0).unwrap();
        assert!(probe_train(&mut p, &dump).is_err());
        let cfg = ProbeConfig::new(ProbeSide::Source, 1, ModuleTag::SemOut, 8, 2);
        let mut p = build_probe(&cfg, 13, 0).unwrap();
        assert!(probe_train(&mut p, &dump).is_err());
    }
}
