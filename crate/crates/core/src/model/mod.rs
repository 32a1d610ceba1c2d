//! Encoder-decoder assembly for every decoder variant, plus decoding and
//! checkpoints.

mod checkpoint;
mod config;
mod decode;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    self, AttentionParams, AttentionWeights, AttnKind, AttnMask, EncoderLayerParams, IfmParams, Init,
    LayerNormParams, Linear, ModuleTag, ParamSpec,
};
use crate::data::{BOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{CeStats, ParamStore, Tape, Tensor, Var};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DecoderVariant, ModelConfig, Preset};
pub use decode::Hypothesis;

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerParams {
    /// Target self-attention; absent for [`DecoderVariant::SemIfm`].
    pub tem: Option<AttentionParams>,
    /// TEM residual norm (standard order only).
    pub tem_ln: Option<LayerNormParams>,
    pub sem: AttentionParams,
    /// Norm over `SEM_out + L_prev` feeding TEM in the SEM ⇒ TEM ⇒ IFM order.
    pub sem_ln: Option<LayerNormParams>,
    pub ifm: IfmParams,
}

/// Parameter handles of a whole model.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub src_embed: crate::tensor::ParamId,
    pub tgt_embed: crate::tensor::ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub out_proj: Linear,
}

impl ModelLayout {
    /// Declares every parameter of `config` without allocating storage.
    pub fn declare(config: &ModelConfig) -> Result<(Self, Vec<ParamSpec>)> {
        config.validate()?;
        let d = config.d_model;
        let h = config.n_heads;
        let mut init = Init::new();
        let src_embed = init.embedding("src_embed", config.src_vocab, d);
        let tgt_embed = init.embedding("tgt_embed", config.tgt_vocab, d);
        let mut encoder = Vec::with_capacity(config.n_enc_layers);
        for i in 1..=config.n_enc_layers {
            let p = format!("encoder.layer{i}");
            encoder.push(EncoderLayerParams {
                attn: init.attention(&format!("{p}.self_attn"), d, h)?,
                ln1: init.layer_norm(&format!("{p}.ln1"), d),
                ffn: init.ffn(&format!("{p}.ffn"), d, config.d_ff),
                ln2: init.layer_norm(&format!("{p}.ln2"), d),
            });
        }
        let v = config.variant;
        let mut decoder = Vec::with_capacity(config.n_dec_layers);
        for i in 1..=config.n_dec_layers {
            let p = format!("decoder.layer{i}");
            let tem = if v.has_tem() {
                Some(init.attention(&format!("{p}.tem"), d, h)?)
            } else {
                None
            };
            let tem_ln = if matches!(v, DecoderVariant::Standard | DecoderVariant::Simplified) {
                Some(init.layer_norm(&format!("{p}.tem.ln"), d))
            } else {
                None
            };
            let sem = init.attention(&format!("{p}.sem"), d, h)?;
            let sem_ln = if v == DecoderVariant::SemTemIfm {
                Some(init.layer_norm(&format!("{p}.sem.ln"), d))
            } else {
                None
            };
            let ln1 = init.layer_norm(&format!("{p}.ifm.ln1"), d);
            let ifm = if v.has_ffn() {
                IfmParams {
                    ln1,
                    ffn: Some(init.ffn(&format!("{p}.ifm.ffn"), d, config.d_ff)),
                    ln2: Some(init.layer_norm(&format!("{p}.ifm.ln2"), d)),
                }
            } else {
                IfmParams { ln1, ffn: None, ln2: None }
            };
            decoder.push(DecoderLayerParams {
                tem,
                tem_ln,
                sem,
                sem_ln,
                ifm,
            });
        }
        let out_proj = init.linear("out_proj", d, config.tgt_vocab);
        let layout = Self {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_proj,
        };
        Ok((layout, init.into_specs()))
    }
}

/// Encoder output for one source sentence; immutable once produced.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    /// `[S, d_model]`, the top encoder layer.
    pub representation: Tensor,
    pub source_ids: Vec<usize>,
    pub source_mask: Vec<bool>,
}

/// Captured representations and attention of one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// 1-based layer number.
    pub layer: usize,
    /// Each entry is `[T, d_model]`.
    pub reps: BTreeMap<ModuleTag, Tensor>,
    pub tem_weights: Option<AttentionWeights>,
    pub sem_weights: AttentionWeights,
}

/// Every sub-layer representation of one teacher-forced decoder pass.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DecoderTrace {
    pub layers: Vec<LayerTrace>,
}

impl DecoderTrace {
    pub fn get(&self, layer: usize, tag: ModuleTag) -> Option<&Tensor> {
        self.layers.get(layer.checked_sub(1)?)?.reps.get(&tag)
    }
}

/// Tape nodes produced by one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub reps: Vec<(ModuleTag, Var)>,
    pub tem_weights: Option<Var>,
    pub sem_weights: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    /// `[B, T, tgt_vocab]`
    pub logits: Var,
    pub layers: Vec<LayerVars>,
}

/// Right-padded id matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub batch: usize,
    pub width: usize,
}

impl Padded {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid("cannot pad an empty batch or an empty sequence".into()));
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * width];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * width..b * width + s.len()].copy_from_slice(s);
        }
        Ok(Self {
            ids,
            lens: seqs.iter().map(Vec::len).collect(),
            batch: seqs.len(),
            width,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    /// Optimizer steps applied since initialization.
    pub trained_steps: u64,
    pub store: ParamStore,
    pub layout: ModelLayout,
    pe: Tensor,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.trained_steps == other.trained_steps
            && self.store == other.store
    }
}

/// Builds a model with deterministic initialization from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let (layout, specs) = ModelLayout::declare(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = Init::materialize(&specs, &mut rng)?;
    let pe = blocks::sinusoidal_position_encoding(config.max_len, config.d_model)?;
    Ok(Model {
        config: config.clone(),
        seed,
        trained_steps: 0,
        store,
        layout,
        pe,
    })
}

impl Model {
    fn dropout_p(&self, tape: &Tape) -> f64 {
        if tape.is_training() {
            self.config.dropout
        } else {
            0.0
        }
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Invalid(format!(
                "{what} length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// `embed · sqrt(d) + PE`, then dropout.
    fn embed(&self, tape: &mut Tape, table: crate::tensor::ParamId, p: &Padded) -> Result<Var> {
        self.check_len("sequence", p.width)?;
        let d = self.config.d_model;
        let t = tape.param(&self.store, table);
        let e = tape.embedding(t, &p.ids, &[p.batch, p.width])?;
        let e = tape.scale(e, (d as f64).sqrt())?;
        let pe = tape.constant(vec![p.width, d], self.pe.values()[..p.width * d].to_vec())?;
        let x = tape.add(e, pe)?;
        let drop = self.dropout_p(tape);
        tape.dropout(x, drop)
    }

    /// Runs the encoder stack over a padded batch; returns `[B, S, d]`.
    pub fn encode_vars(&self, tape: &mut Tape, src: &Padded) -> Result<Var> {
        let mut x = self.embed(tape, self.layout.src_embed, src)?;
        let mask = AttnMask::key_padding(&src.lens, src.width, src.width);
        let drop = self.dropout_p(tape);
        for layer in &self.layout.encoder {
            x = blocks::encoder_layer_forward(tape, &self.store, layer, x, Some(&mask), drop)?;
        }
        Ok(x)
    }

    /// Runs the decoder stack with teacher forcing over `tgt_in`.
    pub fn decode_vars(&self, tape: &mut Tape, memory: Var, src_lens: &[usize], tgt_in: &Padded) -> Result<DecoderVars> {
        let (b, t) = (tgt_in.batch, tgt_in.width);
        let s = tape.shape(memory)[1];
        if src_lens.len() != b || tape.shape(memory)[0] != b {
            return Err(Error::shape("decode batch", &[b, t], tape.shape(memory)));
        }
        let drop = self.dropout_p(tape);
        let causal = AttnMask::causal(b, t);
        let src_mask = AttnMask::key_padding(src_lens, t, s);
        let mut x = self.embed(tape, self.layout.tgt_embed, tgt_in)?;
        let mut layers = Vec::with_capacity(self.layout.decoder.len());
        for p in &self.layout.decoder {
            let (out, vars) = self.decoder_layer(tape, p, x, memory, &causal, &src_mask, drop)?;
            layers.push(vars);
            x = out;
        }
        let logits = blocks::linear(tape, &self.store, &self.layout.out_proj, x)?;
        Ok(DecoderVars { logits, layers })
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        tape: &mut Tape,
        p: &DecoderLayerParams,
        prev: Var,
        memory: Var,
        causal: &AttnMask,
        src_mask: &AttnMask,
        drop: f64,
    ) -> Result<(Var, LayerVars)> {
        let store = &self.store;
        let mut reps = Vec::with_capacity(5);
        let (out, tem_w, sem_w, ifm) = match self.config.variant {
            DecoderVariant::Standard | DecoderVariant::Simplified => {
                let tem = blocks::TemParams {
                    attn: p.tem.expect("tem params"),
                    ln: p.tem_ln.expect("tem norm"),
                };
                let (c, wt) = blocks::tem_forward(tape, store, &tem, prev, causal, drop)?;
                let (s, ws) = blocks::sem_forward(tape, store, &p.sem, c, memory, src_mask, drop)?;
                let (l, ifm) = blocks::ifm_forward(tape, store, &p.ifm, s, c, drop)?;
                reps.push((ModuleTag::TemOut, c));
                reps.push((ModuleTag::SemOut, s));
                (l, Some(wt), ws, ifm)
            }
            DecoderVariant::SemIfm => {
                let (s, ws) = blocks::sem_forward(tape, store, &p.sem, prev, memory, src_mask, drop)?;
                let (l, ifm) = blocks::ifm_forward(tape, store, &p.ifm, s, prev, drop)?;
                reps.push((ModuleTag::SemOut, s));
                (l, None, ws, ifm)
            }
            DecoderVariant::SemTemIfm => {
                let (s, ws) = blocks::sem_forward(tape, store, &p.sem, prev, memory, src_mask, drop)?;
                let sd = tape.dropout(s, drop)?;
                let sum = tape.add(sd, prev)?;
                let u = blocks::layer_norm(tape, store, &p.sem_ln.expect("sem norm"), sum)?;
                let attn = p.tem.expect("tem params");
                let (a, wt) = blocks::multi_head_attention(tape, store, &attn, u, u, u, Some(causal), drop)?;
                let (l, ifm) = blocks::ifm_forward(tape, store, &p.ifm, a, u, drop)?;
                reps.push((ModuleTag::TemOut, a));
                reps.push((ModuleTag::SemOut, s));
                (l, Some(wt), ws, ifm)
            }
        };
        reps.push((ModuleTag::IfmAddNorm1, ifm.addnorm1));
        if let Some(f) = ifm.ffn {
            reps.push((ModuleTag::IfmFfn, f));
        }
        reps.push((ModuleTag::IfmAddNorm2, ifm.addnorm2));
        Ok((
            out,
            LayerVars {
                reps,
                tem_weights: tem_w,
                sem_weights: sem_w,
            },
        ))
    }

    /// Teacher-forced summed cross entropy of a batch.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        src: &Padded,
        tgt_in: &Padded,
        tgt_out: &Padded,
        smoothing: f64,
    ) -> Result<(Var, CeStats)> {
        if tgt_in.batch != tgt_out.batch || tgt_in.width != tgt_out.width {
            return Err(Error::shape("target framing", &[tgt_in.batch, tgt_in.width], &[tgt_out.batch, tgt_out.width]));
        }
        let memory = self.encode_vars(tape, src)?;
        let dec = self.decode_vars(tape, memory, &src.lens, tgt_in)?;
        let v = self.config.tgt_vocab;
        let logits = tape.reshape(dec.logits, vec![tgt_in.batch * tgt_in.width, v])?;
        tape.cross_entropy(logits, &tgt_out.ids, PAD, smoothing)
    }

    /// Encodes one source sentence (ids used verbatim, EOS included by the caller).
    pub fn encode(&self, source_ids: &[usize]) -> Result<EncoderState> {
        let src = Padded::new(&[source_ids.to_vec()])?;
        let mut tape = Tape::no_grad();
        let mem = self.encode_vars(&mut tape, &src)?;
        let full = tape.tensor(mem);
        let d = self.config.d_model;
        let representation = Tensor::new(vec![source_ids.len(), d], full.values().to_vec())?;
        Ok(EncoderState {
            representation,
            source_ids: source_ids.to_vec(),
            source_mask: vec![true; source_ids.len()],
        })
    }

    /// Places encoder states on a tape as a padded `[B, S, d]` constant.
    fn memory_from_states(&self, tape: &mut Tape, states: &[&EncoderState]) -> Result<(Var, Vec<usize>)> {
        let d = self.config.d_model;
        let s = states.iter().map(|e| e.source_ids.len()).max().unwrap_or(0);
        let mut vals = vec![0.0; states.len() * s * d];
        let mut lens = Vec::with_capacity(states.len());
        for (b, e) in states.iter().enumerate() {
            let n = e.source_ids.len();
            vals[b * s * d..b * s * d + n * d].copy_from_slice(e.representation.values());
            lens.push(n);
        }
        Ok((tape.constant(vec![states.len(), s, d], vals)?, lens))
    }

    /// Teacher-forced decoder pass over one sentence; `target_in` starts with BOS.
    pub fn decode_forward(&self, enc: &EncoderState, target_in: &[usize]) -> Result<(Tensor, DecoderTrace)> {
        if target_in.first() != Some(&BOS) {
            return Err(Error::Invalid("decoder input must start with BOS".into()));
        }
        let mut tape = Tape::no_grad();
        let (mem, lens) = self.memory_from_states(&mut tape, &[enc])?;
        let tgt = Padded::new(&[target_in.to_vec()])?;
        let dec = self.decode_vars(&mut tape, mem, &lens, &tgt)?;
        let t = target_in.len();
        let logits = Tensor::new(vec![t, self.config.tgt_vocab], tape.value(dec.logits).to_vec())?;
        let trace = self.extract_trace(&tape, &dec, 0, t, enc.source_ids.len())?;
        Ok((logits, trace))
    }

    /// Teacher-forced traces for many sentence pairs in one padded batch.
    /// `sources` include EOS; `targets_in` start with BOS.
    pub fn trace_batch(&self, sources: &[Vec<usize>], targets_in: &[Vec<usize>]) -> Result<Vec<(Tensor, DecoderTrace)>> {
        if sources.len() != targets_in.len() {
            return Err(Error::Invalid("source/target batch sizes differ".into()));
        }
        let src = Padded::new(sources)?;
        let tgt = Padded::new(targets_in)?;
        let mut tape = Tape::no_grad();
        let mem = self.encode_vars(&mut tape, &src)?;
        let dec = self.decode_vars(&mut tape, mem, &src.lens, &tgt)?;
        let v = self.config.tgt_vocab;
        let all = tape.value(dec.logits);
        (0..src.batch)
            .map(|b| {
                let t = tgt.lens[b];
                let off = b * tgt.width * v;
                let logits = Tensor::new(vec![t, v], all[off..off + t * v].to_vec())?;
                Ok((logits, self.extract_trace(&tape, &dec, b, t, src.lens[b])?))
            })
            .collect()
    }

    fn extract_trace(&self, tape: &Tape, dec: &DecoderVars, b: usize, t: usize, s: usize) -> Result<DecoderTrace> {
        let d = self.config.d_model;
        let mut layers = Vec::with_capacity(dec.layers.len());
        for (i, lv) in dec.layers.iter().enumerate() {
            let mut reps = BTreeMap::new();
            for &(tag, var) in &lv.reps {
                let width = tape.shape(var)[1];
                let off = b * width * d;
                let vals = tape.value(var)[off..off + t * d].to_vec();
                reps.insert(tag, Tensor::new(vec![t, d], vals)?);
            }
            let tem_weights = lv
                .tem_weights
                .map(|w| AttentionWeights::from_batch(&tape.tensor(w), b, t, t, i + 1, AttnKind::Tem));
            let sem_weights = AttentionWeights::from_batch(&tape.tensor(lv.sem_weights), b, t, s, i + 1, AttnKind::Sem);
            layers.push(LayerTrace {
                layer: i + 1,
                reps,
                tem_weights,
                sem_weights,
            });
        }
        Ok(DecoderTrace { layers })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}
