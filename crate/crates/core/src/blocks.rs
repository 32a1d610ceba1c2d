//! Attention, feed-forward and the three functional decoder sub-layers.
//!
//! A decoder layer is split by what each piece consumes:
//!
//! * **TEM** (target exploitation): causal self-attention plus its own
//!   residual and layer norm, `C = LN(SelfAtt(L_prev) + L_prev)`.
//! * **SEM** (source exploitation): encoder attention alone. Its output is
//!   the raw attention result; the residual that follows it belongs to IFM.
//! * **IFM** (information fusion): `Add-Norm I`, feed-forward and
//!   `Add-Norm II`. The simplified form keeps only `Add-Norm I`.
//!
//! All functions work on batched `[B, T, d]` activations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mask, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Which representation a trace entry holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleTag {
    #[serde(rename = "tem_out")]
    TemOut,
    #[serde(rename = "sem_out")]
    SemOut,
    #[serde(rename = "ifm_addnorm1")]
    IfmAddNorm1,
    #[serde(rename = "ifm_ffn")]
    IfmFfn,
    #[serde(rename = "ifm_addnorm2")]
    IfmAddNorm2,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 5] = [
        ModuleTag::TemOut,
        ModuleTag::SemOut,
        ModuleTag::IfmAddNorm1,
        ModuleTag::IfmFfn,
        ModuleTag::IfmAddNorm2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleTag::TemOut => "tem_out",
            ModuleTag::SemOut => "sem_out",
            ModuleTag::IfmAddNorm1 => "ifm_addnorm1",
            ModuleTag::IfmFfn => "ifm_ffn",
            ModuleTag::IfmAddNorm2 => "ifm_addnorm2",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl std::str::FromStr for ModuleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Invalid(format!("unknown module tag `{s}`")))
    }
}

impl std::fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttnKind {
    Tem,
    Sem,
}

/// Per-head attention matrices of one sentence at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    /// `[n_heads][tgt_len][src_len]`
    pub per_head: Vec<Vec<Vec<f64>>>,
    pub layer_index: usize,
    pub module_tag: AttnKind,
}

impl AttentionWeights {
    /// Slices sentence `b` out of a `[B, H, Tq, Tk]` weight tensor, keeping
    /// the first `tq` queries and `tk` keys.
    pub fn from_batch(w: &Tensor, b: usize, tq: usize, tk: usize, layer_index: usize, module_tag: AttnKind) -> Self {
        let s = w.shape();
        let (h, sq, sk) = (s[1], s[2], s[3]);
        let vals = w.values();
        let per_head = (0..h)
            .map(|hh| {
                (0..tq)
                    .map(|i| {
                        let off = ((b * h + hh) * sq + i) * sk;
                        vals[off..off + tk].to_vec()
                    })
                    .collect()
            })
            .collect();
        Self {
            per_head,
            layer_index,
            module_tag,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.per_head.len()
    }
}

/// How a parameter is filled when a layout is materialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    /// `U(-bound, bound)`
    Uniform(f64),
    Fill(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: InitKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter specs in declaration order, handing out the
/// [`ParamId`] each will receive once materialized. Building a layout
/// allocates no parameter storage.
#[derive(Debug, Default)]
pub struct Init {
    specs: Vec<ParamSpec>,
}

impl Init {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }

    fn push(&mut self, name: String, shape: Vec<usize>, kind: InitKind) -> ParamId {
        self.specs.push(ParamSpec { name, shape, kind });
        ParamId(self.specs.len() - 1)
    }

    /// Fills every spec in order from `rng`.
    pub fn materialize(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for spec in specs {
            let n = spec.numel();
            let vals = match spec.kind {
                InitKind::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                InitKind::Fill(v) => vec![v; n],
            };
            store.add(spec.name.clone(), Tensor::new(spec.shape.clone(), vals)?)?;
        }
        Ok(store)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` matrix of shape `[fan_in, fan_out]`.
    pub fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.push(name.to_string(), vec![fan_in, fan_out], InitKind::Uniform(bound))
    }

    /// `[vocab, d]` table scaled by `1/sqrt(d)`.
    pub fn embedding(&mut self, name: &str, vocab: usize, d: usize) -> ParamId {
        let bound = 1.0 / (d as f64).sqrt();
        self.push(name.to_string(), vec![vocab, d], InitKind::Uniform(bound))
    }

    pub fn filled(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        self.push(name.to_string(), shape, InitKind::Fill(value))
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.matrix(&format!("{prefix}.w"), d_in, d_out),
            b: self.filled(&format!("{prefix}.b"), vec![d_out], 0.0),
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: self.filled(&format!("{prefix}.gain"), vec![d], 1.0),
            bias: self.filled(&format!("{prefix}.bias"), vec![d], 0.0),
        }
    }

    pub fn attention(&mut self, prefix: &str, d: usize, n_heads: usize) -> Result<AttentionParams> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("d_model {d} is not divisible by n_heads {n_heads}")));
        }
        Ok(AttentionParams {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
            n_heads,
        })
    }

    pub fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnParams {
        FfnParams {
            l1: self.linear(&format!("{prefix}.l1"), d, d_ff),
            l2: self.linear(&format!("{prefix}.l2"), d_ff, d),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    /// `[d_in, d_out]`
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct TemParams {
    pub attn: AttentionParams,
    pub ln: LayerNormParams,
}

/// IFM parameters; `ffn` and `ln2` are absent in the simplified form.
#[derive(Clone, Copy, Debug)]
pub struct IfmParams {
    pub ln1: LayerNormParams,
    pub ffn: Option<FfnParams>,
    pub ln2: Option<LayerNormParams>,
}

impl IfmParams {
    pub fn is_simplified(&self) -> bool {
        self.ffn.is_none()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub ffn: FfnParams,
    pub ln2: LayerNormParams,
}

/// Batched attention mask over `[B, Tq, Tk]`, expanded across heads on use.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, tq: usize, tk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * tq * tk {
            return Err(Error::shape("attention mask", &[batch, tq, tk], &[allowed.len()]));
        }
        Ok(Self { batch, tq, tk, allowed })
    }

    pub fn from_fn(batch: usize, tq: usize, tk: usize, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(batch * tq * tk);
        for b in 0..batch {
            for i in 0..tq {
                for j in 0..tk {
                    allowed.push(f(b, i, j));
                }
            }
        }
        Self { batch, tq, tk, allowed }
    }

    /// Lower-triangular self-attention mask.
    pub fn causal(batch: usize, t: usize) -> Self {
        Self::from_fn(batch, t, t, |_, i, j| j <= i)
    }

    /// Hides key positions at or beyond each sentence's length.
    pub fn key_padding(key_lens: &[usize], tq: usize, tk: usize) -> Self {
        Self::from_fn(key_lens.len(), tq, tk, |b, _, j| j < key_lens[b])
    }

    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.tq + i) * self.tk + j]
    }

    fn expand(&self, heads: usize) -> Mask {
        let plane = self.tq * self.tk;
        let mut allowed = Vec::with_capacity(self.allowed.len() * heads);
        for b in 0..self.batch {
            let src = &self.allowed[b * plane..(b + 1) * plane];
            for _ in 0..heads {
                allowed.extend_from_slice(src);
            }
        }
        Mask::new(vec![self.batch, heads, self.tq, self.tk], allowed).expect("mask shape")
    }
}

pub fn linear(tape: &mut Tape, store: &ParamStore, lin: &Linear, x: Var) -> Result<Var> {
    let w = tape.param(store, lin.w);
    let b = tape.param(store, lin.b);
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, p: &LayerNormParams, x: Var) -> Result<Var> {
    let g = tape.param(store, p.gain);
    let b = tape.param(store, p.bias);
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Position-wise `max(0, x W1 + b1) W2 + b2`.
pub fn ffn(tape: &mut Tape, store: &ParamStore, p: &FfnParams, x: Var) -> Result<Var> {
    let h = linear(tape, store, &p.l1, x)?;
    let h = tape.relu(h)?;
    linear(tape, store, &p.l2, h)
}

/// Multi-head scaled dot-product attention.
///
/// `q_in` is `[B, Tq, d]`, `k_in`/`v_in` are `[B, Tk, d]`. Returns the
/// projected output `[B, Tq, d]` and the pre-dropout weights `[B, H, Tq, Tk]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: Option<&AttnMask>,
    dropout: f64,
) -> Result<(Var, Var)> {
    let qs = tape.shape(q_in).to_vec();
    let ks = tape.shape(k_in).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || tape.shape(v_in) != ks.as_slice() {
        return Err(Error::shape("multi_head_attention", &qs, &ks));
    }
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    let h = p.n_heads;
    if h == 0 || d % h != 0 {
        return Err(Error::Config(format!("d_model {d} is not divisible by n_heads {h}")));
    }
    let dh = d / h;
    let split = |tape: &mut Tape, x: Var, t: usize| -> Result<Var> {
        let r = tape.reshape(x, vec![b, t, h, dh])?;
        tape.permute(r, &[0, 2, 1, 3])
    };
    let q = linear(tape, store, &p.q, q_in)?;
    let q = split(tape, q, tq)?;
    let k = linear(tape, store, &p.k, k_in)?;
    let k = split(tape, k, tk)?;
    let v = linear(tape, store, &p.v, v_in)?;
    let v = split(tape, v, tk)?;

    let scores = tape.matmul_ext(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let expanded = match mask {
        Some(m) => {
            if (m.batch, m.tq, m.tk) != (b, tq, tk) {
                return Err(Error::shape("attention mask", &[m.batch, m.tq, m.tk], &[b, tq, tk]));
            }
            Some(m.expand(h))
        }
        None => None,
    };
    let weights = tape.softmax(scores, expanded.as_ref())?;
    let wd = tape.dropout(weights, dropout)?;
    let ctx = tape.matmul(wd, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, vec![b, tq, d])?;
    let out = linear(tape, store, &p.o, ctx)?;
    Ok((out, weights))
}

/// Sinusoidal table `[max_len, d]` with `sin` on even and `cos` on odd columns.
pub fn sinusoidal_position_encoding(max_len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("position encoding needs an even width, got {d}")));
    }
    if max_len == 0 {
        return Err(Error::Config("position encoding needs max_len >= 1".into()));
    }
    let mut v = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
            let angle = pos as f64 * freq;
            v[pos * d + 2 * i] = angle.sin();
            v[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d], v)
}

/// Target exploitation: `C = LN(drop(SelfAtt(prev)) + prev)` under `mask`.
pub fn tem_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &TemParams,
    prev: Var,
    mask: &AttnMask,
    dropout: f64,
) -> Result<(Var, Var)> {
    let (a, w) = multi_head_attention(tape, store, &p.attn, prev, prev, prev, Some(mask), dropout)?;
    let a = tape.dropout(a, dropout)?;
    let sum = tape.add(a, prev)?;
    let c = layer_norm(tape, store, &p.ln, sum)?;
    Ok((c, w))
}

/// Source exploitation: raw encoder attention, no residual and no norm.
pub fn sem_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    query: Var,
    memory: Var,
    mask: &AttnMask,
    dropout: f64,
) -> Result<(Var, Var)> {
    if tape.shape(memory).get(1).copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid("encoder attention over an empty source".into()));
    }
    multi_head_attention(tape, store, p, query, memory, memory, Some(mask), dropout)
}

/// Intermediate IFM representations. In the simplified form `ffn` is
/// absent and `addnorm2` is the same node as `addnorm1`.
#[derive(Clone, Copy, Debug)]
pub struct IfmInternals {
    pub addnorm1: Var,
    pub ffn: Option<Var>,
    pub addnorm2: Var,
}

/// Information fusion of the SEM stream `s` with the stream `c`.
///
/// Standard: `d1 = LN(drop(s) + c)`, `f = FFN(d1)`, `l = LN(drop(f) + d1)`.
/// Simplified: `l = LN(drop(s) + c)`.
pub fn ifm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &IfmParams,
    s: Var,
    c: Var,
    dropout: f64,
) -> Result<(Var, IfmInternals)> {
    if tape.shape(s) != tape.shape(c) {
        return Err(Error::shape("ifm_forward", tape.shape(s), tape.shape(c)));
    }
    let sd = tape.dropout(s, dropout)?;
    let sum = tape.add(sd, c)?;
    let d1 = layer_norm(tape, store, &p.ln1, sum)?;
    match (&p.ffn, &p.ln2) {
        (Some(ffn_p), Some(ln2)) => {
            let f = ffn(tape, store, ffn_p, d1)?;
            let fd = tape.dropout(f, dropout)?;
            let sum2 = tape.add(fd, d1)?;
            let l = layer_norm(tape, store, ln2, sum2)?;
            Ok((
                l,
                IfmInternals {
                    addnorm1: d1,
                    ffn: Some(f),
                    addnorm2: l,
                },
            ))
        }
        (None, None) => Ok((
            d1,
            IfmInternals {
                addnorm1: d1,
                ffn: None,
                addnorm2: d1,
            },
        )),
        _ => Err(Error::Config("IFM needs both or neither of ffn and ln2".into())),
    }
}

/// Standard post-norm encoder layer.
pub fn encoder_layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderLayerParams,
    x: Var,
    mask: Option<&AttnMask>,
    dropout: f64,
) -> Result<Var> {
    let (a, _) = multi_head_attention(tape, store, &p.attn, x, x, x, mask, dropout)?;
    let a = tape.dropout(a, dropout)?;
    let s = tape.add(a, x)?;
    let x1 = layer_norm(tape, store, &p.ln1, s)?;
    let f = ffn(tape, store, &p.ffn, x1)?;
    let f = tape.dropout(f, dropout)?;
    let s2 = tape.add(f, x1)?;
    layer_norm(tape, store, &p.ln2, s2)
}
