//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod grads;

use std::collections::BTreeSet;

use declab::model::{DecoderVariant, Model};
use declab::tensor::{ParamStore, Tape, Var};

pub type Mat = Vec<Vec<f64>>;

pub fn p<'a>(m: &'a Model, name: &str) -> &'a [f64] {
    m.store
        .by_name(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .tensor
        .values()
}

fn linear(m: &Model, prefix: &str, x: &Mat) -> Mat {
    let w = p(m, &format!("{prefix}.w"));
    let b = p(m, &format!("{prefix}.b"));
    let d_out = b.len();
    let d_in = w.len() / d_out;
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), d_in);
            (0..d_out)
                .map(|o| b[o] + (0..d_in).map(|i| row[i] * w[i * d_out + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(m: &Model, prefix: &str, x: &Mat) -> Mat {
    let g = p(m, &format!("{prefix}.gain"));
    let b = p(m, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| g[i] * (v - mean) / sd + b[i]).collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn ffn(m: &Model, prefix: &str, x: &Mat) -> Mat {
    let h = linear(m, &format!("{prefix}.l1"), x);
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    linear(m, &format!("{prefix}.l2"), &h)
}

/// Multi-head attention; `causal` restricts query `i` to keys `0..=i`.
fn attention(m: &Model, prefix: &str, q_in: &Mat, kv: &Mat, causal: bool) -> Mat {
    let heads = m.config.n_heads;
    let d = m.config.d_model;
    let dh = d / heads;
    let q = linear(m, &format!("{prefix}.q"), q_in);
    let k = linear(m, &format!("{prefix}.k"), kv);
    let v = linear(m, &format!("{prefix}.v"), kv);
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let keys = if causal { i + 1 } else { k.len() };
            let scores: Vec<f64> = (0..keys)
                .map(|j| cols.clone().map(|c| qi[c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let a = (s - mx).exp() / z;
                for c in cols.clone() {
                    ctx[i][c] += a * v[j][c];
                }
            }
        }
    }
    linear(m, &format!("{prefix}.o"), &ctx)
}

fn embed(m: &Model, table: &str, ids: &[usize]) -> Mat {
    let d = m.config.d_model;
    let e = p(m, table);
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|c| {
                    let i = c / 2;
                    let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
                    let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                    e[id * d + c] * (d as f64).sqrt() + pe
                })
                .collect()
        })
        .collect()
}

pub fn reference_encode(m: &Model, src: &[usize]) -> Mat {
    let mut x = embed(m, "src_embed", src);
    for l in 1..=m.config.n_enc_layers {
        let pre = format!("encoder.layer{l}");
        let a = attention(m, &format!("{pre}.self_attn"), &x, &x, false);
        let x1 = norm(m, &format!("{pre}.ln1"), &add(&a, &x));
        let f = ffn(m, &format!("{pre}.ffn"), &x1);
        x = norm(m, &format!("{pre}.ln2"), &add(&f, &x1));
    }
    x
}

/// Straight-line decoder for one sentence; returns `[T, V]` logits.
pub fn reference_decode(m: &Model, memory: &Mat, tgt_in: &[usize]) -> Mat {
    let mut l_prev = embed(m, "tgt_embed", tgt_in);
    for l in 1..=m.config.n_dec_layers {
        let pre = format!("decoder.layer{l}");
        let (s, c) = match m.config.variant {
            DecoderVariant::Standard | DecoderVariant::Simplified => {
                let a = attention(m, &format!("{pre}.tem"), &l_prev, &l_prev, true);
                let c = norm(m, &format!("{pre}.tem.ln"), &add(&a, &l_prev));
                (attention(m, &format!("{pre}.sem"), &c, memory, false), c)
            }
            DecoderVariant::SemIfm => (attention(m, &format!("{pre}.sem"), &l_prev, memory, false), l_prev.clone()),
            DecoderVariant::SemTemIfm => {
                let s = attention(m, &format!("{pre}.sem"), &l_prev, memory, false);
                let u = norm(m, &format!("{pre}.sem.ln"), &add(&s, &l_prev));
                (attention(m, &format!("{pre}.tem"), &u, &u, true), u)
            }
        };
        let d1 = norm(m, &format!("{pre}.ifm.ln1"), &add(&s, &c));
        l_prev = if m.config.variant == DecoderVariant::Simplified {
            d1
        } else {
            let f = ffn(m, &format!("{pre}.ifm.ffn"), &d1);
            norm(m, &format!("{pre}.ifm.ln2"), &add(&f, &d1))
        };
    }
    linear(m, "out_proj", &l_prev)
}

/// Largest relative deviation between analytic and central-difference
/// gradients over the sampled `(param, index)` entries of the store inside
/// `state`. The loss closure must be deterministic.
pub fn grad_check<S>(
    state: &mut S,
    store: fn(&mut S) -> &mut ParamStore,
    entries: &[(usize, usize)],
    loss: &dyn Fn(&mut Tape, &S) -> Var,
) -> f64 {
    store(state).zero_grads();
    let mut tape = Tape::new();
    let l = loss(&mut tape, state);
    tape.backward(l, store(state)).unwrap();
    let analytic: Vec<f64> = entries
        .iter()
        .map(|&(pi, ei)| {
            let (_, prm) = store(state).iter().nth(pi).unwrap();
            prm.tensor.grad().map_or(0.0, |g| g[ei])
        })
        .collect();
    store(state).zero_grads();
    let h = 1e-5;
    let eval = |state: &S| {
        let mut t = Tape::no_grad();
        let l = loss(&mut t, state);
        t.value(l)[0]
    };
    let set = |state: &mut S, pi: usize, ei: usize, v: f64| {
        store(state).iter_mut().nth(pi).unwrap().tensor.values_mut()[ei] = v;
    };
    let mut worst: f64 = 0.0;
    for (&(pi, ei), a) in entries.iter().zip(analytic) {
        let orig = store(state).iter_mut().nth(pi).unwrap().tensor.values()[ei];
        set(state, pi, ei, orig + h);
        let up = eval(state);
        set(state, pi, ei, orig - h);
        let down = eval(state);
        set(state, pi, ei, orig);
        let n = (up - down) / (2.0 * h);
        // Central differences at h = 1e-5 carry ~1e-10 rounding noise on
        // losses of order 10, so tiny gradients are compared against 1e-5.
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    worst
}

/// AER straight from set cardinalities.
pub fn set_aer(a: &BTreeSet<(usize, usize)>, sure: &BTreeSet<(usize, usize)>, possible: &BTreeSet<(usize, usize)>) -> f64 {
    let denom = a.len() + sure.len();
    if denom == 0 {
        return 0.0;
    }
    let as_ = a.intersection(sure).count();
    let ap = a.intersection(possible).count();
    1.0 - (as_ + ap) as f64 / denom as f64
}

/// Fraction of `0..n` present in the union of the given position sets.
pub fn set_coverage(sets: &[BTreeSet<usize>], n: usize) -> f64 {
    let union: BTreeSet<usize> = sets.iter().flatten().copied().filter(|&j| j < n).collect();
    union.len() as f64 / n as f64
}

use declab::alignment::{compute_aer, cumulative_coverage, extract_alignment, AlignmentLink, GoldAlignment, LinkSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Each cell of an `s × t` grid is linked with a random rate below `p_max`.
fn random_links(rng: &mut ChaCha8Rng, s: usize, t: usize, p_max: f64) -> BTreeSet<(usize, usize)> {
    let p = rng.gen_range(0.0..p_max);
    let mut out = BTreeSet::new();
    for i in 0..s {
        for j in 0..t {
            if rng.gen_bool(p) {
                out.insert((i, j));
            }
        }
    }
    out
}

fn to_links(set: &BTreeSet<(usize, usize)>) -> LinkSet {
    set.iter().map(|&(s, t)| AlignmentLink::new(s, t)).collect()
}

/// Number of random micro-instances on which `compute_aer` and
/// `extract_alignment` disagree with brute-force set arithmetic.
pub fn aer_mismatches(seed: u64, instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let (s, t) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let a = random_links(&mut rng, s, t, 0.6);
        let sure = random_links(&mut rng, s, t, 0.5);
        let extra = random_links(&mut rng, s, t, 0.4);
        let possible: BTreeSet<_> = sure.union(&extra).copied().collect();
        let gold = GoldAlignment::new(to_links(&sure), to_links(&extra));
        if compute_aer(&to_links(&a), &gold) != set_aer(&a, &sure, &possible) {
            bad += 1;
        }

        let merged: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..s).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect())
            .collect();
        let src_sp: BTreeSet<usize> = (0..s).filter(|_| rng.gen_bool(0.2)).collect();
        let tgt_sp: BTreeSet<usize> = (0..t).filter(|_| rng.gen_bool(0.2)).collect();
        let mut expect = BTreeSet::new();
        for (j, row) in merged.iter().enumerate() {
            if tgt_sp.contains(&j) {
                continue;
            }
            let mut best: Option<usize> = None;
            for i in 0..s {
                if !src_sp.contains(&i) && best.is_none_or(|b| row[i] > row[b]) {
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                expect.insert((i, j));
            }
        }
        match extract_alignment(&merged, &src_sp, &tgt_sp) {
            Ok(links) if src_sp.len() < s || tgt_sp.len() == t => {
                if links != to_links(&expect) {
                    bad += 1;
                }
            }
            Err(_) if src_sp.len() == s && tgt_sp.len() < t => {}
            _ => bad += 1,
        }
    }
    bad
}

/// Same for `cumulative_coverage`; also counts non-monotone curves.
pub fn coverage_mismatches(seed: u64, instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.gen_range(1..8);
        let layers = rng.gen_range(1..5);
        let per_layer: Vec<BTreeSet<(usize, usize)>> = (0..layers)
            .map(|_| {
                let t = rng.gen_range(1..6);
                random_links(&mut rng, n, t, 0.3)
            })
            .collect();
        let curve = cumulative_coverage(&per_layer.iter().map(to_links).collect::<Vec<_>>(), n).unwrap();
        for i in 0..layers {
            let sets: Vec<BTreeSet<usize>> = per_layer[..=i].iter().map(|l| l.iter().map(|&(s, _)| s).collect()).collect();
            if curve.cumulative[i] != set_coverage(&sets, n) {
                bad += 1;
            }
            if i > 0 && curve.cumulative[i] < curve.cumulative[i - 1] {
                bad += 1;
            }
        }
    }
    bad
}

use declab::blocks::ModuleTag;
use declab::data::{Split, RESERVED};
use declab::probing::{DumpSentence, ProbeModel, ProbeSide, RepresentationDump};
use declab::tensor::Tensor;

/// Random representations for a handful of random sentence pairs.
pub fn micro_dump(seed: u64, d: usize, vocab: usize, sentences: usize) -> RepresentationDump {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = (0..sentences)
        .map(|id| {
            let src: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(RESERVED..vocab)).collect();
            let tgt: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(RESERVED..vocab)).collect();
            let t = tgt.len() + 1;
            let h = Tensor::new(vec![t, d], (0..t * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            DumpSentence {
                id,
                src,
                tgt,
                reps: [((1, ModuleTag::SemOut), h)].into_iter().collect(),
            }
        })
        .collect();
    RepresentationDump {
        d_model: d,
        n_layers: 1,
        tags: vec![ModuleTag::SemOut],
        src_vocab: vocab,
        tgt_vocab: vocab,
        split: Split::Heldout,
        sentences,
    }
}

/// Forced-decoding NLL summed by hand from per-sentence logits.
pub fn hand_nll(probe: &ProbeModel, dump: &RepresentationDump) -> (f64, usize) {
    let mut total = 0.0;
    let mut tokens = 0;
    for s in &dump.sentences {
        let x = match probe.config.side {
            ProbeSide::Source => &s.src,
            ProbeSide::Target => &s.tgt,
        };
        let logits = probe.logits(&s.reps[&(probe.config.layer, probe.config.tag)], x).unwrap();
        for (i, &w) in x.iter().enumerate() {
            let row = logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[w];
            tokens += 1;
        }
    }
    (total, tokens)
}

// Random tiny configurations for the decoder oracle.

use declab::data::{BOS, EOS};
use declab::model::{build_model, ModelConfig};

pub fn random_config(rng: &mut ChaCha8Rng, variant: DecoderVariant) -> ModelConfig {
    let (d, heads) = [(4, 1), (4, 2), (6, 3), (8, 2), (8, 4), (12, 3)][rng.gen_range(0..6)];
    let mut c = ModelConfig::toy(rng.gen_range(RESERVED + 1..14), rng.gen_range(RESERVED + 1..14))
        .with_variant(variant)
        .with_dropout(0.0);
    c.d_model = d;
    c.n_heads = heads;
    c.d_ff = rng.gen_range(2..17);
    c.n_enc_layers = rng.gen_range(1..3);
    c.n_dec_layers = rng.gen_range(1..4);
    c.max_len = 16;
    c.preset = None;
    c
}

pub fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(RESERVED..vocab)).collect()
}

pub fn max_diff(a: &[f64], b: &Mat) -> f64 {
    let flat: Vec<f64> = b.iter().flatten().copied().collect();
    assert_eq!(a.len(), flat.len());
    a.iter().zip(&flat).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn oracle_diff(model: &Model, rng: &mut ChaCha8Rng) -> f64 {
    let (s_len, t_len) = (rng.gen_range(1..7), rng.gen_range(0..7));
    let mut src = random_sentence(rng, model.config.src_vocab, s_len);
    src.push(EOS);
    let mut tgt = vec![BOS];
    tgt.extend(random_sentence(rng, model.config.tgt_vocab, t_len));
    let enc = model.encode(&src).unwrap();
    let memory = reference_encode(model, &src);
    let enc_diff = max_diff(enc.representation.values(), &memory);
    let (logits, _) = model.decode_forward(&enc, &tgt).unwrap();
    let reference = reference_decode(model, &memory, &tgt);
    enc_diff.max(max_diff(logits.values(), &reference))
}

/// Largest logit deviation from the reference over `configs` random models.
pub fn decoder_oracle_worst(seed: u64, variant: DecoderVariant, configs: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..configs {
        let config = random_config(&mut rng, variant);
        let model = build_model(&config, seed.wrapping_add(i)).unwrap();
        worst = worst.max(oracle_diff(&model, &mut rng));
    }
    worst
}
