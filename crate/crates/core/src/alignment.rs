//! Word alignments read off encoder attention, AER and cumulative coverage.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionWeights, AttnKind};
use crate::error::{Error, Result};
use crate::model::{DecoderTrace, Model};

/// A link between source position `src` and target position `tgt` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AlignmentLink {
    pub src: usize,
    pub tgt: usize,
}

impl AlignmentLink {
    pub fn new(src: usize, tgt: usize) -> Self {
        Self { src, tgt }
    }
}

pub type LinkSet = BTreeSet<AlignmentLink>;

/// Sure and possible gold links; `sure ⊆ possible`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAlignment {
    pub sure: LinkSet,
    pub possible: LinkSet,
}

impl GoldAlignment {
    /// Builds a gold set; sure links are added to `possible`.
    pub fn new(sure: LinkSet, possible: LinkSet) -> Self {
        let possible = possible.union(&sure).copied().collect();
        Self { sure, possible }
    }

    pub fn sure_only(sure: LinkSet) -> Self {
        Self::new(sure.clone(), sure)
    }

    /// Pharaoh line, `i-j` for sure and `i?j` for possible-only links.
    pub fn to_pharaoh(&self, indexing: Indexing) -> String {
        let off = indexing.offset();
        let mut toks: Vec<(AlignmentLink, char)> = self.sure.iter().map(|l| (*l, '-')).collect();
        toks.extend(self.possible.difference(&self.sure).map(|l| (*l, '?')));
        toks.sort();
        toks.iter()
            .map(|(l, c)| format!("{}{c}{}", l.src + off, l.tgt + off))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Indexing {
    #[default]
    ZeroBased,
    OneBased,
}

impl Indexing {
    fn offset(self) -> usize {
        match self {
            Indexing::ZeroBased => 0,
            Indexing::OneBased => 1,
        }
    }
}

impl FromStr for Indexing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "zero-based" | "zero" | "0" => Ok(Indexing::ZeroBased),
            "one-based" | "one" | "1" => Ok(Indexing::OneBased),
            _ => Err(Error::Invalid(format!("unknown indexing `{s}`"))),
        }
    }
}

impl fmt::Display for Indexing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Indexing::ZeroBased => "zero-based",
            Indexing::OneBased => "one-based",
        })
    }
}

/// Averages SEM heads into one `[tgt_len, src_len]` matrix.
pub fn merge_heads(w: &AttentionWeights) -> Result<Vec<Vec<f64>>> {
    if w.module_tag != AttnKind::Sem {
        return Err(Error::Invalid("alignments are only defined on encoder attention".into()));
    }
    let h = w.per_head.len();
    if h == 0 {
        return Err(Error::Invalid("attention weights without heads".into()));
    }
    let mut out = w.per_head[0].clone();
    for head in &w.per_head[1..] {
        for (row, hr) in out.iter_mut().zip(head) {
            row.iter_mut().zip(hr).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / h as f64;
    out.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok(out)
}

/// One link per non-special target row, to its highest-weighted non-special
/// source column. Ties go to the smaller source index.
pub fn extract_alignment(merged: &[Vec<f64>], src_specials: &BTreeSet<usize>, tgt_specials: &BTreeSet<usize>) -> Result<LinkSet> {
    let mut links = LinkSet::new();
    for (t, row) in merged.iter().enumerate() {
        if tgt_specials.contains(&t) {
            continue;
        }
        let best = row
            .iter()
            .enumerate()
            .filter(|(s, _)| !src_specials.contains(s))
            .fold(None, |best: Option<(usize, f64)>, (s, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((s, v)),
            });
        match best {
            Some((s, _)) => {
                links.insert(AlignmentLink::new(s, t));
            }
            None => return Err(Error::Invalid("every source position is special".into())),
        }
    }
    Ok(links)
}

/// Counts behind an AER value; summing counts gives corpus-level AER.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AerCounts {
    pub hyp: usize,
    pub sure: usize,
    pub hyp_and_sure: usize,
    pub hyp_and_possible: usize,
}

impl AerCounts {
    pub fn of(hyp: &LinkSet, gold: &GoldAlignment) -> Self {
        Self {
            hyp: hyp.len(),
            sure: gold.sure.len(),
            hyp_and_sure: hyp.intersection(&gold.sure).count(),
            hyp_and_possible: hyp.intersection(&gold.possible).count(),
        }
    }

    pub fn add(&mut self, o: &AerCounts) {
        self.hyp += o.hyp;
        self.sure += o.sure;
        self.hyp_and_sure += o.hyp_and_sure;
        self.hyp_and_possible += o.hyp_and_possible;
    }

    pub fn aer(&self) -> f64 {
        let denom = self.hyp + self.sure;
        if denom == 0 {
            return 0.0;
        }
        1.0 - (self.hyp_and_sure + self.hyp_and_possible) as f64 / denom as f64
    }
}

/// `1 - (|A∩S| + |A∩P|) / (|A| + |S|)`; defined as 0 when both sets are empty.
pub fn compute_aer(hyp: &LinkSet, gold: &GoldAlignment) -> f64 {
    AerCounts::of(hyp, gold).aer()
}

/// Covered source positions per layer and the running union ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub n: usize,
    pub covered: Vec<BTreeSet<usize>>,
    pub cumulative: Vec<f64>,
}

pub fn cumulative_coverage(per_layer: &[LinkSet], n: usize) -> Result<CoverageCurve> {
    if n == 0 {
        return Err(Error::Invalid("coverage needs at least one source word".into()));
    }
    let mut union = BTreeSet::new();
    let mut covered = Vec::with_capacity(per_layer.len());
    let mut cumulative = Vec::with_capacity(per_layer.len());
    for links in per_layer {
        let a: BTreeSet<usize> = links.iter().map(|l| l.src).collect();
        if let Some(&bad) = a.iter().find(|&&s| s >= n) {
            return Err(Error::Index {
                what: "coverage source position",
                index: bad,
                bound: n,
            });
        }
        union.extend(a.iter().copied());
        cumulative.push(union.len() as f64 / n as f64);
        covered.push(a);
    }
    Ok(CoverageCurve { n, covered, cumulative })
}

/// Pools sentence curves: covered words over all source words, per layer.
pub fn pooled_coverage(curves: &[CoverageCurve]) -> Result<Vec<f64>> {
    let layers = curves.first().map(|c| c.cumulative.len()).unwrap_or(0);
    if curves.is_empty() || curves.iter().any(|c| c.cumulative.len() != layers) {
        return Err(Error::Invalid("coverage curves are empty or have differing depths".into()));
    }
    let total: usize = curves.iter().map(|c| c.n).sum();
    let mut unions: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); curves.len()];
    Ok((0..layers)
        .map(|i| {
            let mut covered = 0;
            for (u, c) in unions.iter_mut().zip(curves) {
                u.extend(c.covered[i].iter().copied());
                covered += u.len();
            }
            covered as f64 / total as f64
        })
        .collect())
}

fn parse_link(tok: &str, indexing: Indexing) -> std::result::Result<(AlignmentLink, bool), String> {
    let (sep, sure) = if tok.contains('-') {
        ('-', true)
    } else if tok.contains('?') {
        ('?', false)
    } else {
        return Err(format!("malformed link `{tok}`"));
    };
    let (a, b) = tok.split_once(sep).ok_or_else(|| format!("malformed link `{tok}`"))?;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("malformed link `{tok}`"))
            .and_then(|v| {
                v.checked_sub(indexing.offset())
                    .ok_or_else(|| format!("index 0 in one-based link `{tok}`"))
            })
    };
    Ok((AlignmentLink::new(num(a)?, num(b)?), sure))
}

/// Parses Pharaoh-format gold alignments, one sentence per line.
pub fn parse_gold_str(text: &str, indexing: Indexing, origin: &Path) -> Result<Vec<GoldAlignment>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut sure = LinkSet::new();
        let mut possible = LinkSet::new();
        for tok in line.split_whitespace() {
            let (link, is_sure) = parse_link(tok, indexing).map_err(|msg| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            })?;
            if is_sure {
                sure.insert(link);
            } else {
                possible.insert(link);
            }
        }
        out.push(GoldAlignment::new(sure, possible));
    }
    Ok(out)
}

/// Reads a gold file; `expected` checks the sentence count against a corpus.
pub fn parse_gold(path: &Path, indexing: Indexing, expected: Option<usize>) -> Result<Vec<GoldAlignment>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let gold = parse_gold_str(&text, indexing, path)?;
    if let Some(n) = expected {
        if gold.len() != n {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: gold.len().min(n) + 1,
                msg: format!("{} alignment lines for {n} sentence pairs", gold.len()),
            });
        }
    }
    Ok(gold)
}

pub fn write_gold(path: &Path, gold: &[GoldAlignment], indexing: Indexing) -> Result<()> {
    let mut text = String::new();
    for g in gold {
        text.push_str(&g.to_pharaoh(indexing));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-layer links of one teacher-forced trace. The trailing source EOS and
/// the final target row (which predicts EOS) are excluded.
pub fn trace_alignments(trace: &DecoderTrace) -> Result<Vec<LinkSet>> {
    trace
        .layers
        .iter()
        .map(|lt| {
            let merged = merge_heads(&lt.sem_weights)?;
            let t = merged.len();
            let s = merged.first().map(Vec::len).unwrap_or(0);
            let src_sp = BTreeSet::from([s.saturating_sub(1)]);
            let tgt_sp = BTreeSet::from([t.saturating_sub(1)]);
            extract_alignment(&merged, &src_sp, &tgt_sp)
        })
        .collect()
}

/// Layer-wise alignments for word-id pairs; `[layer][sentence]`.
pub fn align_pairs(model: &Model, pairs: &[(Vec<usize>, Vec<usize>)], batch: usize) -> Result<Vec<Vec<LinkSet>>> {
    let layers = model.config.n_dec_layers;
    let mut out = vec![Vec::with_capacity(pairs.len()); layers];
    for chunk in pairs.chunks(batch.max(1)) {
        let (srcs, tgts): (Vec<_>, Vec<_>) = chunk
            .iter()
            .map(|(s, t)| (crate::data::frame_source(s), crate::data::frame_target(t).0))
            .unzip();
        for (_, trace) in model.trace_batch(&srcs, &tgts)? {
            for (l, links) in trace_alignments(&trace)?.into_iter().enumerate() {
                out[l].push(links);
            }
        }
    }
    Ok(out)
}

/// Corpus AER of every layer.
pub fn aer_by_layer(per_layer: &[Vec<LinkSet>], gold: &[GoldAlignment]) -> Result<Vec<f64>> {
    per_layer
        .iter()
        .map(|sents| {
            if sents.len() != gold.len() {
                return Err(Error::Invalid(format!(
                    "{} hypothesis alignments for {} gold lines",
                    sents.len(),
                    gold.len()
                )));
            }
            let mut c = AerCounts::default();
            for (h, g) in sents.iter().zip(gold) {
                c.add(&AerCounts::of(h, g));
            }
            Ok(c.aer())
        })
        .collect()
}

/// Pooled cumulative coverage of every layer; `src_lens` count words only.
pub fn coverage_by_layer(per_layer: &[Vec<LinkSet>], src_lens: &[usize]) -> Result<Vec<f64>> {
    let curves = src_lens
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let layers: Vec<LinkSet> = per_layer.iter().map(|l| l[i].clone()).collect();
            cumulative_coverage(&layers, n)
        })
        .collect::<Result<Vec<_>>>()?;
    pooled_coverage(&curves)
}
