//! Vocabularies, parallel corpora, synthetic reordering tasks, batching and
//! translation metrics.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentLink, GoldAlignment};
use crate::error::{Error, Result};
use crate::model::Padded;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids; word ids start here.
pub const RESERVED: usize = 4;
pub const SPECIAL_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Source ids as fed to the encoder.
pub fn frame_source(words: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(words.len() + 1);
    v.extend_from_slice(words);
    v.push(EOS);
    v
}

/// `(BOS + words, words + EOS)`
pub fn frame_target(words: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut tin = Vec::with_capacity(words.len() + 1);
    tin.push(BOS);
    tin.extend_from_slice(words);
    (tin, frame_source(words))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIAL_TOKENS {
            v.add(t);
        }
        v
    }

    pub fn from_tokens<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self::new();
        for w in words {
            v.add(w.as_ref());
        }
        v
    }

    /// Adds `token` if absent and returns its id.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps words to ids, using UNK for unknown words.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    /// Word tokens, one per line, without the reserved prefix.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens[RESERVED..].join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() || tok.contains(char::is_whitespace) || v.id(tok).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("bad or duplicate vocabulary entry `{line}`"),
                });
            }
            v.add(tok);
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReorderRule {
    #[default]
    None,
    /// Swaps positions (0,1), (2,3), ...; an odd tail stays in place.
    AdjacentSwap,
    /// Reverses consecutive blocks of `block_size` words.
    BlockReverse,
}

impl FromStr for ReorderRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" | "identity" => Ok(ReorderRule::None),
            "adjacent_swap" | "swap" => Ok(ReorderRule::AdjacentSwap),
            "block_reverse" => Ok(ReorderRule::BlockReverse),
            _ => Err(Error::Invalid(format!("unknown reorder rule `{s}`"))),
        }
    }
}

impl fmt::Display for ReorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReorderRule::None => "none",
            ReorderRule::AdjacentSwap => "adjacent_swap",
            ReorderRule::BlockReverse => "block_reverse",
        })
    }
}

/// Target position `j` takes the source word at `perm[j]`.
pub fn reorder_permutation(rule: ReorderRule, len: usize, block_size: usize) -> Vec<usize> {
    match rule {
        ReorderRule::None => (0..len).collect(),
        ReorderRule::AdjacentSwap => (0..len)
            .map(|j| if j % 2 == 0 { if j + 1 < len { j + 1 } else { j } } else { j - 1 })
            .collect(),
        ReorderRule::BlockReverse => {
            let k = block_size.max(1);
            (0..len)
                .map(|j| {
                    let start = j / k * k;
                    let end = (start + k).min(len);
                    start + end - 1 - j
                })
                .collect()
        }
    }
}

/// Random word sequences translated through a lexicon bijection and a
/// position reordering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// Vocabulary size per side, reserved ids included.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// `lexicon[k]` is the target word index of source word index `k`.
    pub lexicon: Vec<usize>,
    pub reorder: ReorderRule,
    pub block_size: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Draws the lexicon permutation from `seed`.
    pub fn new(vocab_size: usize, min_len: usize, max_len: usize, reorder: ReorderRule, seed: u64) -> Result<Self> {
        if vocab_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} must exceed the {RESERVED} reserved ids"
            )));
        }
        let mut lexicon: Vec<usize> = (0..vocab_size - RESERVED).collect();
        lexicon.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1E71_C0DE));
        let spec = Self {
            vocab_size,
            min_len,
            max_len,
            lexicon,
            reorder,
            block_size: 3,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {} must exceed the {RESERVED} reserved ids",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range [{}, {}] is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        let n = self.vocab_size - RESERVED;
        let mut seen = vec![false; n];
        if self.lexicon.len() != n || !self.lexicon.iter().all(|&k| k < n && !std::mem::replace(&mut seen[k], true)) {
            return Err(Error::Config("lexicon is not a bijection over the word ids".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be positive".into()));
        }
        Ok(())
    }

    pub fn src_vocab(&self) -> Vocab {
        Vocab::from_tokens((0..self.vocab_size - RESERVED).map(|k| format!("s{k}")))
    }

    pub fn tgt_vocab(&self) -> Vocab {
        Vocab::from_tokens((0..self.vocab_size - RESERVED).map(|k| format!("t{k}")))
    }

    /// Translates a source word-id sequence and returns its gold alignment.
    pub fn translate(&self, src: &[usize]) -> (Vec<usize>, GoldAlignment) {
        let perm = reorder_permutation(self.reorder, src.len(), self.block_size);
        let tgt = perm
            .iter()
            .map(|&i| RESERVED + self.lexicon[src[i] - RESERVED])
            .collect();
        let links = perm.iter().enumerate().map(|(j, &i)| AlignmentLink::new(i, j)).collect();
        (tgt, GoldAlignment::sure_only(links))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Heldout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "heldout" | "held-out" | "test" | "dev" => Ok(Split::Heldout),
            _ => Err(Error::Invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Word ids only; framing tokens are added when batching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub gold: Option<GoldAlignment>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub split: Split,
}

/// Draws `n_pairs` sentence pairs; deterministic in `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticTaskSpec, n_pairs: usize) -> Result<ParallelCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(RESERVED..spec.vocab_size)).collect();
            let (tgt, gold) = spec.translate(&src);
            SentencePair {
                src,
                tgt,
                gold: Some(gold),
            }
        })
        .collect();
    Ok(ParallelCorpus {
        pairs,
        src_vocab: spec.src_vocab(),
        tgt_vocab: spec.tgt_vocab(),
        split: Split::Train,
    })
}

#[derive(Clone, Debug)]
pub enum VocabPolicy {
    /// Grow vocabularies from the data in first-seen order.
    Build,
    Frozen { src: Vocab, tgt: Vocab },
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn load_parallel(src_path: &Path, tgt_path: &Path, policy: VocabPolicy) -> Result<ParallelCorpus> {
    let src_lines = read_lines(src_path)?;
    let tgt_lines = read_lines(tgt_path)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Parse {
            path: tgt_path.to_path_buf(),
            line: src_lines.len().min(tgt_lines.len()) + 1,
            msg: format!("{} source lines but {} target lines", src_lines.len(), tgt_lines.len()),
        });
    }
    let (mut sv, mut tv, build) = match policy {
        VocabPolicy::Build => (Vocab::new(), Vocab::new(), true),
        VocabPolicy::Frozen { src, tgt } => (src, tgt, false),
    };
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let mut ids = [Vec::new(), Vec::new()];
        for (k, (line, path, vocab)) in [(s, src_path, &mut sv), (t, tgt_path, &mut tv)].into_iter().enumerate() {
            let words: Vec<&str> = line.split_whitespace().collect();
            if words.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "empty sentence".into(),
                });
            }
            ids[k] = if build {
                words.iter().map(|w| vocab.add(w)).collect()
            } else {
                vocab.encode(&words)
            };
        }
        let [src, tgt] = ids;
        pairs.push(SentencePair { src, tgt, gold: None });
    }
    Ok(ParallelCorpus {
        pairs,
        src_vocab: sv,
        tgt_vocab: tv,
        split: Split::Train,
    })
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Moves the last `n` pairs into a held-out corpus.
    pub fn split_heldout(mut self, n: usize) -> Result<(ParallelCorpus, ParallelCorpus)> {
        if n == 0 || n >= self.pairs.len() {
            return Err(Error::Invalid(format!(
                "cannot hold out {n} of {} pairs",
                self.pairs.len()
            )));
        }
        let held = self.pairs.split_off(self.pairs.len() - n);
        let heldout = ParallelCorpus {
            pairs: held,
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            split: Split::Heldout,
        };
        self.split = Split::Train;
        Ok((self, heldout))
    }

    /// Attaches gold alignments, checking count and bounds.
    pub fn attach_gold(&mut self, gold: Vec<GoldAlignment>) -> Result<()> {
        if gold.len() != self.pairs.len() {
            return Err(Error::Invalid(format!(
                "{} gold alignments for {} pairs",
                gold.len(),
                self.pairs.len()
            )));
        }
        for (i, (p, g)) in self.pairs.iter_mut().zip(gold).enumerate() {
            if let Some(l) = g.possible.iter().find(|l| l.src >= p.src.len() || l.tgt >= p.tgt.len()) {
                return Err(Error::Invalid(format!(
                    "gold link {}-{} out of bounds in sentence {}",
                    l.src,
                    l.tgt,
                    i + 1
                )));
            }
            p.gold = Some(g);
        }
        Ok(())
    }

    pub fn gold(&self) -> Option<Vec<GoldAlignment>> {
        self.pairs.iter().map(|p| p.gold.clone()).collect()
    }

    /// Checks that every id fits the given vocabulary sizes.
    pub fn check_vocab(&self, src_vocab: usize, tgt_vocab: usize) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            for (side, ids, v) in [("source", &p.src, src_vocab), ("target", &p.tgt, tgt_vocab)] {
                if let Some(&bad) = ids.iter().find(|&&x| x >= v || x < RESERVED && x != UNK) {
                    return Err(Error::Config(format!(
                        "{side} id {bad} in sentence {} does not fit a vocabulary of {v}",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes `<stem>.src`, `<stem>.tgt`, vocabularies and, if present,
    /// `<stem>.aln` (zero-based) into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let join = |v: &Vocab, ids: &[usize]| v.decode(ids).join(" ");
        let mut src = String::new();
        let mut tgt = String::new();
        for p in &self.pairs {
            src.push_str(&join(&self.src_vocab, &p.src));
            src.push('\n');
            tgt.push_str(&join(&self.tgt_vocab, &p.tgt));
            tgt.push('\n');
        }
        let write = |name: String, text: &str| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(format!("{stem}.src"), &src)?;
        write(format!("{stem}.tgt"), &tgt)?;
        self.src_vocab.save(&dir.join("vocab.src"))?;
        self.tgt_vocab.save(&dir.join("vocab.tgt"))?;
        if let Some(gold) = self.gold() {
            crate::alignment::write_gold(&dir.join(format!("{stem}.aln")), &gold, crate::alignment::Indexing::ZeroBased)?;
        }
        Ok(())
    }
}

/// A padded training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Corpus indices of the sentences in this batch.
    pub indices: Vec<usize>,
    pub src: Padded,
    pub tgt_in: Padded,
    pub tgt_out: Padded,
    /// Non-pad target tokens, EOS included.
    pub tgt_tokens: usize,
    pub src_tokens: usize,
}

impl Batch {
    pub fn from_indices(corpus: &ParallelCorpus, indices: Vec<usize>) -> Result<Self> {
        let mut srcs = Vec::with_capacity(indices.len());
        let mut tins = Vec::with_capacity(indices.len());
        let mut touts = Vec::with_capacity(indices.len());
        for &i in &indices {
            let p = &corpus.pairs[i];
            srcs.push(frame_source(&p.src));
            let (a, b) = frame_target(&p.tgt);
            tins.push(a);
            touts.push(b);
        }
        Ok(Self {
            src_tokens: srcs.iter().map(Vec::len).sum(),
            tgt_tokens: touts.iter().map(Vec::len).sum(),
            src: Padded::new(&srcs)?,
            tgt_in: Padded::new(&tins)?,
            tgt_out: Padded::new(&touts)?,
            indices,
        })
    }
}

/// Length-bucketed batches for one epoch. Each side of a batch holds at most
/// `batch_tokens` non-pad tokens (EOS counted). Order depends only on
/// `(seed, epoch)`.
pub fn batchify(corpus: &ParallelCorpus, batch_tokens: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot batch an empty corpus".into()));
    }
    let cost = |i: usize| {
        let p = &corpus.pairs[i];
        (p.src.len() + 1).max(p.tgt.len() + 1)
    };
    if let Some(i) = (0..corpus.len()).find(|&i| cost(i) > batch_tokens) {
        return Err(Error::Config(format!(
            "sentence {} needs {} tokens, above the batch budget of {batch_tokens}",
            i + 1,
            cost(i)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (corpus.pairs[i].tgt.len(), corpus.pairs[i].src.len()));

    let mut groups = Vec::new();
    let mut cur = Vec::new();
    let (mut s_tok, mut t_tok) = (0, 0);
    for i in order {
        let p = &corpus.pairs[i];
        let (s, t) = (p.src.len() + 1, p.tgt.len() + 1);
        if !cur.is_empty() && (s_tok + s > batch_tokens || t_tok + t > batch_tokens) {
            groups.push(std::mem::take(&mut cur));
            s_tok = 0;
            t_tok = 0;
        }
        cur.push(i);
        s_tok += s;
        t_tok += t;
    }
    groups.push(cur);
    groups.shuffle(&mut rng);
    groups.into_iter().map(|g| Batch::from_indices(corpus, g)).collect()
}

/// Position-wise matches over the shorter sequence, divided by the longer
/// length, pooled over the corpus.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Invalid(format!(
            "accuracy needs equally many hypotheses and references, got {} and {}",
            hyps.len(),
            refs.len()
        )));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

fn ngram_counts(s: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate counts per order `1..=max_n`.
pub fn ngram_stats(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> Vec<(usize, usize)> {
    (1..=max_n)
        .map(|n| {
            let mut matched = 0;
            let mut total = 0;
            for (h, r) in hyps.iter().zip(refs) {
                let hc = ngram_counts(h, n);
                let rc = ngram_counts(r, n);
                total += h.len().saturating_sub(n - 1);
                matched += hc.iter().map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
            }
            (matched, total)
        })
        .collect()
}

/// Corpus BLEU in `[0, 100]` with uniform weights and brevity penalty.
/// Orders above one use add-one smoothing.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() || max_n == 0 {
        return Err(Error::Invalid("BLEU needs a nonempty corpus with matching references".into()));
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for (k, (m, t)) in ngram_stats(hyps, refs, max_n).into_iter().enumerate() {
        let p = if k == 0 {
            if m == 0 {
                return Ok(0.0);
            }
            m as f64 / t as f64
        } else {
            (m + 1) as f64 / (t + 1) as f64
        };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if c >= r { 0.0 } else { 1.0 - r as f64 / c as f64 };
    Ok(100.0 * (log_p + bp).exp())
}
