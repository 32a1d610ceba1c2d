//! Python bindings: synthetic corpora, model building and training,
//! decoding, alignment metrics, probing and parameter accounting.

use std::collections::BTreeMap;
use std::path::PathBuf;

use declab::alignment::{self, AlignmentLink, GoldAlignment, LinkSet};
use declab::blocks::ModuleTag;
use declab::data::{self, frame_source, ParallelCorpus, ReorderRule, SyntheticTaskSpec};
use declab::model::{self, DecoderVariant, Preset};
use declab::probing::{capture, ProbeBudget, ProbeConfig, ProbeReport, ProbeSide};
use declab::training::{self, TrainConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: declab::Error) -> PyErr {
    match e {
        declab::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        declab::Error::Config(_)
        | declab::Error::Invalid(_)
        | declab::Error::Parse { .. }
        | declab::Error::Format(_)
        | declab::Error::Index { .. }
        | declab::Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = declab::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Alignment links as `(src, tgt)` tuples.
type Links = Vec<(usize, usize)>;

fn links(pairs: Links) -> LinkSet {
    pairs.into_iter().map(|(s, t)| AlignmentLink::new(s, t)).collect()
}

fn unlink(set: &LinkSet) -> Vec<(usize, usize)> {
    set.iter().map(|l| (l.src, l.tgt)).collect()
}

/// Sentence pairs of word ids, with optional gold alignments.
#[pyclass(module = "declab_py", from_py_object)]
#[derive(Clone)]
pub struct Corpus {
    inner: ParallelCorpus,
}

#[pymethods]
impl Corpus {
    /// Loads `<stem>.src/.tgt` (and `<stem>.aln` if present) written by
    /// `export` or the `gen-data` command.
    #[staticmethod]
    #[pyo3(signature = (directory, stem = "train"))]
    fn load(directory: PathBuf, stem: &str) -> PyResult<Self> {
        let sv = data::Vocab::load(&directory.join("vocab.src")).map_err(err)?;
        let tv = data::Vocab::load(&directory.join("vocab.tgt")).map_err(err)?;
        let mut inner = data::load_parallel(
            &directory.join(format!("{stem}.src")),
            &directory.join(format!("{stem}.tgt")),
            data::VocabPolicy::Frozen { src: sv, tgt: tv },
        )
        .map_err(err)?;
        let aln = directory.join(format!("{stem}.aln"));
        if aln.exists() {
            let gold = alignment::parse_gold(&aln, alignment::Indexing::ZeroBased, Some(inner.len())).map_err(err)?;
            inner.attach_gold(gold).map_err(err)?;
        }
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Corpus({} pairs, split={})", self.inner.len(), self.inner.split)
    }

    #[getter]
    fn src_vocab_size(&self) -> usize {
        self.inner.src_vocab.len()
    }

    #[getter]
    fn tgt_vocab_size(&self) -> usize {
        self.inner.tgt_vocab.len()
    }

    /// `(src_ids, tgt_ids)` for every pair.
    fn pairs(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.inner.pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).collect()
    }

    /// Sure links per pair as `(src, tgt)` tuples, or None without gold.
    fn gold(&self) -> Option<Vec<Vec<(usize, usize)>>> {
        self.inner.gold().map(|g| g.iter().map(|a| unlink(&a.sure)).collect())
    }

    fn src_words(&self, ids: Vec<usize>) -> Vec<String> {
        self.inner.src_vocab.decode(&ids)
    }

    fn tgt_words(&self, ids: Vec<usize>) -> Vec<String> {
        self.inner.tgt_vocab.decode(&ids)
    }

    /// `(train, heldout)`, holding out the last `n` pairs.
    fn split_heldout(&self, n: usize) -> PyResult<(Corpus, Corpus)> {
        let (a, b) = self.inner.clone().split_heldout(n).map_err(err)?;
        Ok((Corpus { inner: a }, Corpus { inner: b }))
    }

    #[pyo3(signature = (directory, stem = "train"))]
    fn export(&self, directory: PathBuf, stem: &str) -> PyResult<()> {
        self.inner.export(&directory, stem).map_err(err)
    }
}

/// Generates a synthetic translation task: a random lexicon bijection plus
/// a reordering rule (`none`, `adjacent_swap` or `block_reverse`).
#[pyfunction]
#[pyo3(signature = (n_pairs, vocab = 24, min_len = 3, max_len = 8, rule = "adjacent_swap", seed = 7))]
fn synthetic_corpus(n_pairs: usize, vocab: usize, min_len: usize, max_len: usize, rule: &str, seed: u64) -> PyResult<Corpus> {
    let spec = SyntheticTaskSpec::new(vocab, min_len, max_len, parse::<ReorderRule>(rule)?, seed).map_err(err)?;
    Ok(Corpus {
        inner: data::gen_synthetic(&spec, n_pairs).map_err(err)?,
    })
}

#[pyclass(module = "declab_py", from_py_object)]
#[derive(Clone)]
pub struct ModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl ModelConfig {
    /// A preset (`toy`, `base` or `big`) with the given decoder variant.
    #[new]
    #[pyo3(signature = (src_vocab, tgt_vocab, preset = "toy", variant = "standard", dropout = None))]
    fn new(src_vocab: usize, tgt_vocab: usize, preset: &str, variant: &str, dropout: Option<f64>) -> PyResult<Self> {
        let mut inner = model::ModelConfig::preset(parse::<Preset>(preset)?, src_vocab, tgt_vocab)
            .with_variant(parse::<DecoderVariant>(variant)?);
        if let Some(p) = dropout {
            inner.dropout = p;
        }
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Free-form geometry without a preset.
    #[staticmethod]
    #[pyo3(signature = (src_vocab, tgt_vocab, d_model, n_heads, d_ff, n_enc_layers, n_dec_layers, variant = "standard", dropout = 0.1, max_len = 64))]
    #[allow(clippy::too_many_arguments)]
    fn custom(
        src_vocab: usize,
        tgt_vocab: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        n_enc_layers: usize,
        n_dec_layers: usize,
        variant: &str,
        dropout: f64,
        max_len: usize,
    ) -> PyResult<Self> {
        let inner = model::ModelConfig {
            d_model,
            n_heads,
            d_ff,
            n_enc_layers,
            n_dec_layers,
            src_vocab,
            tgt_vocab,
            dropout,
            max_len,
            variant: parse::<DecoderVariant>(variant)?,
            preset: None,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads
    }

    #[getter]
    fn n_dec_layers(&self) -> usize {
        self.inner.n_dec_layers
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({:?})", self.inner)
    }
}

fn breakdown_dict(b: &declab::bench::ParamBreakdown) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([
        ("self_attn", b.self_attn),
        ("enc_attn", b.enc_attn),
        ("ffn", b.ffn),
        ("layer_norms", b.layer_norms),
        ("decoder", b.decoder_total()),
        ("embeddings", b.embeddings),
        ("encoder", b.encoder),
        ("total", b.total),
    ])
}

/// Exact decoder parameter groups of a configuration, without building it.
#[pyfunction]
fn count_params(config: &ModelConfig) -> PyResult<BTreeMap<&'static str, usize>> {
    Ok(breakdown_dict(&declab::bench::count_params_for(&config.inner).map_err(err)?))
}

#[pyclass(module = "declab_py")]
pub struct Model {
    inner: model::Model,
}

fn sentence_pairs(c: &Corpus) -> Vec<(Vec<usize>, Vec<usize>)> {
    c.inner.pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).collect()
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config, seed = 1))]
    fn new(config: &ModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: model::build_model(&config.inner, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::Model::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Checkpoint bytes; equal models give equal bytes.
    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().map_err(err)
    }

    #[getter]
    fn config(&self) -> ModelConfig {
        ModelConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn trained_steps(&self) -> u64 {
        self.inner.trained_steps
    }

    fn param_breakdown(&self) -> PyResult<BTreeMap<&'static str, usize>> {
        Ok(breakdown_dict(&declab::bench::count_params(&self.inner).map_err(err)?))
    }

    /// Trains in place; returns the per-token loss of each logged step.
    #[pyo3(signature = (corpus, steps = 1000, batch_tokens = 400, warmup = 200, lr_scale = 1.0, label_smoothing = 0.1, seed = 1, log_every = 100))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        corpus: &Corpus,
        steps: u64,
        batch_tokens: usize,
        warmup: usize,
        lr_scale: f64,
        label_smoothing: f64,
        seed: u64,
        log_every: u64,
    ) -> PyResult<Vec<(u64, f64)>> {
        let cfg = TrainConfig {
            batch_tokens,
            max_steps: steps,
            label_smoothing,
            seed,
            warmup_steps: warmup,
            lr_scale,
            log_every,
            ..Default::default()
        };
        let inner = &mut self.inner;
        let corpus = &corpus.inner;
        let stats = py.detach(|| training::train(inner, corpus, &cfg)).map_err(err)?;
        Ok(stats.iter().map(|s| (s.step, s.loss_per_token)).collect())
    }

    /// Greedy decoding of every pair: `(token_accuracy, bleu, hypotheses)`.
    #[pyo3(signature = (corpus, max_extra = 10))]
    fn evaluate(&self, corpus: &Corpus, max_extra: usize) -> PyResult<(f64, f64, Vec<Vec<usize>>)> {
        training::evaluate(&self.inner, &corpus.inner, max_extra).map_err(err)
    }

    /// Translates one source sentence of word ids; greedy when `beam` is None.
    #[pyo3(signature = (src, beam = None, max_extra = 10, alpha = 1.0))]
    fn translate(&self, src: Vec<usize>, beam: Option<usize>, max_extra: usize, alpha: f64) -> PyResult<Vec<usize>> {
        let enc = self.inner.encode(&frame_source(&src)).map_err(err)?;
        let max_steps = (src.len() + max_extra).min(self.inner.config.max_len - 1);
        match beam {
            None => self.inner.greedy_decode(&enc, max_steps),
            Some(k) => self.inner.beam_decode(&enc, k, max_steps, alpha),
        }
        .map_err(err)
    }

    /// Cross-attention alignments: `[layer][sentence]` lists of `(src, tgt)` links.
    fn align(&self, corpus: &Corpus) -> PyResult<Vec<Vec<Links>>> {
        let per_layer = alignment::align_pairs(&self.inner, &sentence_pairs(corpus), 64).map_err(err)?;
        Ok(per_layer.iter().map(|l| l.iter().map(unlink).collect()).collect())
    }

    /// Corpus AER of each decoder layer against the corpus gold alignments.
    fn aer(&self, corpus: &Corpus) -> PyResult<Vec<f64>> {
        let gold = corpus
            .inner
            .gold()
            .ok_or_else(|| PyValueError::new_err("corpus has no gold alignments"))?;
        let per_layer = alignment::align_pairs(&self.inner, &sentence_pairs(corpus), 64).map_err(err)?;
        alignment::aer_by_layer(&per_layer, &gold).map_err(err)
    }

    /// Pooled cumulative source coverage after each decoder layer.
    fn coverage(&self, corpus: &Corpus) -> PyResult<Vec<f64>> {
        let per_layer = alignment::align_pairs(&self.inner, &sentence_pairs(corpus), 64).map_err(err)?;
        let lens: Vec<usize> = corpus.inner.pairs.iter().map(|p| p.src.len()).collect();
        alignment::coverage_by_layer(&per_layer, &lens).map_err(err)
    }

    /// Trains forced-decoding probes on captured representations and
    /// returns one dict per `(side, layer, tag)` cell. `layer` and `tag`
    /// default to every layer and every captured tag.
    #[pyo3(signature = (train, heldout, side = "source", layer = None, tag = None, steps = 300, d_model = None, n_heads = None, seed = 1))]
    #[allow(clippy::too_many_arguments)]
    fn probe<'py>(
        &self,
        py: Python<'py>,
        train: &Corpus,
        heldout: &Corpus,
        side: &str,
        layer: Option<usize>,
        tag: Option<&str>,
        steps: u64,
        d_model: Option<usize>,
        n_heads: Option<usize>,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let side = parse::<ProbeSide>(side)?;
        let tag = tag.map(parse::<ModuleTag>).transpose()?;
        let c = &self.inner.config;
        let mut pc = ProbeConfig::new(side, 1, ModuleTag::SemOut, d_model.unwrap_or(c.d_model), n_heads.unwrap_or(c.n_heads));
        pc.steps = steps;
        pc.seed = seed;
        pc.validate().map_err(err)?;
        let budget = ProbeBudget::from_config(&pc);
        let model = &self.inner;
        let report = py
            .detach(|| {
                let dtr = capture(model, &train.inner, data::Split::Train)?;
                let dhe = capture(model, &heldout.inner, data::Split::Heldout)?;
                let cells: Vec<_> = ProbeReport::all_cells(&dtr, &[side])
                    .into_iter()
                    .filter(|&(_, l, t)| layer.is_none_or(|x| x == l) && tag.is_none_or(|x| x == t))
                    .collect();
                if cells.is_empty() {
                    return Err(declab::Error::Invalid("no probe cell matches the requested layer and tag".into()));
                }
                ProbeReport::run(&budget, &dtr, &dhe, &cells)
            })
            .map_err(err)?;
        report
            .cells
            .iter()
            .map(|c| {
                let d = PyDict::new(py);
                d.set_item("side", c.side.to_string())?;
                d.set_item("layer", c.layer)?;
                d.set_item("tag", c.tag.to_string())?;
                d.set_item("nll_sum", c.nll_sum)?;
                d.set_item("tokens", c.tokens)?;
                d.set_item("nll_per_token", c.nll_per_token)?;
                d.set_item("ppl", c.ppl)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} decoder, d_model={}, {} params, {} steps trained)",
            self.inner.config.variant,
            self.inner.config.d_model,
            self.inner.num_params(),
            self.inner.trained_steps
        )
    }
}

/// AER of one hypothesis against sure and possible gold links.
#[pyfunction]
#[pyo3(signature = (hyp, sure, possible = Vec::new()))]
fn compute_aer(hyp: Vec<(usize, usize)>, sure: Vec<(usize, usize)>, possible: Vec<(usize, usize)>) -> f64 {
    alignment::compute_aer(&links(hyp), &GoldAlignment::new(links(sure), links(possible)))
}

/// Cumulative coverage ratios of one sentence with `n` source words.
#[pyfunction]
fn cumulative_coverage(per_layer: Vec<Vec<(usize, usize)>>, n: usize) -> PyResult<Vec<f64>> {
    let sets: Vec<LinkSet> = per_layer.into_iter().map(links).collect();
    Ok(alignment::cumulative_coverage(&sets, n).map_err(err)?.cumulative)
}

/// Corpus BLEU (percent) with add-one smoothing above unigrams.
#[pyfunction]
#[pyo3(signature = (hyps, refs, max_n = 4))]
fn corpus_bleu(hyps: Vec<Vec<usize>>, refs: Vec<Vec<usize>>, max_n: usize) -> PyResult<f64> {
    data::corpus_bleu(&hyps, &refs, max_n).map_err(err)
}

#[pymodule]
fn declab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<ModelConfig>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(compute_aer, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_coverage, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add("VARIANTS", DecoderVariant::ALL.map(|v| v.to_string()).to_vec())?;
    m.add("MODULE_TAGS", ModuleTag::ALL.map(|t| t.to_string()).to_vec())?;
    Ok(())
}
