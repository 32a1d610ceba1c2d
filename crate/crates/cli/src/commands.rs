use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use declab::alignment::{aer_by_layer, align_pairs, coverage_by_layer, parse_gold, write_gold, Indexing};
use declab::bench::{bench_infer, bench_train, count_params_for, millions, BenchReport, DecodeMode, ParamBreakdown};
use declab::data::{
    frame_source, gen_synthetic, load_parallel, ParallelCorpus, Split, SyntheticTaskSpec, Vocab, VocabPolicy,
};
use declab::model::{build_model, Model};
use declab::probing::{capture, ProbeBudget, ProbeCell, ProbeConfig, ProbeReport, ProbeSide};
use declab::report::{export_report, read_csv, write_table, AerRow, BenchRow, CoverageRow, ParamRow, Report};
use declab::training::{evaluate, train};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::*;
use crate::settings::Settings;
use crate::CliError;

/// Extra decoding steps allowed beyond the source length.
const MAX_EXTRA: usize = 10;

pub struct Ctx {
    pub settings: Settings,
    pub out: PathBuf,
}

impl Ctx {
    fn create_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| declab::Error::io(&self.out, e))?;
        let path = self.out.join("config.toml");
        std::fs::write(&path, self.settings.to_toml()).map_err(|e| declab::Error::io(&path, e))?;
        Ok(())
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, text).map_err(|e| declab::Error::io(&path, e))?;
        Ok(path)
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file or directory: {}", path.display())))
    }
}

fn load_vocabs(dir: &Path) -> Result<(Vocab, Vocab), CliError> {
    let (s, t) = (dir.join("vocab.src"), dir.join("vocab.tgt"));
    require(&s)?;
    require(&t)?;
    Ok((Vocab::load(&s)?, Vocab::load(&t)?))
}

/// Loads `<stem>.src/.tgt` from a data directory, with `<stem>.aln` gold
/// alignments when present.
fn load_split(dir: &Path, split: SplitArg) -> Result<ParallelCorpus, CliError> {
    let (sv, tv) = load_vocabs(dir)?;
    let stem = split.stem();
    let (s, t) = (dir.join(format!("{stem}.src")), dir.join(format!("{stem}.tgt")));
    require(&s)?;
    require(&t)?;
    let mut corpus = load_parallel(&s, &t, VocabPolicy::Frozen { src: sv, tgt: tv })?;
    let aln = dir.join(format!("{stem}.aln"));
    if aln.exists() {
        corpus.attach_gold(parse_gold(&aln, Indexing::ZeroBased, Some(corpus.len()))?)?;
    }
    corpus.split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::Heldout,
    };
    Ok(corpus)
}

fn load_model(args: &ModelArgs) -> Result<Model, CliError> {
    load_checkpoint(&args.model, args.allow_untrained)
}

fn load_checkpoint(path: &Path, allow_untrained: bool) -> Result<Model, CliError> {
    require(path)?;
    let model = Model::load(path)?;
    if model.trained_steps == 0 && !allow_untrained {
        return Err(CliError::Usage(format!(
            "{} has never been trained; pass --allow-untrained to use it anyway",
            path.display()
        )));
    }
    Ok(model)
}

fn pairs(corpus: &ParallelCorpus) -> Vec<(Vec<usize>, Vec<usize>)> {
    corpus.pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).collect()
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

pub fn gen_data(ctx: &mut Ctx, a: &GenDataArgs) -> Result<(), CliError> {
    let d = &mut ctx.settings.data;
    d.vocab = a.vocab.unwrap_or(d.vocab);
    d.min_len = a.min_len.unwrap_or(d.min_len);
    d.max_len = a.max_len.unwrap_or(d.max_len);
    d.rule = a.rule.unwrap_or(d.rule);
    d.seed = a.seed.unwrap_or(d.seed);
    d.pairs = a.pairs.unwrap_or(d.pairs);
    d.heldout = a.heldout.unwrap_or(d.heldout);
    let d = d.clone();
    ctx.create_out()?;
    let mut spec = SyntheticTaskSpec::new(d.vocab, d.min_len, d.max_len, d.rule, d.seed)?;
    spec.block_size = d.block_size;
    spec.validate()?;
    let (train, held) = gen_synthetic(&spec, d.pairs)?.split_heldout(d.heldout)?;
    train.export(&ctx.out, "train")?;
    held.export(&ctx.out, "heldout")?;
    ctx.write("task.json", &serde_json::to_string_pretty(&spec)?)?;
    println!(
        "wrote {} training and {} held-out pairs ({}, vocab {}) to {}",
        train.len(),
        held.len(),
        d.rule,
        d.vocab,
        ctx.out.display()
    );
    Ok(())
}

fn apply_model_flags(s: &mut Settings, f: &ModelFlags) {
    let m = &mut s.model;
    m.preset = f.preset.unwrap_or(m.preset);
    m.variant = f.variant.unwrap_or(m.variant);
    m.enc_layers = f.enc_layers.or(m.enc_layers);
    m.dec_layers = f.dec_layers.or(m.dec_layers);
    m.dropout = f.dropout.unwrap_or(m.dropout);
    m.seed = f.model_seed.unwrap_or(m.seed);
}

pub fn train_cmd(ctx: &mut Ctx, a: &TrainArgs) -> Result<(), CliError> {
    apply_model_flags(&mut ctx.settings, &a.model);
    let t = &mut ctx.settings.train;
    t.steps = a.steps.unwrap_or(t.steps);
    t.batch_tokens = a.batch_tokens.unwrap_or(t.batch_tokens);
    t.warmup = a.warmup.unwrap_or(t.warmup);
    t.lr_scale = a.lr_scale.unwrap_or(t.lr_scale);
    let corpus = load_split(&a.data, SplitArg::Train)?;
    let held_path = a.data.join("heldout.src");
    let held = if held_path.exists() {
        Some(load_split(&a.data, SplitArg::Heldout)?)
    } else {
        None
    };
    let config = ctx.settings.model.config(corpus.src_vocab.len(), corpus.tgt_vocab.len());
    config.validate()?;
    ctx.create_out()?;
    let mut model = build_model(&config, ctx.settings.model.seed)?;
    let history = train(&mut model, &corpus, &ctx.settings.train.config(&ctx.out))?;
    if let Some(last) = history.last() {
        println!(
            "trained {} ({} params) for {} steps: loss/token {:.4}, {:.0} tokens/s",
            config.variant,
            model.num_params(),
            last.step,
            last.loss_per_token,
            last.tokens_per_sec
        );
    }
    if let Some(held) = held {
        let (acc, bleu, _) = evaluate(&model, &held, MAX_EXTRA)?;
        let doc = serde_json::json!({ "split": "heldout", "sentences": held.len(), "token_accuracy": acc, "bleu": bleu });
        ctx.write("eval.json", &serde_json::to_string_pretty(&doc)?)?;
        println!("held-out token accuracy {acc:.4}, BLEU {bleu:.2}");
    }
    println!("checkpoint: {}", ctx.out.join("final.ckpt").display());
    Ok(())
}

pub fn translate(ctx: &mut Ctx, a: &TranslateArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let (sv, tv) = load_vocabs(&a.data)?;
    require(&a.input)?;
    let text = std::fs::read_to_string(&a.input).map_err(|e| declab::Error::io(&a.input, e))?;
    ctx.create_out()?;
    let mut out = String::new();
    for line in text.lines() {
        let words: Vec<&str> = line.split_whitespace().collect();
        let ids = sv.encode(&words);
        let enc = model.encode(&frame_source(&ids))?;
        let max_steps = (ids.len() + MAX_EXTRA).min(model.config.max_len - 1);
        let hyp = match a.beam {
            None => model.greedy_decode(&enc, max_steps)?,
            Some(k) => model.beam_decode(&enc, k, max_steps, ctx.settings.bench.length_penalty)?,
        };
        out.push_str(&tv.decode(&hyp).join(" "));
        out.push('\n');
    }
    ctx.write("translations.txt", &out)?;
    print!("{out}");
    Ok(())
}

pub fn eval(ctx: &mut Ctx, a: &EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.corpus.model)?;
    let corpus = load_split(&a.corpus.data, a.corpus.split)?;
    ctx.create_out()?;
    let (acc, bleu, hyps) = evaluate(&model, &corpus, MAX_EXTRA)?;
    let text: String = hyps.iter().map(|h| corpus.tgt_vocab.decode(h).join(" ") + "\n").collect();
    ctx.write("hypotheses.txt", &text)?;
    let doc = serde_json::json!({
        "split": a.corpus.split.stem(),
        "sentences": corpus.len(),
        "token_accuracy": acc,
        "bleu": bleu,
    });
    ctx.write("eval.json", &serde_json::to_string_pretty(&doc)?)?;
    println!("{} sentences: token accuracy {acc:.4}, BLEU {bleu:.2}", corpus.len());
    Ok(())
}

pub fn probe(ctx: &mut Ctx, a: &ProbeArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let p = &mut ctx.settings.probe;
    p.steps = a.steps.unwrap_or(p.steps);
    let train_set = load_split(&a.data, SplitArg::Train)?;
    let held = load_split(&a.data, SplitArg::Heldout)?;
    let n_layers = model.config.n_dec_layers;
    if let Some(l) = a.layer {
        if l == 0 || l > n_layers {
            return Err(CliError::Usage(format!("--layer {l} is outside 1..={n_layers}")));
        }
    }
    ctx.create_out()?;
    let p = &ctx.settings.probe;
    let mut pc = ProbeConfig::new(
        ProbeSide::Source,
        1,
        declab::blocks::ModuleTag::SemOut,
        p.d_model.unwrap_or(model.config.d_model),
        p.n_heads.unwrap_or(model.config.n_heads),
    );
    pc.steps = p.steps;
    pc.batch_tokens = p.batch_tokens;
    pc.warmup_steps = p.warmup;
    pc.lr_scale = p.lr_scale;
    pc.seed = p.seed;
    pc.validate()?;
    let budget = ProbeBudget::from_config(&pc);

    let dtr = capture(&model, &train_set, Split::Train)?;
    let dhe = capture(&model, &held, Split::Heldout)?;
    let sides: &[ProbeSide] = match a.side {
        SideArg::Source => &[ProbeSide::Source],
        SideArg::Target => &[ProbeSide::Target],
        SideArg::Both => &[ProbeSide::Source, ProbeSide::Target],
    };
    if let Some(tag) = a.tag {
        if !dtr.tags.contains(&tag) {
            return Err(CliError::Usage(format!("a {} decoder has no {tag} output", model.config.variant)));
        }
    }
    let cells: Vec<_> = ProbeReport::all_cells(&dtr, sides)
        .into_iter()
        .filter(|&(_, l, t)| a.layer.is_none_or(|x| x == l) && a.tag.is_none_or(|x| x == t))
        .collect();
    let report = ProbeReport::run(&budget, &dtr, &dhe, &cells)?;
    for c in &report.cells {
        println!(
            "{} layer {} {}: {:.4} nats/token over {} tokens (ppl {:.3})",
            c.side, c.layer, c.tag, c.nll_per_token, c.tokens, c.ppl
        );
    }
    export_report(&ctx.out, &[Report::Probe(report)])?;
    Ok(())
}

pub fn align(ctx: &mut Ctx, a: &AlignArgs) -> Result<(), CliError> {
    let model = load_model(&a.corpus.model)?;
    let corpus = load_split(&a.corpus.data, a.corpus.split)?;
    let gold_path = a
        .gold
        .clone()
        .unwrap_or_else(|| a.corpus.data.join(format!("{}.aln", a.corpus.split.stem())));
    require(&gold_path)?;
    let gold = parse_gold(&gold_path, a.indexing, Some(corpus.len()))?;
    ctx.create_out()?;
    let links = align_pairs(&model, &pairs(&corpus), 64)?;
    let aer = aer_by_layer(&links, &gold)?;
    for (l, per_sentence) in links.iter().enumerate() {
        let hyp: Vec<_> = per_sentence
            .iter()
            .map(|s| declab::alignment::GoldAlignment::sure_only(s.clone()))
            .collect();
        write_gold(&ctx.out.join(format!("alignments.layer{}.txt", l + 1)), &hyp, a.indexing)?;
    }
    println!("AER per layer: {}", list(&aer));
    export_report(&ctx.out, &[Report::Aer(aer)])?;
    Ok(())
}

pub fn coverage(ctx: &mut Ctx, a: &CorpusArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let corpus = load_split(&a.data, a.split)?;
    ctx.create_out()?;
    let links = align_pairs(&model, &pairs(&corpus), 64)?;
    let lens: Vec<usize> = corpus.pairs.iter().map(|p| p.src.len()).collect();
    let cov = coverage_by_layer(&links, &lens)?;
    println!("cumulative coverage per layer: {}", list(&cov));
    export_report(&ctx.out, &[Report::Coverage(cov)])?;
    Ok(())
}

fn params_table(b: &ParamBreakdown) -> String {
    let mut s = String::new();
    let row = |s: &mut String, name: &str, n: usize| {
        let _ = writeln!(s, "{name:<22}{n:>14}{:>10}M", millions(n));
    };
    let _ = writeln!(s, "{:<22}{:>14}{:>11}", "decoder operation", "parameters", "millions");
    row(&mut s, "self-attention", b.self_attn);
    row(&mut s, "encoder attention", b.enc_attn);
    row(&mut s, "feed-forward", b.ffn);
    row(&mut s, "layer norms", b.layer_norms);
    row(&mut s, "decoder total", b.decoder_total());
    row(&mut s, "embeddings + output", b.embeddings);
    row(&mut s, "encoder", b.encoder);
    row(&mut s, "model total", b.total);
    s
}

pub fn params(ctx: &mut Ctx, a: &ParamsArgs) -> Result<(), CliError> {
    let m = &mut ctx.settings.model;
    m.preset = a.preset.unwrap_or(m.preset);
    m.variant = a.variant.unwrap_or(m.variant);
    m.dec_layers = a.dec_layers.or(m.dec_layers);
    let config = ctx.settings.model.config(a.src_vocab, a.tgt_vocab);
    config.validate()?;
    ctx.create_out()?;
    let b = count_params_for(&config)?;
    println!(
        "{} decoder, {} preset, {} layers, vocab {}/{}",
        config.variant, ctx.settings.model.preset, config.n_dec_layers, a.src_vocab, a.tgt_vocab
    );
    print!("{}", params_table(&b));
    export_report(&ctx.out, &[Report::Params(b)])?;
    Ok(())
}

pub fn bench(ctx: &mut Ctx, a: &BenchArgs) -> Result<(), CliError> {
    let bs = &mut ctx.settings.bench;
    bs.reps = a.reps.unwrap_or(bs.reps);
    bs.steps = a.steps.unwrap_or(bs.steps);
    let settings = ctx.settings.bench.settings();
    let mut reports: Vec<BenchReport> = Vec::new();
    match a.kind {
        BenchKind::Train => {
            let corpus = load_split(&a.data, SplitArg::Train)?;
            let variants = if a.variant.is_empty() {
                vec![ctx.settings.model.variant]
            } else {
                a.variant.clone()
            };
            ctx.create_out()?;
            for v in variants {
                let mut m = ctx.settings.model.clone();
                m.variant = v;
                let config = m.config(corpus.src_vocab.len(), corpus.tgt_vocab.len());
                reports.push(bench_train(&config, &corpus, &settings)?);
            }
        }
        BenchKind::Infer => {
            if a.model.is_empty() {
                return Err(CliError::Usage("inference benchmarks need at least one --model".into()));
            }
            let models = a
                .model
                .iter()
                .map(|p| load_checkpoint(p, a.allow_untrained))
                .collect::<Result<Vec<_>, _>>()?;
            let corpus = load_split(&a.data, SplitArg::Heldout)?;
            ctx.create_out()?;
            let mode = a.beam.map_or(DecodeMode::Greedy, DecodeMode::Beam);
            for m in &models {
                reports.push(bench_infer(m, &corpus, mode, &settings)?);
            }
        }
    }
    for r in declab::report::bench_rows(&reports) {
        println!(
            "{} {} {} {}: median {:.1} (min {:.1}, max {:.1}) over {} reps",
            r.variant, r.preset, r.kind, r.mode, r.median, r.min, r.max, r.reps
        );
    }
    export_report(&ctx.out, &[Report::Bench(reports)])?;
    Ok(())
}

/// Parses one exported table, checks the CSV against its JSON mirror and
/// writes both again into `out`. Returns false when the report is absent.
fn reexport<T: Serialize + DeserializeOwned + PartialEq>(from: &Path, out: &Path, name: &str) -> Result<bool, CliError> {
    let csv_path = from.join(format!("{name}.csv"));
    if !csv_path.exists() {
        return Ok(false);
    }
    let rows: Vec<T> = read_csv(&csv_path)?;
    let json_path = from.join(format!("{name}.json"));
    let mut meta = serde_json::Value::Null;
    if json_path.exists() {
        let json_rows: Vec<T> = declab::report::read_json_rows(&json_path, name)?;
        if json_rows != rows {
            return Err(declab::Error::Format(format!("{} and its JSON mirror disagree", csv_path.display())).into());
        }
        let text = std::fs::read_to_string(&json_path).map_err(|e| declab::Error::io(&json_path, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        meta = doc.get("meta").cloned().unwrap_or(serde_json::Value::Null);
    }
    write_table(out, name, &rows, meta)?;
    println!("{name}: {} rows", rows.len());
    Ok(true)
}

pub fn export(ctx: &mut Ctx, a: &ExportArgs) -> Result<(), CliError> {
    require(&a.from)?;
    ctx.create_out()?;
    let out = ctx.out.clone();
    let found = [
        reexport::<ProbeCell>(&a.from, &out, "probe")?,
        reexport::<AerRow>(&a.from, &out, "aer")?,
        reexport::<CoverageRow>(&a.from, &out, "coverage")?,
        reexport::<ParamRow>(&a.from, &out, "params")?,
        reexport::<BenchRow>(&a.from, &out, "bench")?,
    ];
    if !found.contains(&true) {
        return Err(CliError::Usage(format!("{} holds no exported reports", a.from.display())));
    }
    Ok(())
}
