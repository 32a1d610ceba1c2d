//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion:
//!
//!     cargo test -p declab --release --test acceptance -- --nocapture

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use declab::alignment::{aer_by_layer, align_pairs, coverage_by_layer, LinkSet};
use declab::bench::{bench_infer, bench_train, count_params_for, millions, BenchSettings, DecodeMode};
use declab::blocks::ModuleTag;
use declab::data::{gen_synthetic, ParallelCorpus, ReorderRule, Split, SyntheticTaskSpec};
use declab::model::{build_model, DecoderVariant, Model, ModelConfig};
use declab::probing::{build_probe, capture, probe_eval, probe_train, ProbeBudget, ProbeConfig, ProbeReport, ProbeSide};
use declab::report::{export_report, Report};
use declab::training::{evaluate, train, TrainConfig};

const VOCAB: usize = 24;
const TRAIN_STEPS: u64 = 1500;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn task() -> (ParallelCorpus, ParallelCorpus) {
    let spec = SyntheticTaskSpec::new(VOCAB, 3, 8, ReorderRule::AdjacentSwap, 7).unwrap();
    gen_synthetic(&spec, 2200).unwrap().split_heldout(200).unwrap()
}

fn toy(variant: DecoderVariant) -> ModelConfig {
    ModelConfig::toy(VOCAB, VOCAB).with_variant(variant)
}

fn train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_tokens: 400,
        max_steps: steps,
        warmup_steps: 200,
        log_every: 500,
        ..Default::default()
    }
}

struct Trained {
    model: Model,
    accuracy: f64,
    aer: Vec<f64>,
    coverage: Vec<f64>,
}

fn train_variant(variant: DecoderVariant, train_set: &ParallelCorpus, held: &ParallelCorpus) -> Trained {
    let mut model = build_model(&toy(variant), 1).unwrap();
    train(&mut model, train_set, &train_config(TRAIN_STEPS)).unwrap();
    let (accuracy, _, _) = evaluate(&model, held, 3).unwrap();
    let pairs: Vec<_> = held.pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).collect();
    let links: Vec<Vec<LinkSet>> = align_pairs(&model, &pairs, 64).unwrap();
    let aer = aer_by_layer(&links, &held.gold().unwrap()).unwrap();
    let lens: Vec<usize> = held.pairs.iter().map(|p| p.src.len()).collect();
    let coverage = coverage_by_layer(&links, &lens).unwrap();
    Trained {
        model,
        accuracy,
        aer,
        coverage,
    }
}

fn best(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn params() -> Outcome {
    let t = Instant::now();
    let base = count_params_for(&ModelConfig::base(32000, 32000)).map_err(|e| e.to_string())?;
    let big = count_params_for(&ModelConfig::big(32000, 32000)).map_err(|e| e.to_string())?;
    let fmt = |b: &declab::bench::ParamBreakdown| [millions(b.self_attn), millions(b.enc_attn), millions(b.ffn)];
    let (fb, fg) = (fmt(&base), fmt(&big));
    let secs = t.elapsed().as_secs_f64();
    check(
        fb == ["6.3", "6.3", "12.6"] && fg == ["25.2", "25.2", "50.4"] && secs < 1.0,
        format!("base {fb:?}, big {fg:?} in {secs:.3}s"),
    )
}

fn decoder_oracle() -> Outcome {
    let worst = common::decoder_oracle_worst(2024, DecoderVariant::Standard, 50);
    check(worst <= 1e-10, format!("max |logit diff| {worst:.2e} over 50 configs"))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let prims = common::grads::primitive_errors();
    let model = common::grads::toy_two_layer_error();
    let worst_prim = prims.iter().map(|p| p.1).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    check(
        worst_prim < common::grads::TOL && model < common::grads::TOL && secs < 60.0,
        format!(
            "{} primitives worst {worst_prim:.2e}, 2-layer toy worst {model:.2e}, {secs:.1}s",
            prims.len()
        ),
    )
}

fn forced_decoding_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..6 {
        for side in [ProbeSide::Source, ProbeSide::Target] {
            let train_dump = common::micro_dump(seed, 4, 9, 5);
            let held = common::micro_dump(seed + 100, 4, 9, 7);
            let mut cfg = ProbeConfig::new(side, 1, ModuleTag::SemOut, 4, 2);
            cfg.steps = 15;
            let mut probe = build_probe(&cfg, 9, seed).map_err(|e| e.to_string())?;
            probe_train(&mut probe, &train_dump).map_err(|e| e.to_string())?;
            let cell = probe_eval(&probe, &held).map_err(|e| e.to_string())?;
            let (nll, tokens) = common::hand_nll(&probe, &held);
            if tokens != cell.tokens {
                return Err(format!("token counts differ: {} vs {tokens}", cell.tokens));
            }
            worst = worst.max((cell.nll_sum - nll).abs());
        }
    }
    let held = common::micro_dump(3, 4, 11, 9);
    let mut probe = build_probe(&ProbeConfig::new(ProbeSide::Source, 1, ModuleTag::SemOut, 4, 2), 11, 3)
        .map_err(|e| e.to_string())?;
    for p in probe.store.iter_mut() {
        if p.name.starts_with("probe.out_proj") {
            p.tensor.values_mut().fill(0.0);
        }
    }
    let cell = probe_eval(&probe, &held).map_err(|e| e.to_string())?;
    let want = cell.tokens as f64 * 11f64.ln();
    let gap = (cell.nll_sum - want).abs();
    check(
        worst <= 1e-12 && gap <= cell.tokens as f64 * f64::EPSILON * want,
        format!("max |probe - hand| {worst:.1e}; uniform {} vs tokens*lnV {want} (gap {gap:.1e})", cell.nll_sum),
    )
}

fn set_oracles(runs: &[(&str, &Trained)]) -> Outcome {
    let aer = common::aer_mismatches(11, 1000);
    let cov = common::coverage_mismatches(12, 1000);
    let mut bad_curves = Vec::new();
    for (name, t) in runs {
        if t.coverage.windows(2).any(|w| w[1] < w[0]) {
            bad_curves.push(name.to_string());
        }
    }
    check(
        aer == 0 && cov == 0 && bad_curves.is_empty(),
        format!(
            "{aer} AER/extraction and {cov} coverage mismatches on 1000 instances each; non-monotone real curves: {bad_curves:?}"
        ),
    )
}

fn toy_training(std: &Trained, simp: &Trained) -> Outcome {
    check(
        std.accuracy >= 0.99 && (simp.accuracy - std.accuracy).abs() <= 0.03,
        format!(
            "standard {:.4}, simplified {:.4} held-out token accuracy after {TRAIN_STEPS} steps",
            std.accuracy, simp.accuracy
        ),
    )
}

fn tem_ablation(std: &Trained, sem_ifm: &Trained, sem_tem: &Trained) -> Outcome {
    let (a_std, a_ifm) = (best(&std.aer), best(&sem_ifm.aer));
    check(
        a_ifm > a_std && sem_ifm.accuracy < std.accuracy && (sem_tem.accuracy - std.accuracy).abs() <= 0.02,
        format!(
            "best-layer AER standard {a_std:.4} vs sem_ifm {a_ifm:.4}; accuracy standard {:.4}, sem_ifm {:.4}, sem_tem_ifm {:.4}",
            std.accuracy, sem_ifm.accuracy, sem_tem.accuracy
        ),
    )
}

fn probing_direction(trained: &Model, train_set: &ParallelCorpus, held: &ParallelCorpus) -> Outcome {
    let untrained = build_model(&trained.config, trained.seed).map_err(|e| e.to_string())?;
    let cells: Vec<_> = (1..=trained.config.n_dec_layers)
        .map(|l| (ProbeSide::Source, l, ModuleTag::SemOut))
        .collect();
    let budget = ProbeBudget::from_config(&ProbeConfig::new(ProbeSide::Source, 1, ModuleTag::SemOut, 64, 4));
    let mut nll = Vec::new();
    for m in [trained, &untrained] {
        let dtr = capture(m, train_set, Split::Train).map_err(|e| e.to_string())?;
        let dhe = capture(m, held, Split::Heldout).map_err(|e| e.to_string())?;
        let r = ProbeReport::run(&budget, &dtr, &dhe, &cells).map_err(|e| e.to_string())?;
        nll.push(r.cells.iter().map(|c| c.nll_per_token).collect::<Vec<_>>());
    }
    let ok = nll[0].iter().zip(&nll[1]).all(|(t, u)| *t <= 0.9 * u);
    check(
        ok,
        format!("source NLL/token per SEM_OUT layer: trained {:?} vs untrained {:?}", nll[0], nll[1]),
    )
}

fn throughput(std: &Model, simp: &Model, train_set: &ParallelCorpus, held: &ParallelCorpus) -> Outcome {
    let s = BenchSettings::default();
    let run = |f: &dyn Fn() -> declab::Result<declab::bench::BenchReport>| f().map_err(|e| e.to_string());
    let tr_std = run(&|| bench_train(&std.config, train_set, &s))?;
    let tr_simp = run(&|| bench_train(&simp.config, train_set, &s))?;
    let in_std = run(&|| bench_infer(std, held, DecodeMode::Greedy, &s))?;
    let in_simp = run(&|| bench_infer(simp, held, DecodeMode::Greedy, &s))?;
    let med = |r: &declab::bench::BenchReport, train: bool| {
        if train {
            r.train_words_per_sec.as_ref().unwrap().median
        } else {
            r.infer_sentences_per_sec.as_ref().unwrap().median
        }
    };
    let (a, b, c, d) = (med(&tr_std, true), med(&tr_simp, true), med(&in_std, false), med(&in_simp, false));
    check(
        b > a && d > c,
        format!(
            "median train words/s standard {a:.0} vs simplified {b:.0} ({:+.1}%); infer sent/s {c:.1} vs {d:.1} ({:+.1}%); {} reps",
            100.0 * (b / a - 1.0),
            100.0 * (d / c - 1.0),
            s.reps
        ),
    )
}

/// Trains, probes and exports a small pipeline; returns every artifact.
fn pipeline(dir: &Path, train_set: &ParallelCorpus, held: &ParallelCorpus) -> declab::Result<BTreeMap<String, Vec<u8>>> {
    let mut model = build_model(&toy(DecoderVariant::Standard), 3)?;
    let mut cfg = train_config(20);
    cfg.checkpoint_dir = Some(dir.join("ckpt"));
    train(&mut model, train_set, &cfg)?;
    let small_train = ParallelCorpus {
        pairs: train_set.pairs[..200].to_vec(),
        ..train_set.clone()
    };
    let dtr = capture(&model, &small_train, Split::Train)?;
    let dhe = capture(&model, held, Split::Heldout)?;
    let mut pc = ProbeConfig::new(ProbeSide::Source, 1, ModuleTag::SemOut, 64, 4);
    pc.steps = 10;
    let budget = ProbeBudget::from_config(&pc);
    let cells = [(ProbeSide::Source, 2, ModuleTag::SemOut), (ProbeSide::Target, 1, ModuleTag::IfmAddNorm2)];
    let probe = ProbeReport::run(&budget, &dtr, &dhe, &cells)?;
    let pairs: Vec<_> = held.pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).collect();
    let links = align_pairs(&model, &pairs, 64)?;
    let aer = aer_by_layer(&links, &held.gold().unwrap())?;
    let lens: Vec<usize> = held.pairs.iter().map(|p| p.src.len()).collect();
    let cov = coverage_by_layer(&links, &lens)?;
    let reports = [
        Report::Probe(probe),
        Report::Aer(aer),
        Report::Coverage(cov),
        Report::Params(declab::bench::count_params(&model)?),
    ];
    let mut files = BTreeMap::new();
    let ckpt = dir.join("ckpt").join("final.ckpt");
    files.insert("final.ckpt".to_string(), std::fs::read(&ckpt).map_err(|e| declab::Error::io(&ckpt, e))?);
    for p in export_report(&dir.join("out"), &reports)? {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        files.insert(name, std::fs::read(&p).map_err(|e| declab::Error::io(&p, e))?);
    }
    Ok(files)
}

fn determinism(train_set: &ParallelCorpus, held: &ParallelCorpus) -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fa = pipeline(a.path(), train_set, held).map_err(|e| e.to_string())?;
    let fb = pipeline(b.path(), train_set, held).map_err(|e| e.to_string())?;
    let differing: Vec<_> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).cloned().collect();
    check(
        fa.len() == fb.len() && differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", fa.len()),
    )
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let (train_set, held) = task();
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "parameter accounting", params()),
        (2, "decoder reference oracle", decoder_oracle()),
        (3, "finite-difference gradients", gradients()),
        (4, "forced-decoding NLL oracle", forced_decoding_oracle()),
    ];
    let runs: Vec<(DecoderVariant, Trained)> = DecoderVariant::ALL
        .into_iter()
        .map(|v| (v, train_variant(v, &train_set, &held)))
        .collect();
    let get = |v: DecoderVariant| &runs.iter().find(|r| r.0 == v).unwrap().1;
    let named: Vec<(&str, &Trained)> = runs.iter().map(|(v, t)| (v.as_str(), t)).collect();
    let (std, simp) = (get(DecoderVariant::Standard), get(DecoderVariant::Simplified));
    results.push((5, "AER/coverage set oracles", set_oracles(&named)));
    results.push((6, "toy-task training", toy_training(std, simp)));
    results.push((
        7,
        "TEM-ablation direction",
        tem_ablation(std, get(DecoderVariant::SemIfm), get(DecoderVariant::SemTemIfm)),
    ));
    results.push((8, "probing information direction", probing_direction(&std.model, &train_set, &held)));
    results.push((9, "throughput direction", throughput(&std.model, &simp.model, &train_set, &held)));
    results.push((10, "determinism", determinism(&train_set, &held)));

    println!();
    for (v, t) in &runs {
        println!("  {v}: accuracy {:.4}, AER {:?}, coverage {:?}", t.accuracy, t.aer, t.coverage);
    }
    for (id, name, r) in &results {
        match r {
            Ok(d) => println!("PASS {id:>2} {name}: {d}"),
            Err(d) => println!("FAIL {id:>2} {name}: {d}"),
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
