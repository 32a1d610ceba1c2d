mod common;

use common::{hand_nll, micro_dump};
use declab::blocks::ModuleTag;
use declab::data::{gen_synthetic, ParallelCorpus, ReorderRule, Split, SyntheticTaskSpec, RESERVED};
use declab::model::{build_model, ModelConfig};
use declab::probing::{
    build_probe, capture, probe_eval, probe_train, DumpSentence, ProbeConfig, ProbeSide, RepresentationDump,
};
use declab::tensor::Tensor;

fn config(side: ProbeSide, d: usize, steps: u64) -> ProbeConfig {
    let mut c = ProbeConfig::new(side, 1, ModuleTag::SemOut, d, 2);
    c.steps = steps;
    c.warmup_steps = 20;
    c
}

#[test]
fn eval_matches_hand_summed_nll() {
    for seed in 0..6 {
        for side in [ProbeSide::Source, ProbeSide::Target] {
            let train = micro_dump(seed, 4, 9, 5);
            let held = micro_dump(seed + 100, 4, 9, 7);
            let mut probe = build_probe(&config(side, 4, 15), 9, seed).unwrap();
            probe_train(&mut probe, &train).unwrap();
            let cell = probe_eval(&probe, &held).unwrap();
            let (nll, tokens) = hand_nll(&probe, &held);
            assert_eq!(cell.tokens, tokens);
            assert!((cell.nll_sum - nll).abs() <= 1e-12, "{side}: {} vs {nll}", cell.nll_sum);
            assert!((cell.nll_per_token - nll / tokens as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn uniform_probe_scores_tokens_times_log_vocab() {
    let held = micro_dump(3, 4, 11, 9);
    let mut probe = build_probe(&config(ProbeSide::Source, 4, 1), 11, 3).unwrap();
    for p in probe.store.iter_mut() {
        if p.name.starts_with("probe.out_proj") {
            p.tensor.values_mut().fill(0.0);
        }
    }
    let cell = probe_eval(&probe, &held).unwrap();
    let want = cell.tokens as f64 * 11f64.ln();
    assert!((cell.nll_sum - want).abs() <= cell.tokens as f64 * f64::EPSILON * want, "{} vs {want}", cell.nll_sum);
}

#[test]
fn history_mask_hides_later_rows() {
    let dump = micro_dump(8, 4, 9, 1);
    let s = &dump.sentences[0];
    let h = &s.reps[&(1, ModuleTag::SemOut)];
    let t = h.shape()[0];
    let target = build_probe(&config(ProbeSide::Target, 4, 1), 9, 1).unwrap();
    let source = build_probe(&config(ProbeSide::Source, 4, 1), 9, 1).unwrap();
    let base_t = target.logits(h, &s.tgt).unwrap();
    let base_s = source.logits(h, &s.src).unwrap();
    for j in 0..t {
        let mut v = h.values().to_vec();
        v[j * 4..j * 4 + 4].iter_mut().for_each(|x| *x += 3.0);
        let hp = Tensor::new(vec![t, 4], v).unwrap();
        let pert = target.logits(&hp, &s.tgt).unwrap();
        for i in 0..s.tgt.len() {
            let same = base_t.row(i) == pert.row(i);
            assert_eq!(same, j > i, "row {i} after perturbing H[{j}]");
        }
        let pert = source.logits(&hp, &s.src).unwrap();
        for i in 0..s.src.len() {
            assert_ne!(base_s.row(i), pert.row(i));
        }
    }
}

fn small_corpus(n: usize, seed: u64) -> ParallelCorpus {
    let spec = SyntheticTaskSpec::new(24, 3, 8, ReorderRule::AdjacentSwap, seed).unwrap();
    gen_synthetic(&spec, n).unwrap()
}

#[test]
fn probing_leaves_the_nmt_model_untouched() {
    let corpus = small_corpus(20, 1);
    let mut cfg = ModelConfig::toy(24, 24);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.preset = None;
    let model = build_model(&cfg, 4).unwrap();
    let before = model.to_bytes().unwrap();
    let dump = capture(&model, &corpus, Split::Train).unwrap();
    let mut probe = build_probe(&config(ProbeSide::Source, 8, 10), 24, 1).unwrap();
    probe_train(&mut probe, &dump).unwrap();
    probe_eval(&probe, &dump).unwrap();
    assert_eq!(model.to_bytes().unwrap(), before);
}

/// Dump whose representations are built by `row(sentence, position)`.
fn dump_from(corpus: &ParallelCorpus, d: usize, row: impl Fn(&[usize], usize) -> Vec<f64>) -> RepresentationDump {
    let sentences = corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let t = p.tgt.len() + 1;
            let vals: Vec<f64> = (0..t).flat_map(|j| row(&p.src, j)).collect();
            DumpSentence {
                id,
                src: p.src.clone(),
                tgt: p.tgt.clone(),
                reps: [((1, ModuleTag::SemOut), Tensor::new(vec![t, d], vals).unwrap())].into_iter().collect(),
            }
        })
        .collect();
    RepresentationDump {
        d_model: d,
        n_layers: 1,
        tags: vec![ModuleTag::SemOut],
        src_vocab: 24,
        tgt_vocab: 24,
        split: corpus.split,
        sentences,
    }
}

#[test]
fn zero_representations_give_unigram_entropy() {
    // Enough pairs that the probe cannot memorize training sentences.
    let (train, held) = small_corpus(2200, 2).split_heldout(200).unwrap();
    let zeros = |_: &[usize], _: usize| vec![0.0; 16];
    let mut cfg = config(ProbeSide::Source, 16, 300);
    cfg.warmup_steps = 100;
    let mut probe = build_probe(&cfg, 24, 5).unwrap();
    probe_train(&mut probe, &dump_from(&train, 16, zeros)).unwrap();
    let cell = probe_eval(&probe, &dump_from(&held, 16, zeros)).unwrap();

    let mut counts = [0usize; 24];
    for p in &train.pairs {
        for &w in &p.src {
            counts[w] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.ln()
        })
        .sum();
    let rel = (cell.nll_per_token - entropy).abs() / entropy;
    assert!(rel < 0.05, "nll {} vs unigram entropy {entropy}", cell.nll_per_token);
}

#[test]
fn informative_representations_are_learned() {
    let train = small_corpus(500, 3);
    let one_hot = |src: &[usize], j: usize| {
        let mut v = vec![0.0; 24];
        if let Some(&w) = src.get(j) {
            v[w - RESERVED] = 1.0;
        }
        v
    };
    let mut probe = build_probe(&config(ProbeSide::Source, 24, 300), 24, 6).unwrap();
    let curve = probe_train(&mut probe, &dump_from(&train, 24, one_hot)).unwrap();
    let first: f64 = curve[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = curve[curve.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last <= 0.5 * first, "loss went from {first} to {last}");
}
