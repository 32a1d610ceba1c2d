//! Wall-clock checks. Kept to one test so nothing else in this binary
//! competes for the CPU while timing.

use declab::bench::{bench_infer, bench_train, BenchSettings, DecodeMode};
use declab::data::{gen_synthetic, ReorderRule, SyntheticTaskSpec};
use declab::model::{build_model, ModelConfig};

#[test]
fn throughput_measurements() {
    let spec = SyntheticTaskSpec::new(24, 3, 8, ReorderRule::AdjacentSwap, 7).unwrap();
    let (train_set, held) = gen_synthetic(&spec, 600).unwrap().split_heldout(30).unwrap();
    let config = ModelConfig::toy(24, 24);

    let short = BenchSettings::default();
    let long = BenchSettings {
        steps: 2 * short.steps,
        ..short.clone()
    };
    let a = bench_train(&config, &train_set, &short).unwrap().train_words_per_sec.unwrap();
    let b = bench_train(&config, &train_set, &long).unwrap().train_words_per_sec.unwrap();
    assert!(a.min > 0.0 && b.min > 0.0);
    let change = (b.median / a.median - 1.0).abs();
    assert!(change < 0.2, "median {} vs {} words/s", a.median, b.median);

    let model = build_model(&config, 1).unwrap();
    let s = BenchSettings {
        max_sentences: 20,
        discard: 2,
        ..Default::default()
    };
    let greedy = bench_infer(&model, &held, DecodeMode::Greedy, &s).unwrap();
    let beam = bench_infer(&model, &held, DecodeMode::Beam(10), &s).unwrap();
    assert_eq!(greedy.outputs_stable, Some(true));
    assert_eq!(beam.outputs_stable, Some(true));
    let (g, k) = (
        greedy.infer_sentences_per_sec.unwrap().median,
        beam.infer_sentences_per_sec.unwrap().median,
    );
    assert!(g >= k, "greedy {g} vs beam-10 {k} sentences/s");
}
