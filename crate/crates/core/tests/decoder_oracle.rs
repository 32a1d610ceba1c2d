mod common;

use common::{decoder_oracle_worst, max_diff, random_config, random_sentence, reference_decode, reference_encode};
use declab::data::{BOS, EOS};
use declab::model::{build_model, DecoderVariant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn standard_decoder_matches_reference_on_fifty_configs() {
    let worst = decoder_oracle_worst(2024, DecoderVariant::Standard, 50);
    assert!(worst <= 1e-10, "max |diff| {worst}");
}

#[test]
fn other_variants_match_reference() {
    for variant in [DecoderVariant::Simplified, DecoderVariant::SemIfm, DecoderVariant::SemTemIfm] {
        let worst = decoder_oracle_worst(7, variant, 10);
        assert!(worst <= 1e-10, "{variant}: max |diff| {worst}");
    }
}

#[test]
fn batched_teacher_forcing_matches_reference_per_sentence() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = build_model(&random_config(&mut rng, DecoderVariant::Standard), 5).unwrap();
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for len in [1, 4, 2] {
        let mut s = random_sentence(&mut rng, model.config.src_vocab, len);
        s.push(EOS);
        sources.push(s);
        let mut t = vec![BOS];
        t.extend(random_sentence(&mut rng, model.config.tgt_vocab, 5 - len));
        targets.push(t);
    }
    let traced = model.trace_batch(&sources, &targets).unwrap();
    for ((src, tgt), (logits, _)) in sources.iter().zip(&targets).zip(&traced) {
        let reference = reference_decode(&model, &reference_encode(&model, src), tgt);
        assert!(max_diff(logits.values(), &reference) <= 1e-10);
    }
}
