use declab::data::{gen_synthetic, ParallelCorpus, ReorderRule, SyntheticTaskSpec};
use declab::model::{build_model, DecoderVariant, Model, ModelConfig};
use declab::training::{train, TrainConfig};

fn corpus() -> ParallelCorpus {
    let spec = SyntheticTaskSpec::new(16, 2, 6, ReorderRule::BlockReverse, 9).unwrap();
    gen_synthetic(&spec, 120).unwrap()
}

fn small(variant: DecoderVariant) -> ModelConfig {
    let mut c = ModelConfig::toy(16, 16).with_variant(variant);
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.preset = None;
    c
}

fn run(variant: DecoderVariant, steps: u64) -> (Model, Vec<f64>) {
    let mut m = build_model(&small(variant), 5).unwrap();
    let cfg = TrainConfig {
        batch_tokens: 120,
        max_steps: steps,
        warmup_steps: 100,
        log_every: 1,
        ..Default::default()
    };
    let stats = train(&mut m, &corpus(), &cfg).unwrap();
    (m, stats.iter().map(|s| s.loss_per_token).collect())
}

#[test]
fn training_is_bitwise_reproducible() {
    for variant in DecoderVariant::ALL {
        let (a, la) = run(variant, 12);
        let (b, lb) = run(variant, 12);
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap(), "{variant}");
        assert_eq!(la, lb);
        assert_eq!(a.trained_steps, 12);
    }
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model(&small(DecoderVariant::Standard), 8).unwrap();
    let cfg = TrainConfig {
        max_steps: 0,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    assert!(train(&mut m, &corpus(), &cfg).unwrap().is_empty());
    let init = build_model(&small(DecoderVariant::Standard), 8).unwrap();
    assert_eq!(std::fs::read(dir.path().join("final.ckpt")).unwrap(), init.to_bytes().unwrap());
}

#[test]
fn periodic_checkpoints_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model(&small(DecoderVariant::Simplified), 2).unwrap();
    let cfg = TrainConfig {
        batch_tokens: 120,
        max_steps: 6,
        log_every: 2,
        checkpoint_every: 3,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        log_path: Some(dir.path().join("log.jsonl")),
        ..Default::default()
    };
    let stats = train(&mut m, &corpus(), &cfg).unwrap();
    assert_eq!(stats.iter().map(|s| s.step).collect::<Vec<_>>(), [1, 2, 4, 6]);
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert_eq!(Model::load(&dir.path().join("step3.ckpt")).unwrap().trained_steps, 3);
    assert_eq!(Model::load(&dir.path().join("final.ckpt")).unwrap(), m);
}

#[test]
fn loss_goes_down() {
    for variant in DecoderVariant::ALL {
        let (_, losses) = run(variant, 300);
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.7 * head, "{variant}: {head} -> {tail}");
    }
}
