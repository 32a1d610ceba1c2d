//! Adam, the inverse-square-root warm-up schedule and the training loop.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batchify, Batch, ParallelCorpus, PAD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{CeStats, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub d_model: usize,
    pub warmup_steps: usize,
    /// Multiplier on the whole curve; 1 reproduces the plain schedule.
    pub scale: f64,
}

impl Schedule {
    pub fn new(d_model: usize, warmup_steps: usize) -> Result<Self> {
        if warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        Ok(Self {
            d_model,
            warmup_steps,
            scale: 1.0,
        })
    }

    /// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step < 1 {
            return Err(Error::Invalid("learning-rate steps start at 1".into()));
        }
        let s = step as f64;
        let w = self.warmup_steps as f64;
        Ok(self.scale * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
    }
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyper(store, 0.9, 0.98, 1e-9)
    }

    pub fn with_hyper(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Global L2 norm of all populated gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, p)| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update; gradients are cleared afterwards.
/// `grad_scale` multiplies every gradient first (used for clipping).
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64, grad_scale: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Invalid("optimizer state belongs to a different model".into()));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.tensor.grad().is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let g = p.tensor.take_grad().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let w = p.tensor.values_mut();
        for j in 0..w.len() {
            let gj = g[j] * grad_scale;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("adam update"));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    pub log_every: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited JSON training log.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_tokens: 4096,
            max_steps: 1000,
            label_smoothing: 0.1,
            seed: 1,
            warmup_steps: 4000,
            lr_scale: 1.0,
            clip_norm: None,
            log_every: 100,
            checkpoint_every: 0,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Unsmoothed NLL per target token over the logging window.
    pub loss_per_token: f64,
    pub tokens_per_sec: f64,
    pub wall_time: f64,
}

/// One optimizer step on `batch`; returns the unsmoothed loss statistics.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &Batch,
    lr: f64,
    cfg: &TrainConfig,
    step: u64,
) -> Result<CeStats> {
    let mut tape = Tape::training(cfg.seed.wrapping_mul(1_000_003).wrapping_add(step));
    let (loss, stats) = model.forward_loss(&mut tape, &batch.src, &batch.tgt_in, &batch.tgt_out, cfg.label_smoothing)?;
    let loss = tape.scale(loss, 1.0 / stats.tokens as f64)?;
    tape.backward(loss, &mut model.store)?;
    drop(tape);
    let scale = match cfg.clip_norm {
        Some(c) => {
            let n = grad_norm(&model.store);
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    adam_step(&mut model.store, opt, lr, scale)?;
    Ok(stats)
}

/// Trains `model` in place. Returns one record per logging window; the
/// first record is always step 1.
pub fn train(model: &mut Model, corpus: &ParallelCorpus, cfg: &TrainConfig) -> Result<Vec<TrainStats>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    corpus.check_vocab(model.config.src_vocab, model.config.tgt_vocab)?;
    let mut sched = Schedule::new(model.config.d_model, cfg.warmup_steps)?;
    sched.scale = cfg.lr_scale;
    let mut opt = OptimizerState::new(&model.store);
    let mut log = match &cfg.log_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let start = Instant::now();
    let mut history = Vec::new();
    let (mut win_nll, mut win_tok) = (0.0, 0usize);
    let mut train_secs = 0.0;
    let mut win_start = 0.0;
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: while step < cfg.max_steps {
        let batches = batchify(corpus, cfg.batch_tokens, cfg.seed, epoch)?;
        for batch in batches {
            if step >= cfg.max_steps {
                break 'outer;
            }
            step += 1;
            let t0 = Instant::now();
            let lr = sched.lr_at(step)?;
            let stats = train_step(model, &mut opt, &batch, lr, cfg, step)?;
            model.trained_steps += 1;
            train_secs += t0.elapsed().as_secs_f64();
            if !stats.nll_sum.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            win_nll += stats.nll_sum;
            win_tok += stats.tokens;
            debug_assert_eq!(stats.tokens, batch.tgt_out.ids.iter().filter(|&&t| t != PAD).count());

            let log_now = step == 1 || step == cfg.max_steps || (cfg.log_every > 0 && step.is_multiple_of(cfg.log_every));
            if log_now {
                let secs = (train_secs - win_start).max(1e-9);
                let rec = TrainStats {
                    step,
                    epoch,
                    lr,
                    loss_per_token: win_nll / win_tok as f64,
                    tokens_per_sec: win_tok as f64 / secs,
                    wall_time: start.elapsed().as_secs_f64(),
                };
                if let Some(w) = log.as_mut() {
                    let line = serde_json::to_string(&rec)?;
                    writeln!(w, "{line}").map_err(|e| Error::io(cfg.log_path.clone().unwrap_or_default(), e))?;
                }
                history.push(rec);
                win_nll = 0.0;
                win_tok = 0;
                win_start = train_secs;
            }
            if let Some(dir) = &cfg.checkpoint_dir {
                if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
                    model.save(&dir.join(format!("step{step}.ckpt")))?;
                }
            }
        }
        epoch += 1;
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io(cfg.log_path.clone().unwrap_or_default(), e))?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        model.save(&dir.join("final.ckpt"))?;
    }
    Ok(history)
}

/// Held-out greedy decoding; returns `(token accuracy, BLEU, hypotheses)`.
pub fn evaluate(model: &Model, corpus: &ParallelCorpus, max_extra: usize) -> Result<(f64, f64, Vec<Vec<usize>>)> {
    let mut hyps = Vec::with_capacity(corpus.len());
    for chunk in corpus.pairs.chunks(64) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|p| crate::data::frame_source(&p.src)).collect();
        let max_steps = chunk.iter().map(|p| p.src.len()).max().unwrap_or(0) + max_extra;
        hyps.extend(model.greedy_decode_batch(&srcs, max_steps.min(model.config.max_len - 1))?);
    }
    let refs: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.tgt.clone()).collect();
    let acc = crate::data::token_accuracy(&hyps, &refs)?;
    let bleu = crate::data::corpus_bleu(&hyps, &refs, 4)?;
    Ok((acc, bleu, hyps))
}
