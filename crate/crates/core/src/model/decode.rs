use crate::data::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::tensor::Tape;

use super::{EncoderState, Model, Padded};

/// A finished beam entry. `tokens` excludes EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub terminated: bool,
    pub score: f64,
}

fn never_generated(tok: usize) -> bool {
    tok == PAD || tok == BOS || tok == UNK
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Smallest id among the maximal allowed entries.
fn argmax_allowed(row: &[f64]) -> usize {
    let mut best = (EOS, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if !never_generated(i) && v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `logprob / len^alpha`, where `len` counts EOS for terminated outputs.
pub fn length_normalized(logprob: f64, tokens: usize, terminated: bool, alpha: f64) -> f64 {
    let len = (tokens + terminated as usize).max(1) as f64;
    logprob / len.powf(alpha)
}

impl Model {
    /// Next-token log-probabilities after each prefix (each without BOS).
    pub fn step_logprobs(&self, enc: &EncoderState, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let states = vec![enc; prefixes.len()];
        self.step_logprobs_multi(&states, prefixes)
    }

    fn step_logprobs_multi(&self, states: &[&EncoderState], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::no_grad();
        let (mem, lens) = self.memory_from_states(&mut tape, states)?;
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let tgt = Padded::new(&inputs)?;
        let dec = self.decode_vars(&mut tape, mem, &lens, &tgt)?;
        let v = self.config.tgt_vocab;
        let logits = tape.value(dec.logits);
        Ok(inputs
            .iter()
            .enumerate()
            .map(|(b, inp)| {
                let off = (b * tgt.width + inp.len() - 1) * v;
                log_softmax(&logits[off..off + v])
            })
            .collect())
    }

    /// Iterative argmax until EOS or `max_steps` tokens; EOS is not returned.
    pub fn greedy_decode(&self, enc: &EncoderState, max_steps: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_states(&[enc], max_steps)?.remove(0))
    }

    fn greedy_decode_states(&self, states: &[&EncoderState], max_steps: usize) -> Result<Vec<Vec<usize>>> {
        let mut outs: Vec<Vec<usize>> = vec![Vec::new(); states.len()];
        let mut live: Vec<usize> = (0..states.len()).collect();
        for _ in 0..max_steps {
            if live.is_empty() {
                break;
            }
            let st: Vec<&EncoderState> = live.iter().map(|&i| states[i]).collect();
            let prefixes: Vec<Vec<usize>> = live.iter().map(|&i| outs[i].clone()).collect();
            let lps = self.step_logprobs_multi(&st, &prefixes)?;
            let mut next = Vec::with_capacity(live.len());
            for (&i, lp) in live.iter().zip(&lps) {
                let tok = argmax_allowed(lp);
                if tok != EOS {
                    outs[i].push(tok);
                    next.push(i);
                }
            }
            live = next;
        }
        Ok(outs)
    }

    /// Greedy decoding of many framed sources at once.
    pub fn greedy_decode_batch(&self, sources: &[Vec<usize>], max_steps: usize) -> Result<Vec<Vec<usize>>> {
        let states = sources.iter().map(|s| self.encode(s)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&EncoderState> = states.iter().collect();
        self.greedy_decode_states(&refs, max_steps)
    }

    /// Length-normalized beam search; finished hypotheses best first.
    ///
    /// Each step keeps the `beam` best expansions of the live set; an EOS
    /// expansion finishes its hypothesis. The greedy path is always among the
    /// finished candidates, so the winner never scores below greedy.
    pub fn beam_search(&self, enc: &EncoderState, beam: usize, max_steps: usize, alpha: f64) -> Result<Vec<Hypothesis>> {
        if beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        let mut done: Vec<Hypothesis> = Vec::new();
        let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        for _ in 0..max_steps {
            if live.is_empty() {
                break;
            }
            let prefixes: Vec<Vec<usize>> = live.iter().map(|(t, _)| t.clone()).collect();
            let lps = self.step_logprobs(enc, &prefixes)?;
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (h, lp) in lps.iter().enumerate() {
                for (tok, &l) in lp.iter().enumerate() {
                    if !never_generated(tok) {
                        cands.push((live[h].1 + l, h, tok));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(beam);
            let mut next = Vec::with_capacity(beam);
            for (lp, h, tok) in cands {
                let tokens = live[h].0.clone();
                if tok == EOS {
                    done.push(Hypothesis {
                        score: length_normalized(lp, tokens.len(), true, alpha),
                        tokens,
                        logprob: lp,
                        terminated: true,
                    });
                } else {
                    let mut t = tokens;
                    t.push(tok);
                    next.push((t, lp));
                }
            }
            live = next;
        }
        for (tokens, lp) in live {
            done.push(Hypothesis {
                score: length_normalized(lp, tokens.len(), false, alpha),
                tokens,
                logprob: lp,
                terminated: false,
            });
        }
        if beam > 1 {
            let g = self.greedy_decode(enc, max_steps)?;
            if !done.iter().any(|h| h.tokens == g) {
                let (logprob, terminated) = self.sequence_logprob(enc, &g, max_steps)?;
                done.push(Hypothesis {
                    score: length_normalized(logprob, g.len(), terminated, alpha),
                    tokens: g,
                    logprob,
                    terminated,
                });
            }
        }
        done.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
        Ok(done)
    }

    pub fn beam_decode(&self, enc: &EncoderState, beam: usize, max_steps: usize, alpha: f64) -> Result<Vec<usize>> {
        Ok(self.beam_search(enc, beam, max_steps, alpha)?.remove(0).tokens)
    }

    /// Log-probability of emitting `tokens` and then EOS when
    /// `tokens.len() < max_steps`; otherwise of `tokens` alone.
    pub fn sequence_logprob(&self, enc: &EncoderState, tokens: &[usize], max_steps: usize) -> Result<(f64, bool)> {
        let terminated = tokens.len() < max_steps;
        let mut tape = Tape::no_grad();
        let (mem, lens) = self.memory_from_states(&mut tape, &[enc])?;
        let input: Vec<usize> = std::iter::once(BOS).chain(tokens.iter().copied()).collect();
        let tgt = Padded::new(std::slice::from_ref(&input))?;
        let dec = self.decode_vars(&mut tape, mem, &lens, &tgt)?;
        let v = self.config.tgt_vocab;
        let logits = tape.value(dec.logits);
        let mut total = 0.0;
        let targets = tokens.iter().copied().chain(terminated.then_some(EOS));
        for (t, tok) in targets.enumerate() {
            total += log_softmax(&logits[t * v..(t + 1) * v])[tok];
        }
        Ok((total, terminated))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, DecoderVariant, ModelConfig};

    fn cfg(tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 2,
            src_vocab: 8,
            tgt_vocab,
            dropout: 0.0,
            max_len: 16,
            variant: DecoderVariant::Standard,
            preset: None,
        }
    }

    #[test]
    fn greedy_contracts() {
        let m = build_model(&cfg(9), 11).unwrap();
        let enc = m.encode(&[4, 5, 6, EOS]).unwrap();
        let a = m.greedy_decode(&enc, 6).unwrap();
        assert_eq!(a, m.greedy_decode(&enc, 6).unwrap());
        assert!(a.len() <= 6);
        assert!(a.iter().all(|&t| t >= 4));
        assert!(m.greedy_decode(&enc, 1).unwrap().len() <= 1);
        let batch = m.greedy_decode_batch(&[vec![4, 5, 6, EOS], vec![7, EOS]], 6).unwrap();
        assert_eq!(batch[0], a);
        assert_eq!(batch[1], m.greedy_decode(&m.encode(&[7, EOS]).unwrap(), 6).unwrap());
    }

    #[test]
    fn beam_one_is_greedy_and_wider_beams_dominate() {
        for seed in 0..6 {
            let m = build_model(&cfg(9), seed).unwrap();
            let enc = m.encode(&[4, 5, 6, 7, EOS]).unwrap();
            let g = m.greedy_decode(&enc, 7).unwrap();
            assert_eq!(m.beam_decode(&enc, 1, 7, 1.0).unwrap(), g);
            let (glp, gt) = m.sequence_logprob(&enc, &g, 7).unwrap();
            let gscore = length_normalized(glp, g.len(), gt, 1.0);
            for beam in [2, 4, 10] {
                let best = &m.beam_search(&enc, beam, 7, 1.0).unwrap()[0];
                assert!(best.score >= gscore - 1e-12);
            }
        }
        let m = build_model(&cfg(9), 0).unwrap();
        let enc = m.encode(&[4, EOS]).unwrap();
        assert!(matches!(m.beam_search(&enc, 0, 3, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn beam_two_is_exhaustive_over_binary_vocab() {
        // generable tokens are EOS and id 4 only
        for seed in 0..5 {
            let m = build_model(&cfg(5), seed).unwrap();
            let enc = m.encode(&[4, 5, EOS]).unwrap();
            let mut best: Option<(f64, Vec<usize>)> = None;
            for n in 0..=3 {
                let toks = vec![4; n];
                let (lp, term) = m.sequence_logprob(&enc, &toks, 3).unwrap();
                let s = length_normalized(lp, n, term, 1.0);
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, toks));
                }
            }
            let (bs, bt) = best.unwrap();
            let hyps = m.beam_search(&enc, 2, 3, 1.0).unwrap();
            assert_eq!(hyps.len(), 4);
            assert_eq!(hyps[0].tokens, bt);
            assert!((hyps[0].score - bs).abs() < 1e-12);
        }
    }
}
