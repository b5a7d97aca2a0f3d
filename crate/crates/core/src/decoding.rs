//! Beam search and multi-response candidate generation.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::layers::LstmState;
use crate::models::{DecodeContext, Generator, Nets};
use crate::tensor::{log_softmax, Graph, ParamSet, Tensor, TensorError};

/// Anything that can score the next token for a batch of partial sequences.
pub trait StepDecoder: Sync {
    type State: Clone + Send;

    fn vocab(&self) -> usize;

    fn initial(&self) -> Self::State;

    /// Advances each state by the token `prev[i]` (BOS at the first step) and
    /// returns the next-token logits per row together with the new states.
    fn step(
        &self,
        states: &[&Self::State],
        prev: &[usize],
    ) -> Result<(Vec<Vec<f64>>, Vec<Self::State>), TensorError>;
}

#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    /// Generated tokens; ends with EOS when the hypothesis stopped on it.
    pub tokens: Vec<usize>,
    /// Sum of per-step log-softmax probabilities.
    pub logp: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Tokens without the terminating EOS.
    pub fn response(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn selectable(v: usize) -> bool {
    v != PAD && v != BOS
}

/// Keeps the best `k` of `hyps` under [`rank`].
fn keep_best<S>(hyps: &mut Vec<Hypothesis<S>>, k: usize) {
    hyps.sort_by(|a, b| rank((a.logp, &a.tokens), (b.logp, &b.tokens)));
    hyps.truncate(k);
}

/// Length-unnormalized beam search. Up to `beam` live hypotheses are extended
/// per step; extensions that end (on EOS or at `max_len` tokens) go to a
/// finished list that keeps the best `beam`. The search stops once no live
/// hypothesis scores above the worst kept finished one, since extending can
/// only lower a score. PAD and BOS are never emitted. Returns at most `beam`
/// finished hypotheses, best first.
pub fn beam_search<D: StepDecoder>(
    dec: &D,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis<D::State>>, TensorError> {
    if beam == 0 || max_len == 0 {
        return Err(TensorError::contract("beam_search", "beam size and max length must be ≥ 1"));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logp: 0.0,
        state: dec.initial(),
        finished: false,
    }];
    let mut done: Vec<Hypothesis<D::State>> = Vec::new();
    for t in 0..max_len {
        let full = done.len() == beam;
        if live.is_empty() || (full && live[0].logp <= done[beam - 1].logp) {
            break;
        }
        let last = t + 1 == max_len;
        let states: Vec<&D::State> = live.iter().map(|h| &h.state).collect();
        let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let (logits, next_states) = dec.step(&states, &prev)?;

        // (score, parent, token)
        let mut ending: Vec<(f64, usize, usize)> = Vec::new();
        let mut going: Vec<(f64, usize, usize)> = Vec::new();
        for (row, h) in live.iter().enumerate() {
            let lsm = log_softmax(&logits[row]);
            // Within a row only the best `beam` continuations can survive.
            let mut toks: Vec<usize> = (0..lsm.len()).filter(|&v| selectable(v) && (last || v != EOS)).collect();
            toks.sort_by(|&a, &b| lsm[b].total_cmp(&lsm[a]).then(a.cmp(&b)));
            toks.truncate(beam);
            if last {
                ending.extend(toks.into_iter().map(|v| (h.logp + lsm[v], row, v)));
            } else {
                going.extend(toks.into_iter().map(|v| (h.logp + lsm[v], row, v)));
                if let Some(&e) = lsm.get(EOS) {
                    ending.push((h.logp + e, row, EOS));
                }
            }
        }
        let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
            let seq = |c: &(f64, usize, usize)| live[c.1].tokens.iter().copied().chain([c.2]).collect::<Vec<_>>();
            b.0.total_cmp(&a.0).then_with(|| seq(a).cmp(&seq(b)))
        };
        ending.sort_by(order);
        ending.truncate(beam);
        going.sort_by(order);
        going.truncate(beam);
        let extend = |&(logp, row, v): &(f64, usize, usize), finished: bool| {
            let mut tokens = live[row].tokens.clone();
            tokens.push(v);
            Hypothesis {
                tokens,
                logp,
                state: next_states[row].clone(),
                finished,
            }
        };
        done.extend(ending.iter().map(|c| extend(c, true)));
        keep_best(&mut done, beam);
        live = going.iter().map(|c| extend(c, false)).collect();
    }
    Ok(done)
}

/// Log-probability of emitting exactly `tokens` under `dec`.
pub fn forced_score<D: StepDecoder>(dec: &D, tokens: &[usize]) -> Result<f64, TensorError> {
    let mut state = dec.initial();
    let mut prev = BOS;
    let mut logp = 0.0;
    for &tok in tokens {
        let (logits, mut next) = dec.step(&[&state], &[prev])?;
        let lsm = log_softmax(&logits[0]);
        logp += *lsm
            .get(tok)
            .ok_or_else(|| TensorError::contract("forced_score", format!("token {tok} out of range")))?;
        state = next.pop().expect("one row");
        prev = tok;
    }
    Ok(logp)
}

/// A trained generator with one fixed decoding context.
pub struct NeuralStepper<'a> {
    pub gen: &'a Generator,
    pub params: &'a ParamSet<f32>,
    pub ctx: &'a DecodeContext<f32>,
}

impl StepDecoder for NeuralStepper<'_> {
    type State = (Vec<f32>, Vec<f32>);

    fn vocab(&self) -> usize {
        self.gen.vocab_size
    }

    fn initial(&self) -> Self::State {
        (self.ctx.init_h.data().to_vec(), self.ctx.init_c.data().to_vec())
    }

    fn step(
        &self,
        states: &[&Self::State],
        prev: &[usize],
    ) -> Result<(Vec<Vec<f64>>, Vec<Self::State>), TensorError> {
        let rows = states.len();
        let hd = self.gen.config.hidden_dim;
        let stack = |pick: fn(&Self::State) -> &Vec<f32>| {
            Tensor::matrix(rows, hd, states.iter().flat_map(|s| pick(s).iter().copied()).collect())
        };
        let mut g = Graph::new(self.params);
        let h = g.constant(&stack(|s| &s.0)?)?;
        let c = g.constant(&stack(|s| &s.1)?)?;
        let cond_proj = g.constant(&self.ctx.cond_proj)?;
        let next = self
            .gen
            .decoder()
            .advance(&mut g, prev, cond_proj, LstmState { h, c })?;
        let enc = match &self.ctx.enc_states {
            Some(e) => Some(g.constant(e)?),
            None => None,
        };
        let logits = self.gen.output_logits(&mut g, next.h, enc)?;
        let v = self.gen.vocab_size;
        let lv = g.value(logits);
        let out_logits = lv.chunks(v).map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let (hv, cv) = (g.value(next.h), g.value(next.c));
        let out_states = hv.chunks(hd).zip(cv.chunks(hd)).map(|(a, b)| (a.to_vec(), b.to_vec())).collect();
        Ok((out_logits, out_states))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Latent samples per post for the variational models.
    pub n_samples: usize,
    /// Beam width per latent sample.
    pub beam: usize,
    /// Beam width of the single Seq2Seq search.
    pub seq2seq_beam: usize,
    pub max_len: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n_samples: 50,
            beam: 20,
            seq2seq_beam: 50,
            max_len: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Generated tokens without the terminating EOS.
    pub tokens: Vec<usize>,
    /// Whether decoding stopped on EOS (it is part of the scored sequence).
    pub ended: bool,
    /// `log p(response | conditioning)` accumulated during the search.
    pub loglik: f64,
    /// Latent sample that produced this candidate (0 for Seq2Seq).
    pub sample: usize,
}

impl Candidate {
    /// The exact token sequence whose probability `loglik` is.
    pub fn scored_tokens(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if self.ended {
            t.push(EOS);
        }
        t
    }
}

fn to_candidate<S>(h: &Hypothesis<S>, sample: usize) -> Candidate {
    Candidate {
        tokens: h.response().to_vec(),
        ended: h.tokens.last() == Some(&EOS),
        loglik: h.logp,
        sample,
    }
}

/// Candidate responses for one post. Variational models contribute the best
/// non-empty hypothesis of one beam search per latent sample; Seq2Seq
/// contributes every hypothesis of one wide beam.
pub fn generate_candidates<R: Rng + ?Sized>(
    gen: &Generator,
    params: &ParamSet<f32>,
    post: &[usize],
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<(Vec<DecodeContext<f32>>, Vec<Candidate>), TensorError> {
    if cfg.n_samples == 0 {
        return Err(TensorError::contract("generate", "n_samples must be ≥ 1"));
    }
    let contexts = gen.decode_contexts(params, post, cfg.n_samples, rng)?;
    let cands = if let Nets::Seq2seq { .. } = gen.nets {
        let dec = NeuralStepper {
            gen,
            params,
            ctx: &contexts[0],
        };
        beam_search(&dec, cfg.seq2seq_beam, cfg.max_len)?
            .iter()
            .map(|h| to_candidate(h, 0))
            .collect()
    } else {
        contexts
            .par_iter()
            .map(|ctx| {
                let dec = NeuralStepper { gen, params, ctx };
                let hyps = beam_search(&dec, cfg.beam, cfg.max_len)?;
                // An empty response is never a usable reply.
                let best = hyps.iter().find(|h| !h.response().is_empty()).unwrap_or(&hyps[0]);
                Ok(to_candidate(best, ctx.sample))
            })
            .collect::<Result<Vec<_>, TensorError>>()?
    };
    Ok((contexts, cands))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Logits depend on the position only.
    struct Table(Vec<Vec<f64>>);

    impl StepDecoder for Table {
        type State = usize;
        fn vocab(&self) -> usize {
            self.0[0].len()
        }
        fn initial(&self) -> usize {
            0
        }
        fn step(&self, states: &[&usize], _prev: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<usize>), TensorError> {
            Ok((
                states.iter().map(|&&t| self.0[t].clone()).collect(),
                states.iter().map(|&&t| t + 1).collect(),
            ))
        }
    }

    #[test]
    fn greedy_picks_argmax_with_low_id_ties() {
        let t = Table(vec![vec![0.0, 0.0, 9.0, 1.0, 2.0, 2.0], vec![0.0, 0.0, 0.0, 5.0, 1.0, 1.0]]);
        let best = beam_search(&t, 1, 4).unwrap();
        assert_eq!(best.len(), 1);
        // BOS (id 2) is masked, so 4 beats 5 on the tie, then EOS.
        assert_eq!(best[0].tokens, vec![4, EOS]);
        assert!(best[0].finished);
    }

    #[test]
    fn max_length_finishes_hypotheses() {
        let t = Table(vec![vec![0.0, 0.0, 0.0, -5.0, 3.0]; 3]);
        let best = beam_search(&t, 2, 3).unwrap();
        assert_eq!(best[0].tokens, vec![4, 4, 4]);
        assert!(best.iter().all(|h| h.finished));
    }

    #[test]
    fn forced_score_matches_search() {
        let t = Table(vec![vec![0.1, 0.2, 0.3, 0.4, 0.5]; 4]);
        for h in beam_search(&t, 5, 4).unwrap() {
            assert_eq!(forced_score(&t, &h.tokens).unwrap(), h.logp);
        }
    }

    #[test]
    fn zero_beam_is_rejected() {
        let t = Table(vec![vec![0.0; 5]]);
        assert!(beam_search(&t, 0, 3).is_err());
        assert!(beam_search(&t, 1, 0).is_err());
    }
}
