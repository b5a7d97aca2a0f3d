//! Topic-coherence discriminator (an ESIM-style pair classifier built from
//! single-layer LSTMs) and the combined ranking score.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::AuxConfig;
use crate::data::{Checkpoint, CheckpointError, Corpus, Vocab};
use crate::layers::{Activation, Embedding, LstmCell, Mlp};
use crate::tensor::{Graph, ParamSet, Real, TensorError, Var};
use crate::train::{accumulate_grads, Session, TrainError};

pub const DEFAULT_LAMBDA: f64 = 5.0;
pub const DEFAULT_TOP_K: usize = 5;

/// A post/response pair with its coherence label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeled {
    pub post: Vec<String>,
    pub response: Vec<String>,
    pub coherent: bool,
}

/// All training pairs as positives plus the same number of negatives made by
/// shuffling responses across posts. A shuffled pair that happens to exist in
/// the corpus is re-drawn.
pub fn make_negatives(corpus: &Corpus, seed: u64) -> Result<Vec<Labeled>, TensorError> {
    if corpus.num_posts() < 2 {
        return Err(TensorError::contract(
            "make_negatives",
            "need at least two distinct posts to build negatives",
        ));
    }
    let pairs = corpus.pairs();
    let positive: HashSet<(&[String], &[String])> =
        pairs.iter().map(|p| (p.post.as_slice(), p.response.as_slice())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..pairs.len()).collect();
    perm.shuffle(&mut rng);

    let mut out: Vec<Labeled> = pairs
        .iter()
        .map(|p| Labeled {
            post: p.post.clone(),
            response: p.response.clone(),
            coherent: true,
        })
        .collect();
    const MAX_REDRAWS: usize = 10_000;
    for (i, p) in pairs.iter().enumerate() {
        let mut j = perm[i];
        let mut tries = 0;
        while positive.contains(&(p.post.as_slice(), pairs[j].response.as_slice())) {
            tries += 1;
            if tries > MAX_REDRAWS {
                return Err(TensorError::contract(
                    "make_negatives",
                    "could not find a non-matching response; corpus too small to shuffle",
                ));
            }
            j = rng.random_range(0..pairs.len());
        }
        out.push(Labeled {
            post: p.post.clone(),
            response: pairs[j].response.clone(),
            coherent: false,
        });
    }
    Ok(out)
}

/// Encoded labeled pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcdExample {
    pub post: Vec<usize>,
    pub response: Vec<usize>,
    pub coherent: bool,
}

pub fn encode_labeled(data: &[Labeled], vocab: &Vocab, max_len: usize) -> Vec<TcdExample> {
    let cut = |s: &[String]| vocab.encode(&s[..s.len().min(max_len)]);
    data.iter()
        .map(|l| TcdExample {
            post: cut(&l.post),
            response: cut(&l.response),
            coherent: l.coherent,
        })
        .collect()
}

/// Probability that a response is coherent with its post, with its log
/// computed without rounding through `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcdScore {
    pub p: f64,
    pub log_p: f64,
}

#[derive(Debug, Clone)]
pub struct Tcd {
    pub config: AuxConfig,
    pub vocab_size: usize,
    pub emb: Embedding,
    pub enc: LstmCell,
    pub comp: LstmCell,
    pub head: Mlp,
}

/// Intermediate values of one forward pass, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct TcdForward {
    pub logits: Var,
    /// Post-to-response alignment weights `[Lp, Lr]`.
    pub post_attention: Var,
    /// Response-to-post alignment weights `[Lr, Lp]`.
    pub response_attention: Var,
}

impl Tcd {
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: &AuxConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<(Tcd, ParamSet<T>), String> {
        config.validate()?;
        let (e, h, std) = (config.embed_dim, config.hidden_dim, config.init_std);
        let mut ps = ParamSet::new();
        let emb = Embedding::new(&mut ps, "tcd.emb", vocab_size, e, std, rng);
        let enc = LstmCell::new(&mut ps, "tcd.enc", e, h, std, rng);
        let comp = LstmCell::new(&mut ps, "tcd.comp", 4 * h, h, std, rng);
        let head = Mlp::new(
            &mut ps,
            "tcd.head",
            &[4 * h, h, 2],
            &[Activation::Tanh, Activation::Linear],
            std,
            rng,
        );
        Ok((
            Tcd {
                config: config.clone(),
                vocab_size,
                emb,
                enc,
                comp,
                head,
            },
            ps,
        ))
    }

    pub fn seeded(config: &AuxConfig, vocab_size: usize) -> Result<(Tcd, ParamSet<f32>, ChaCha8Rng), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (t, ps) = Tcd::init(config, vocab_size, &mut rng)?;
        Ok((t, ps, rng))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Tcd, ParamSet<f32>), CheckpointError> {
        ckpt.expect_kind("tcd")?;
        let config: AuxConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, mut ps) =
            Tcd::init::<f32, _>(&config, ckpt.vocab.len(), &mut rng).map_err(CheckpointError::Integrity)?;
        ps.copy_from(&ckpt.params)
            .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
        Ok((t, ps))
    }

    pub fn checkpoint(&self, params: &ParamSet<f32>, vocab: &Vocab) -> Checkpoint {
        Checkpoint {
            kind: "tcd".into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            vocab: vocab.clone(),
            params: params.clone(),
            optimizer: None,
            rng: None,
        }
    }

    fn encode_seq<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var, TensorError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(TensorError::contract("tcd_forward", format!("token id {bad} outside vocabulary")));
        }
        let x = self.emb.lookup(g, ids)?;
        let (hs, _) = self.enc.encode(g, x)?;
        g.concat_rows(&hs)
    }

    /// `[a; ã; a − ã; a ⊙ ã]` composed by the second LSTM, then mean- and
    /// max-pooled over time.
    fn compose<T: Real>(&self, g: &mut Graph<'_, T>, a: Var, aligned: Var) -> Result<(Var, Var), TensorError> {
        let diff = g.sub(a, aligned)?;
        let prod = g.mul(a, aligned)?;
        let m = g.concat_cols(&[a, aligned, diff, prod])?;
        let (vs, _) = self.comp.encode(g, m)?;
        let v = g.concat_rows(&vs)?;
        let mean = g.mean(v, 0)?;
        let max = g.max_rows(v);
        Ok((mean, max))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        post: &[usize],
        response: &[usize],
    ) -> Result<TcdForward, TensorError> {
        if post.is_empty() || response.is_empty() {
            return Err(TensorError::contract("tcd_forward", "empty post or response"));
        }
        let a = self.encode_seq(g, post)?;
        let b = self.encode_seq(g, response)?;
        let scores_ab = g.matmul_nt(a, b)?;
        let scores_ba = g.matmul_nt(b, a)?;
        let w_a = g.softmax_rows(scores_ab);
        let w_b = g.softmax_rows(scores_ba);
        let a_tilde = g.matmul(w_a, b)?;
        let b_tilde = g.matmul(w_b, a)?;
        let (a_mean, a_max) = self.compose(g, a, a_tilde)?;
        let (b_mean, b_max) = self.compose(g, b, b_tilde)?;
        let v = g.concat_cols(&[a_mean, a_max, b_mean, b_max])?;
        let logits = self.head.forward(g, v)?;
        Ok(TcdForward {
            logits,
            post_attention: w_a,
            response_attention: w_b,
        })
    }

    /// Cross-entropy of the coherence label.
    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, ex: &TcdExample) -> Result<Var, TensorError> {
        let f = self.forward(g, &ex.post, &ex.response)?;
        g.softmax_cross_entropy(f.logits, &[usize::from(ex.coherent)], None)
    }

    pub fn score(&self, params: &ParamSet<f32>, post: &[usize], response: &[usize]) -> Result<TcdScore, TensorError> {
        let mut g = Graph::new(params);
        let f = self.forward(&mut g, post, response)?;
        let l = g.value(f.logits);
        // log softmax(l)[1] = −softplus(l0 − l1)
        let d = l[0] as f64 - l[1] as f64;
        let log_p = -(d.max(0.0) + (-d.abs()).exp().ln_1p());
        Ok(TcdScore { p: log_p.exp(), log_p })
    }

    /// One pass over `data` in a seeded random order.
    pub fn train_epoch(&self, s: &mut Session, data: &[TcdExample]) -> Result<f64, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Contract("empty training set".into()));
        }
        let mut total = 0.0;
        let mut seen = 0;
        for ids in s.epoch_batches(data.len(), self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| s.step >= m) {
                break;
            }
            let batch: Vec<&TcdExample> = ids.iter().map(|&i| &data[i]).collect();
            let (grads, loss, _) = accumulate_grads(&s.params, &batch, |g, ex| Ok((self.loss(g, ex)?, ())))
                .map_err(|e| TrainError::Diverged {
                    step: s.step,
                    batch: batch.len(),
                    detail: e.to_string(),
                })?;
            s.apply(grads, batch.len())?;
            s.step += 1;
            total += loss;
            seen += batch.len();
        }
        Ok(total / seen.max(1) as f64)
    }

    /// Fraction of `data` classified correctly at threshold 0.5.
    pub fn accuracy(&self, params: &ParamSet<f32>, data: &[TcdExample]) -> Result<f64, TensorError> {
        let hits = data
            .par_iter()
            .map(|ex| {
                let s = self.score(params, &ex.post, &ex.response)?;
                Ok(usize::from((s.p > 0.5) == ex.coherent))
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / data.len().max(1) as f64)
    }
}

/// `loglik + λ · ln p`
pub fn rank_score(loglik: f64, tcd_prob: f64, lambda: f64) -> Result<f64, TensorError> {
    if !(tcd_prob > 0.0 && tcd_prob <= 1.0) {
        return Err(TensorError::contract(
            "rank_score",
            format!("coherence probability must lie in (0, 1], got {tcd_prob}"),
        ));
    }
    Ok(loglik + lambda * tcd_prob.ln())
}

/// A candidate before reranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub tokens: Vec<String>,
    pub loglik: f64,
    pub tcd: TcdScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResponse {
    pub tokens: Vec<String>,
    pub loglik: f64,
    pub tcd_prob: f64,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Scores every candidate, keeps the best-scoring copy of each distinct
/// response, sorts by score (ties by token order) and returns the top `k`.
pub fn rerank_topk(cands: &[Scored], lambda: f64, k: usize) -> Result<Vec<RankedResponse>, TensorError> {
    if cands.is_empty() {
        return Err(TensorError::contract("rerank_topk", "no candidates"));
    }
    let mut best: HashMap<&[String], RankedResponse> = HashMap::new();
    for c in cands {
        if !(c.tcd.log_p <= 0.0) {
            return Err(TensorError::contract(
                "rerank_topk",
                format!("log-probability {} is not a valid log of (0, 1]", c.tcd.log_p),
            ));
        }
        // Same as `rank_score`, using the unrounded log-probability.
        let score = c.loglik + lambda * c.tcd.log_p;
        let entry = RankedResponse {
            tokens: c.tokens.clone(),
            loglik: c.loglik,
            tcd_prob: c.tcd.p,
            score,
            rank: 0,
        };
        match best.get(c.tokens.as_slice()) {
            Some(prev) if prev.score >= score => {}
            _ => {
                best.insert(&c.tokens, entry);
            }
        }
    }
    let mut out: Vec<RankedResponse> = best.into_values().collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    out.truncate(k);
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Pair;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn scored(t: &str, loglik: f64, p: f64) -> Scored {
        Scored {
            tokens: words(t),
            loglik,
            tcd: TcdScore { p, log_p: p.ln() },
        }
    }

    #[test]
    fn hand_evaluated_scores() {
        assert!((rank_score(-10.0, 0.5, 5.0).unwrap() - -13.465_735_9).abs() < 1e-4);
        assert_eq!(rank_score(-3.0, 1.0, 5.0).unwrap(), -3.0);
        let low = rank_score(-8.0, 0.01, 5.0).unwrap();
        let high = rank_score(-12.0, 0.9, 5.0).unwrap();
        assert!((low - -31.025_850_9).abs() < 1e-4);
        assert!((high - -12.526_802_5).abs() < 1e-4);
        assert!(rank_score(-1.0, 0.0, 5.0).is_err());
        assert!(rank_score(-1.0, 1.5, 5.0).is_err());
    }

    #[test]
    fn rerank_orders_dedupes_and_truncates() {
        let cands = vec![
            scored("a b", -8.0, 0.01),
            scored("c", -12.0, 0.9),
            scored("a b", -7.0, 0.01),
            scored("d", -1.0, 0.5),
        ];
        let r = rerank_topk(&cands, 5.0, 5).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].tokens, words("d"));
        assert_eq!(r[1].tokens, words("c"));
        assert_eq!(r[2].loglik, -7.0);
        assert_eq!(r.iter().map(|x| x.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(rerank_topk(&cands, 5.0, 1).unwrap().len(), 1);
        let single = rerank_topk(&cands[1..2], 5.0, 5).unwrap();
        assert_eq!(single[0].rank, 1);
        assert!(rerank_topk(&[], 5.0, 5).is_err());
    }

    #[test]
    fn negatives_avoid_true_pairs() {
        let pairs = vec![
            Pair::new("p1", "r1"),
            Pair::new("p1", "r2"),
            Pair::new("p2", "r3"),
            Pair::new("p3", "r4"),
            Pair::new("p3", "r1"),
        ];
        let c = Corpus::new("train", pairs.clone()).unwrap();
        let set = make_negatives(&c, 4).unwrap();
        let (pos, neg): (Vec<_>, Vec<_>) = set.iter().partition(|l| l.coherent);
        assert_eq!(pos.len(), neg.len());
        for n in &neg {
            assert!(!pairs.iter().any(|p| p.post == n.post && p.response == n.response));
        }
        assert_eq!(set, make_negatives(&c, 4).unwrap());
        let one = Corpus::new("train", vec![Pair::new("p", "r")]).unwrap();
        assert!(make_negatives(&one, 0).is_err());
    }

    fn toy_tcd() -> (Tcd, ParamSet<f32>) {
        let cfg = AuxConfig {
            embed_dim: 5,
            hidden_dim: 6,
            init_std: 0.3,
            ..AuxConfig::default()
        };
        let (t, ps, _) = Tcd::seeded(&cfg, 12).unwrap();
        (t, ps)
    }

    #[test]
    fn forward_is_a_probability_with_normalized_alignment() {
        let (t, ps) = toy_tcd();
        let s = t.score(&ps, &[4, 5, 6], &[7, 8]).unwrap();
        assert!(s.p > 0.0 && s.p < 1.0);
        assert_eq!(s, t.score(&ps, &[4, 5, 6], &[7, 8]).unwrap());
        let mut g = Graph::new(&ps);
        let f = t.forward(&mut g, &[4, 5, 6], &[7, 8]).unwrap();
        for row in g.value(f.post_attention).chunks(2) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        for row in g.value(f.response_attention).chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!(t.score(&ps, &[4], &[99]).is_err());
        assert!(t.score(&ps, &[], &[4]).is_err());
    }
}
