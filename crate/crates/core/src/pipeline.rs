//! End-to-end steps shared by the command line and the test suites:
//! training loops, respond-and-rerank, and model evaluation.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AuxConfig, ModelConfig, NetworkKind};
use crate::data::{Corpus, Vocab};
use crate::decoding::{generate_candidates, GenerationConfig};
use crate::metrics::{score_responses, MetricsReport, RnnLm};
use crate::models::{encode_corpus, EpochStats, Example, Generator};
use crate::rerank::{encode_labeled, make_negatives, rerank_topk, RankedResponse, Scored, Tcd, TcdExample};
use crate::tensor::{grad_check, GradCheckReport, Graph, ParamSet, TensorError, Var};
use crate::train::{Session, TrainError};

/// Trains a generator for `config.epochs` epochs (or `max_steps` updates).
/// `on_epoch` sees every epoch's statistics as they are produced.
pub fn train_generator(
    config: &ModelConfig,
    vocab_size: usize,
    data: &[Example],
    mut on_epoch: impl FnMut(usize, &EpochStats),
) -> Result<(Generator, Session), TrainError> {
    let (gen, params, rng) = Generator::seeded(config, vocab_size).map_err(TrainError::Contract)?;
    let mut s = Session::new(params, config.adam(), rng);
    for epoch in 0..config.epochs {
        if config.max_steps.is_some_and(|m| s.step >= m) {
            break;
        }
        let st = gen.train_epoch(&mut s, data)?;
        on_epoch(epoch, &st);
    }
    Ok((gen, s))
}

pub fn train_tcd(
    config: &AuxConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Tcd, Session), TrainError> {
    let labeled = make_negatives(corpus, config.seed)?;
    let data = encode_labeled(&labeled, vocab, config.max_seq_len);
    let (tcd, params, rng) = Tcd::seeded(config, vocab.len()).map_err(TrainError::Contract)?;
    let mut s = Session::new(params, config.adam(), rng);
    for epoch in 0..config.epochs {
        if config.max_steps.is_some_and(|m| s.step >= m) {
            break;
        }
        let loss = tcd.train_epoch(&mut s, &data)?;
        on_epoch(epoch, loss);
    }
    Ok((tcd, s))
}

pub fn train_lm(
    config: &AuxConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(RnnLm, Session), TrainError> {
    let data: Vec<Vec<usize>> = corpus
        .responses()
        .map(|r| vocab.encode(&r[..r.len().min(config.max_seq_len)]))
        .collect();
    let (lm, params, rng) = RnnLm::seeded(config, vocab.len()).map_err(TrainError::Contract)?;
    let mut s = Session::new(params, config.adam(), rng);
    for epoch in 0..config.epochs {
        if config.max_steps.is_some_and(|m| s.step >= m) {
            break;
        }
        let nll = lm.train_epoch(&mut s, &data)?;
        on_epoch(epoch, nll);
    }
    Ok((lm, s))
}

/// A network together with its parameter values.
pub type Loaded<'a, N> = (&'a N, &'a ParamSet<f32>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub lambda: f64,
    pub top_k: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            lambda: crate::rerank::DEFAULT_LAMBDA,
            top_k: crate::rerank::DEFAULT_TOP_K,
        }
    }
}

/// Scores `(tokens, loglik)` candidates for `post` with the discriminator and
/// returns the reranked top-k. Empty candidates are discarded before scoring.
pub fn rerank_post<'c>(
    tcd: Loaded<'_, Tcd>,
    vocab: &Vocab,
    post: &[String],
    cands: impl IntoIterator<Item = (&'c [String], f64)>,
    rr: &RerankConfig,
) -> Result<Vec<RankedResponse>, TensorError> {
    let max_len = tcd.0.config.max_seq_len;
    let cut = |s: &[String]| vocab.encode(&s[..s.len().min(max_len)]);
    let ids = cut(post);
    let cands: Vec<(&[String], f64)> = cands.into_iter().filter(|c| !c.0.is_empty()).collect();
    if cands.is_empty() {
        return Err(TensorError::contract("rerank", "every candidate was empty"));
    }
    let scored = cands
        .par_iter()
        .map(|&(tokens, loglik)| {
            Ok(Scored {
                tokens: tokens.to_vec(),
                loglik,
                tcd: tcd.0.score(tcd.1, &ids, &cut(tokens))?,
            })
        })
        .collect::<Result<Vec<_>, TensorError>>()?;
    rerank_topk(&scored, rr.lambda, rr.top_k)
}

/// Generates candidates for one post and reranks them with [`rerank_post`].
pub fn respond<R: Rng + ?Sized>(
    gen: Loaded<'_, Generator>,
    tcd: Loaded<'_, Tcd>,
    vocab: &Vocab,
    post: &[String],
    gen_cfg: &GenerationConfig,
    rr: &RerankConfig,
    rng: &mut R,
) -> Result<Vec<RankedResponse>, TensorError> {
    let max_len = gen.0.config.max_seq_len;
    let ids = vocab.encode(&post[..post.len().min(max_len)]);
    let (_, cands) = generate_candidates(gen.0, gen.1, &ids, gen_cfg, rng)?;
    let decoded: Vec<(Vec<String>, f64)> = cands.iter().map(|c| (vocab.decode(&c.tokens), c.loglik)).collect();
    rerank_post(tcd, vocab, post, decoded.iter().map(|(t, l)| (t.as_slice(), *l)), rr)
}

/// Top-k responses of one post, or the reason generation failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostOutput {
    pub post: Vec<String>,
    pub responses: Vec<RankedResponse>,
    pub error: Option<String>,
}

/// Random stream for post number `index`, independent of processing order.
pub fn post_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn respond_all(
    gen: Loaded<'_, Generator>,
    tcd: Loaded<'_, Tcd>,
    vocab: &Vocab,
    posts: &[&[String]],
    gen_cfg: &GenerationConfig,
    rr: &RerankConfig,
    seed: u64,
) -> Vec<PostOutput> {
    posts
        .par_iter()
        .enumerate()
        .map(|(i, post)| {
            let mut rng = post_rng(seed, i);
            match respond(gen, tcd, vocab, post, gen_cfg, rr, &mut rng) {
                Ok(responses) => PostOutput {
                    post: post.to_vec(),
                    responses,
                    error: None,
                },
                Err(e) => PostOutput {
                    post: post.to_vec(),
                    responses: Vec::new(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Metrics of one model over its per-post outputs.
pub fn evaluate_outputs(
    model: &str,
    outputs: &[PostOutput],
    lm: Loaded<'_, RnnLm>,
    vocab: &Vocab,
    training: &HashSet<Vec<String>>,
) -> Result<crate::metrics::MetricsRow, TensorError> {
    let failed = outputs.iter().filter(|o| o.error.is_some()).count();
    let responses: Vec<Vec<String>> = outputs
        .iter()
        .flat_map(|o| o.responses.iter().map(|r| r.tokens.clone()))
        .collect();
    score_responses(model, &responses, outputs.len(), failed, lm, vocab, training)
}

/// Responds to every test post with every model and reports the metrics of
/// the pooled top-k lists, one row per model.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_models(
    models: &[(String, Loaded<'_, Generator>)],
    tcd: Loaded<'_, Tcd>,
    lm: Loaded<'_, RnnLm>,
    vocab: &Vocab,
    test: &Corpus,
    train: &Corpus,
    gen_cfg: &GenerationConfig,
    rr: &RerankConfig,
    seed: u64,
) -> Result<(MetricsReport, Vec<(String, Vec<PostOutput>)>), TensorError> {
    let posts = test.posts();
    let training: HashSet<Vec<String>> = train.responses().map(<[String]>::to_vec).collect();
    let mut report = MetricsReport::default();
    let mut all = Vec::new();
    for (name, gen) in models {
        let outputs = respond_all(*gen, tcd, vocab, &posts, gen_cfg, rr, seed);
        report.rows.push(evaluate_outputs(name, &outputs, lm, vocab, &training)?);
        all.push((name.clone(), outputs));
    }
    Ok((report, all))
}

/// Encodes the training split for generator training.
pub fn generator_data(corpus: &Corpus, vocab: &Vocab, config: &ModelConfig) -> Vec<Example> {
    encode_corpus(corpus, vocab, config.max_seq_len)
}

/// Toy-sized network used by [`gradcheck_network`]: vocabulary 12, hidden 8,
/// latent 4, a two-pair batch.
pub const GRADCHECK_VOCAB: usize = 12;

fn gradcheck_pairs() -> [(Vec<usize>, Vec<usize>); 2] {
    [(vec![4, 5, 6], vec![7, 8]), (vec![9, 4], vec![10, 11, 7, 5])]
}

/// Central-difference check of the full training loss of one network at
/// 64-bit precision with step 1e-5.
pub fn gradcheck_network(kind: NetworkKind, seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toy = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        latent_dim: 4,
        init_std: 0.3,
        seed,
        ..ModelConfig::default()
    };
    let contract = |e: String| TensorError::contract("gradcheck", e);
    let pairs = gradcheck_pairs();
    match kind {
        NetworkKind::Generator(k) => {
            let cfg = ModelConfig { kind: k, ..toy };
            let (gen, mut ps) = Generator::init::<f64, _>(&cfg, GRADCHECK_VOCAB, &mut rng).map_err(contract)?;
            let items: Vec<(Example, Vec<f64>)> = pairs
                .into_iter()
                .map(|(x, y)| (Example::new(x, y), gen.draw_eps(&mut rng)))
                .collect();
            grad_check(&mut ps, 1e-5, |g| {
                let mut terms = Vec::new();
                for (ex, eps) in &items {
                    let parts = gen.loss(g, ex, eps)?;
                    terms.push(parts.nll);
                    terms.extend(parts.kl);
                }
                sum_all(g, &terms)
            })
        }
        NetworkKind::Tcd => {
            let aux = AuxConfig::from_model(&toy);
            let (tcd, mut ps) = Tcd::init::<f64, _>(&aux, GRADCHECK_VOCAB, &mut rng).map_err(contract)?;
            let data: Vec<TcdExample> = pairs
                .iter()
                .enumerate()
                .map(|(i, (x, y))| TcdExample {
                    post: x.clone(),
                    response: y.clone(),
                    coherent: i == 0,
                })
                .collect();
            grad_check(&mut ps, 1e-5, |g| {
                let terms = data.iter().map(|ex| tcd.loss(g, ex)).collect::<Result<Vec<_>, _>>()?;
                sum_all(g, &terms)
            })
        }
        NetworkKind::Lm => {
            let aux = AuxConfig::from_model(&toy);
            let (lm, mut ps) = RnnLm::init::<f64, _>(&aux, GRADCHECK_VOCAB, &mut rng).map_err(contract)?;
            grad_check(&mut ps, 1e-5, |g| {
                let terms = pairs
                    .iter()
                    .map(|(_, y)| lm.loss(g, y).map(|(l, _)| l))
                    .collect::<Result<Vec<_>, _>>()?;
                sum_all(g, &terms)
            })
        }
    }
}

fn sum_all<T: crate::tensor::Real>(g: &mut Graph<'_, T>, terms: &[Var]) -> Result<Var, TensorError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
