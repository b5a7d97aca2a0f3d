//! Diversity and fluency metrics, the evaluation language model, and the
//! per-model report.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::AuxConfig;
use crate::data::{Checkpoint, CheckpointError, Vocab, BOS, EOS};
use crate::layers::Decoder;
use crate::tensor::{Graph, ParamSet, Real, TensorError, Var};
use crate::train::{accumulate_grads, Session, TrainError};

/// Distinct n-grams over total n-grams across all responses.
pub fn distinct_n<S: AsRef<str> + Eq + std::hash::Hash>(responses: &[Vec<S>], n: usize) -> Result<f64, TensorError> {
    if n == 0 {
        return Err(TensorError::contract("distinct_n", "n must be ≥ 1"));
    }
    let mut seen: HashSet<&[S]> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for w in r.windows(n) {
            seen.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        return Err(TensorError::contract(
            "distinct_n",
            format!("no response has at least {n} tokens"),
        ));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Distinct responses over all responses.
pub fn unique_ratio<S: Eq + std::hash::Hash>(responses: &[Vec<S>]) -> Result<f64, TensorError> {
    if responses.is_empty() {
        return Err(TensorError::contract("unique_pct", "no responses"));
    }
    let set: HashSet<&Vec<S>> = responses.iter().collect();
    Ok(set.len() as f64 / responses.len() as f64)
}

/// Fraction of responses that occur verbatim (as token sequences) in `training`.
pub fn matching_ratio(responses: &[Vec<String>], training: &HashSet<Vec<String>>) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let hits = responses.iter().filter(|r| training.contains(*r)).count();
    hits as f64 / responses.len() as f64
}

/// `exp(−Σ log p / tokens)`
pub fn perplexity(total_logp: f64, tokens: usize) -> Result<f64, TensorError> {
    if tokens == 0 {
        return Err(TensorError::contract("perplexity", "no tokens"));
    }
    Ok((-total_logp / tokens as f64).exp())
}

/// Word-level LSTM language model used to score fluency.
#[derive(Debug, Clone)]
pub struct RnnLm {
    pub config: AuxConfig,
    pub vocab_size: usize,
    pub dec: Decoder,
}

impl RnnLm {
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: &AuxConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<(RnnLm, ParamSet<T>), String> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let dec = Decoder::new(&mut ps, "lm", vocab_size, e, h, 0, h, config.init_std, rng);
        Ok((
            RnnLm {
                config: config.clone(),
                vocab_size,
                dec,
            },
            ps,
        ))
    }

    pub fn seeded(config: &AuxConfig, vocab_size: usize) -> Result<(RnnLm, ParamSet<f32>, ChaCha8Rng), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (lm, ps) = RnnLm::init(config, vocab_size, &mut rng)?;
        Ok((lm, ps, rng))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(RnnLm, ParamSet<f32>), CheckpointError> {
        ckpt.expect_kind("lm")?;
        let config: AuxConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lm, mut ps) =
            RnnLm::init::<f32, _>(&config, ckpt.vocab.len(), &mut rng).map_err(CheckpointError::Integrity)?;
        ps.copy_from(&ckpt.params)
            .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
        Ok((lm, ps))
    }

    pub fn checkpoint(&self, params: &ParamSet<f32>, vocab: &Vocab) -> Checkpoint {
        Checkpoint {
            kind: "lm".into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            vocab: vocab.clone(),
            params: params.clone(),
            optimizer: None,
            rng: None,
        }
    }

    /// Token-summed NLL of `sentence` followed by EOS, and the token count.
    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, sentence: &[usize]) -> Result<(Var, usize), TensorError> {
        let input: Vec<usize> = std::iter::once(BOS).chain(sentence.iter().copied()).collect();
        let target: Vec<usize> = sentence.iter().copied().chain(std::iter::once(EOS)).collect();
        let cond = self.dec.cond_projection(g, None)?;
        let init = self.dec.cell.zero_state(g, 1);
        let hs = self.dec.run(g, &input, cond, init)?;
        let h = g.concat_rows(&hs)?;
        let logits = self.dec.out.forward(g, h)?;
        Ok((g.softmax_cross_entropy(logits, &target, None)?, target.len()))
    }

    pub fn train_epoch(&self, s: &mut Session, data: &[Vec<usize>]) -> Result<f64, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Contract("empty training set".into()));
        }
        let (mut nll, mut tokens) = (0.0, 0usize);
        for ids in s.epoch_batches(data.len(), self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| s.step >= m) {
                break;
            }
            let batch: Vec<&Vec<usize>> = ids.iter().map(|&i| &data[i]).collect();
            let (grads, loss, counts) = accumulate_grads(&s.params, &batch, |g, sent| self.loss(g, sent))
                .map_err(|e| TrainError::Diverged {
                    step: s.step,
                    batch: batch.len(),
                    detail: e.to_string(),
                })?;
            s.apply(grads, batch.len())?;
            s.step += 1;
            nll += loss;
            tokens += counts.iter().sum::<usize>();
        }
        Ok(nll / tokens.max(1) as f64)
    }

    /// Pooled perplexity over `sentences`, EOS included in the token count.
    pub fn perplexity(&self, params: &ParamSet<f32>, sentences: &[Vec<usize>]) -> Result<f64, TensorError> {
        if sentences.is_empty() {
            return Err(TensorError::contract("lm_perplexity", "no sentences"));
        }
        let per = sentences
            .par_iter()
            .map(|s| {
                let mut g = Graph::new(params);
                let (nll, n) = self.loss(&mut g, s)?;
                Ok((g.scalar_value(nll) as f64, n))
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        let nll: f64 = per.iter().map(|p| p.0).sum();
        let tokens: usize = per.iter().map(|p| p.1).sum();
        perplexity(-nll, tokens)
    }
}

/// One row of the evaluation report. Ratios are percentages; the metrics are
/// NaN (`null` in JSON) when the model produced no responses at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub ppl_on_lm: f64,
    pub matching_pct: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub unique_pct: f64,
    pub responses: usize,
    pub posts: usize,
    pub failed_posts: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn row(&self, model: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "model\tppl_on_lm\tmatching_pct\tdistinct_1\tdistinct_2\tunique_pct\tresponses\tposts\tfailed_posts\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}\t{}",
                r.model,
                r.ppl_on_lm,
                r.matching_pct,
                r.distinct_1,
                r.distinct_2,
                r.unique_pct,
                r.responses,
                r.posts,
                r.failed_posts
            );
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect()
    }
}

/// Metrics of one model's pooled top-k responses.
pub fn score_responses(
    model: &str,
    responses: &[Vec<String>],
    posts: usize,
    failed_posts: usize,
    lm: (&RnnLm, &ParamSet<f32>),
    vocab: &Vocab,
    training: &HashSet<Vec<String>>,
) -> Result<MetricsRow, TensorError> {
    if responses.is_empty() {
        // Every post failed; the row still records the counts.
        return Ok(MetricsRow {
            model: model.to_string(),
            ppl_on_lm: f64::NAN,
            matching_pct: f64::NAN,
            distinct_1: f64::NAN,
            distinct_2: f64::NAN,
            unique_pct: f64::NAN,
            responses: 0,
            posts,
            failed_posts,
        });
    }
    let ids: Vec<Vec<usize>> = responses.iter().map(|r| vocab.encode(r)).collect();
    let ppl = lm.0.perplexity(lm.1, &ids)?;
    // Distinct-2 is undefined when every response is a single token; report 0.
    let d2 = distinct_n(responses, 2).unwrap_or(0.0);
    Ok(MetricsRow {
        model: model.to_string(),
        ppl_on_lm: ppl,
        matching_pct: 100.0 * matching_ratio(responses, training),
        distinct_1: 100.0 * distinct_n(responses, 1)?,
        distinct_2: 100.0 * d2,
        unique_pct: 100.0 * unique_ratio(responses)?,
        responses: responses.len(),
        posts,
        failed_posts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(raw: &[&str]) -> Vec<Vec<String>> {
        raw.iter()
            .map(|s| s.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn distinct_examples() {
        assert_eq!(distinct_n(&toks(&["a b", "a c"]), 1).unwrap(), 0.75);
        assert_eq!(distinct_n(&toks(&["a b", "a c"]), 2).unwrap(), 1.0);
        assert_eq!(distinct_n(&toks(&["x", "x", "x", "x"]), 1).unwrap(), 0.25);
        assert_eq!(distinct_n(&toks(&["p q", "r s"]), 1).unwrap(), 1.0);
        assert!(distinct_n(&toks(&["a", "b"]), 2).is_err());
        assert!(distinct_n(&toks(&["a"]), 0).is_err());
    }

    #[test]
    fn unique_examples() {
        assert!((unique_ratio(&toks(&["a", "a", "b"])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(unique_ratio(&toks(&["a", "a", "a", "a"])).unwrap(), 0.25);
        assert_eq!(unique_ratio(&toks(&["a", "b"])).unwrap(), 1.0);
        assert!(unique_ratio::<String>(&[]).is_err());
    }

    #[test]
    fn matching_examples() {
        let train: HashSet<Vec<String>> = toks(&["a b", "c"]).into_iter().collect();
        assert_eq!(matching_ratio(&toks(&["a b", "c"]), &train), 1.0);
        assert_eq!(matching_ratio(&toks(&["a", "b c"]), &train), 0.0);
        assert_eq!(matching_ratio(&toks(&["a  b", "z"]), &train), 0.5);
    }

    #[test]
    fn perplexity_hand_example() {
        let p = perplexity(0.5f64.ln() + 0.25f64.ln(), 2).unwrap();
        assert!((p - 8f64.sqrt()).abs() < 1e-12);
        assert!((p - 2.828).abs() < 1e-3);
    }

    #[test]
    fn uniform_lm_has_perplexity_v() {
        let cfg = AuxConfig {
            embed_dim: 4,
            hidden_dim: 5,
            ..AuxConfig::default()
        };
        let (lm, mut ps, _) = RnnLm::seeded(&cfg, 17).unwrap();
        for name in ["lm.out.w", "lm.out.b"] {
            let id = ps.id(name).unwrap();
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let p = lm.perplexity(&ps, &[vec![4, 5, 6], vec![9]]).unwrap();
        assert!((p - 17.0).abs() < 1e-4, "{p}");
    }

    #[test]
    fn report_formats() {
        let r = MetricsReport {
            rows: vec![MetricsRow {
                model: "seq2seq".into(),
                ppl_on_lm: 7.613,
                matching_pct: 92.58,
                distinct_1: 1.0,
                distinct_2: 2.0,
                unique_pct: 22.86,
                responses: 5,
                posts: 1,
                failed_posts: 0,
            }],
        };
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 2);
        assert!(tsv.lines().nth(1).unwrap().starts_with("seq2seq\t7.61\t92.58"));
        let back: MetricsRow = serde_json::from_str(r.to_jsonl().trim()).unwrap();
        assert_eq!(back, r.rows[0]);
    }
}
