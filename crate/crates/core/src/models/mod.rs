//! Response generators: Seq2Seq with dot-product attention, CVAE,
//! CVAE-simple and CTVAE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ModelConfig, ModelKind};
use crate::data::{Checkpoint, CheckpointError, Corpus, Vocab, BOS, EOS};
use crate::layers::{mean_pool, Activation, Decoder, LstmState, Mlp, SeqEncoder};
use crate::tensor::{Graph, ParamSet, Real, Tensor, TensorError, Var};
use crate::variational::{kl_pair, kl_standard, reparameterize, split_gaussian, GaussianVars};

mod train;

pub use train::{evaluate, BatchStats, EpochStats, ExampleStats, Objective};

/// A post/response pair as model inputs: the post, the raw response, the
/// teacher-forcing input `[BOS, y…]` and the target `[y…, EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub post: Vec<usize>,
    pub response: Vec<usize>,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn new(post: Vec<usize>, response: Vec<usize>) -> Example {
        let input = std::iter::once(BOS).chain(response.iter().copied()).collect();
        let target = response.iter().copied().chain(std::iter::once(EOS)).collect();
        Example {
            post,
            response,
            input,
            target,
        }
    }

    /// Token count scored by the reconstruction loss.
    pub fn tokens(&self) -> usize {
        self.target.len()
    }
}

/// Encodes every pair of `corpus`, truncating both sides to `max_len` tokens.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Vec<Example> {
    corpus
        .pairs()
        .iter()
        .map(|p| {
            let cut = |s: &[String]| vocab.encode(&s[..s.len().min(max_len)]);
            Example::new(cut(&p.post), cut(&p.response))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum Nets {
    Seq2seq {
        dec: Decoder,
    },
    Cvae {
        out_enc: SeqEncoder,
        recog: Mlp,
        dec: Decoder,
        /// `None` for CVAE-simple, whose prior is fixed to `N(0, I)`.
        prior: Option<Mlp>,
    },
    Ctvae {
        out_enc: SeqEncoder,
        recog: Mlp,
        transform: Mlp,
        dec: Decoder,
    },
}

/// Network structure of one generator. Parameter values live in a separate
/// [`ParamSet`] so the same structure serves 32- and 64-bit graphs.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub cond_enc: SeqEncoder,
    pub nets: Nets,
}

/// Output of the condition encoder.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub states: Vec<Var>,
    pub last: LstmState,
    /// Mean-pooled states, `[1, H]`.
    pub x: Var,
}

/// Per-example loss terms. `kl` is absent for Seq2Seq.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub nll: Var,
    pub kl: Option<Var>,
    pub tokens: usize,
}

/// Everything the step decoder needs for one latent sample (or for the
/// single deterministic Seq2Seq context).
#[derive(Debug, Clone)]
pub struct DecodeContext<T> {
    /// `cond · W_cond + b`, `[1, 4H]`
    pub cond_proj: Tensor<T>,
    pub init_h: Tensor<T>,
    pub init_c: Tensor<T>,
    /// Encoder states `[L, H]` attended over by Seq2Seq.
    pub enc_states: Option<Tensor<T>>,
    pub sample: usize,
}

fn recog_dims(input: usize, hidden: usize, latent: usize) -> ([usize; 3], [Activation; 2]) {
    (
        [input, hidden, 2 * latent],
        [Activation::Softplus, Activation::Linear],
    )
}

impl Generator {
    /// Builds the networks and draws initial parameters from `rng`.
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: &ModelConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<(Generator, ParamSet<T>), String> {
        config.validate()?;
        if vocab_size <= crate::data::NUM_SPECIALS {
            return Err("vocabulary has no words".into());
        }
        let (e, h, l, std) = (config.embed_dim, config.hidden_dim, config.latent_dim, config.init_std);
        let mut ps = ParamSet::new();
        let cond_enc = SeqEncoder::new(&mut ps, "cond_enc", vocab_size, e, h, std, rng);
        let nets = match config.kind {
            ModelKind::Seq2seq => Nets::Seq2seq {
                dec: Decoder::new(&mut ps, "dec", vocab_size, e, h, 0, 2 * h, std, rng),
            },
            ModelKind::Cvae | ModelKind::CvaeSimple => {
                let out_enc = SeqEncoder::new(&mut ps, "out_enc", vocab_size, e, h, std, rng);
                let (dims, acts) = recog_dims(2 * h, h, l);
                let recog = Mlp::new(&mut ps, "recog", &dims, &acts, std, rng);
                let dec = Decoder::new(&mut ps, "dec", vocab_size, e, h, h + l, h, std, rng);
                // Created last so that CVAE and CVAE-simple share every other
                // initial value under the same seed.
                let prior = (config.kind == ModelKind::Cvae).then(|| {
                    let (dims, acts) = recog_dims(h, h, l);
                    Mlp::new(&mut ps, "prior", &dims, &acts, std, rng)
                });
                Nets::Cvae {
                    out_enc,
                    recog,
                    dec,
                    prior,
                }
            }
            ModelKind::Ctvae => {
                let out_enc = SeqEncoder::new(&mut ps, "out_enc", vocab_size, e, h, std, rng);
                let (dims, acts) = recog_dims(h, h, l);
                let recog = Mlp::new(&mut ps, "recog", &dims, &acts, std, rng);
                let transform = Mlp::new(
                    &mut ps,
                    "transform",
                    &[h + l, h, h, l],
                    &[Activation::Tanh, Activation::Tanh, Activation::Linear],
                    std,
                    rng,
                );
                let dec = Decoder::new(&mut ps, "dec", vocab_size, e, h, h + l, h, std, rng);
                Nets::Ctvae {
                    out_enc,
                    recog,
                    transform,
                    dec,
                }
            }
        };
        Ok((
            Generator {
                config: config.clone(),
                vocab_size,
                cond_enc,
                nets,
            },
            ps,
        ))
    }

    /// Fresh model plus the generator that continues the seeded stream used
    /// for initialization (batch order and noise draws come from it).
    pub fn seeded(config: &ModelConfig, vocab_size: usize) -> Result<(Generator, ParamSet<f32>, ChaCha8Rng), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (gen, ps) = Generator::init(config, vocab_size, &mut rng)?;
        Ok((gen, ps, rng))
    }

    /// Rebuilds the structure described by a checkpoint and returns its parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Generator, ParamSet<f32>), CheckpointError> {
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
        ckpt.expect_kind(config.kind.as_str())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (gen, mut ps) = Generator::init::<f32, _>(&config, ckpt.vocab.len(), &mut rng)
            .map_err(CheckpointError::Integrity)?;
        ps.copy_from(&ckpt.params)
            .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
        Ok((gen, ps))
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn latent_dim(&self) -> usize {
        match self.nets {
            Nets::Seq2seq { .. } => 0,
            _ => self.config.latent_dim,
        }
    }

    pub fn decoder(&self) -> &Decoder {
        match &self.nets {
            Nets::Seq2seq { dec } | Nets::Cvae { dec, .. } | Nets::Ctvae { dec, .. } => dec,
        }
    }

    pub fn encode_condition<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        post: &[usize],
    ) -> Result<Encoded, TensorError> {
        if post.is_empty() {
            return Err(TensorError::contract("encode_condition", "empty post"));
        }
        let (states, last) = self.cond_enc.encode(g, post)?;
        let x = mean_pool(g, &states)?;
        Ok(Encoded { states, last, x })
    }

    /// Output logits for decoder hidden states `[rows, H]`. Seq2Seq attends
    /// over `enc` and projects `[h; context]`.
    pub fn output_logits<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        h: Var,
        enc: Option<Var>,
    ) -> Result<Var, TensorError> {
        let dec = self.decoder();
        match (&self.nets, enc) {
            (Nets::Seq2seq { .. }, Some(e)) => {
                let a = attention_weights(g, h, e)?;
                let ctx = g.matmul(a, e)?;
                let hc = g.concat_cols(&[h, ctx])?;
                dec.out.forward(g, hc)
            }
            (Nets::Seq2seq { .. }, None) => Err(TensorError::contract(
                "seq2seq_logits",
                "attention needs encoder states",
            )),
            _ => dec.out.forward(g, h),
        }
    }

    /// Posterior over the latent given the post encoding and the response.
    fn recognition<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        response: &[usize],
    ) -> Result<Option<GaussianVars>, TensorError> {
        let (out_enc, recog, needs_x) = match &self.nets {
            Nets::Seq2seq { .. } => return Ok(None),
            Nets::Cvae { out_enc, recog, .. } => (out_enc, recog, true),
            Nets::Ctvae { out_enc, recog, .. } => (out_enc, recog, false),
        };
        let (ys, _) = out_enc.encode(g, response)?;
        let y = mean_pool(g, &ys)?;
        let input = if needs_x { g.concat_cols(&[x, y])? } else { y };
        let out = recog.forward(g, input)?;
        split_gaussian(g, out).map(Some)
    }

    /// `z` from a latent draw: the reparameterized sample itself for CVAE,
    /// the transformation network's output for CTVAE.
    fn latent_to_z<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, sample: Var) -> Result<Var, TensorError> {
        match &self.nets {
            Nets::Ctvae { transform, .. } => {
                let xt = g.concat_cols(&[x, sample])?;
                transform.forward(g, xt)
            }
            _ => Ok(sample),
        }
    }

    /// Prior over the latent (`None` means `N(0, I)`).
    fn prior<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Option<GaussianVars>, TensorError> {
        match &self.nets {
            Nets::Cvae { prior: Some(p), .. } => {
                let out = p.forward(g, x)?;
                split_gaussian(g, out).map(Some)
            }
            _ => Ok(None),
        }
    }

    /// Per-example reconstruction NLL (token-summed, teacher-forced) and KL.
    /// `eps` is the standard-normal draw for the single latent sample.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        ex: &Example,
        eps: &[T],
    ) -> Result<LossParts, TensorError> {
        if ex.response.is_empty() {
            return Err(TensorError::contract("loss", "empty response"));
        }
        let enc = self.encode_condition(g, &ex.post)?;
        let dec = self.decoder();
        let (cond, init, enc_states, kl) = match self.recognition(g, enc.x, &ex.response)? {
            None => {
                let e = g.concat_rows(&enc.states)?;
                (None, enc.last, Some(e), None)
            }
            Some(q) => {
                let kl = match self.prior(g, enc.x)? {
                    Some(p) => kl_pair(g, q, p)?,
                    None => kl_standard(g, q)?,
                };
                let sample = reparameterize(g, q, eps)?;
                let z = self.latent_to_z(g, enc.x, sample)?;
                let cond = g.concat_cols(&[enc.x, z])?;
                let c0 = g.zeros(1, self.config.hidden_dim);
                (Some(cond), LstmState { h: enc.x, c: c0 }, None, Some(kl))
            }
        };
        let cond_proj = dec.cond_projection(g, cond)?;
        let hs = dec.run(g, &ex.input, cond_proj, init)?;
        let h = g.concat_rows(&hs)?;
        let logits = self.output_logits(g, h, enc_states)?;
        let nll = g.softmax_cross_entropy(logits, &ex.target, None)?;
        Ok(LossParts {
            nll,
            kl,
            tokens: ex.tokens(),
        })
    }

    /// Draws one standard-normal vector of latent width (empty for Seq2Seq).
    pub fn draw_eps<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        (0..self.latent_dim())
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    /// Decoding contexts for `post`: one per latent sample for the
    /// variational models (`z` from the prior side of each model), a single
    /// deterministic one for Seq2Seq.
    pub fn decode_contexts<T: Real, R: Rng + ?Sized>(
        &self,
        params: &ParamSet<T>,
        post: &[usize],
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Vec<DecodeContext<T>>, TensorError> {
        let mut g = Graph::new(params);
        let enc = self.encode_condition(&mut g, post)?;
        let dec = self.decoder();
        if let Nets::Seq2seq { .. } = self.nets {
            let cond_proj = dec.cond_projection(&mut g, None)?;
            let e = g.concat_rows(&enc.states)?;
            return Ok(vec![DecodeContext {
                cond_proj: g.tensor(cond_proj),
                init_h: g.tensor(enc.last.h),
                init_c: g.tensor(enc.last.c),
                enc_states: Some(g.tensor(e)),
                sample: 0,
            }]);
        }
        let prior = self.prior(&mut g, enc.x)?;
        let init_h = g.tensor(enc.x);
        let init_c = Tensor::zeros(vec![1, self.config.hidden_dim]);
        let mut out = Vec::with_capacity(n_samples);
        for sample in 0..n_samples {
            let eps: Vec<T> = self.draw_eps(rng);
            let draw = match prior {
                Some(p) => reparameterize(&mut g, p, &eps)?,
                None => g.row(eps),
            };
            let z = self.latent_to_z(&mut g, enc.x, draw)?;
            let cond = g.concat_cols(&[enc.x, z])?;
            let cond_proj = dec.cond_projection(&mut g, Some(cond))?;
            out.push(DecodeContext {
                cond_proj: g.tensor(cond_proj),
                init_h: init_h.clone(),
                init_c: init_c.clone(),
                enc_states: None,
                sample,
            });
        }
        Ok(out)
    }

    /// Checkpoint of this model with the given parameters and vocabulary.
    pub fn checkpoint(&self, params: &ParamSet<f32>, vocab: &Vocab) -> Checkpoint {
        Checkpoint {
            kind: self.kind().as_str().to_string(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            vocab: vocab.clone(),
            params: params.clone(),
            optimizer: None,
            rng: None,
        }
    }
}

/// Row-normalized inner-product attention of decoder states `[T, H]` over
/// encoder states `[L, H]`, `[T, L]`.
pub fn attention_weights<T: Real>(g: &mut Graph<'_, T>, h: Var, enc: Var) -> Result<Var, TensorError> {
    let scores = g.matmul_nt(h, enc)?;
    Ok(g.softmax_rows(scores))
}

#[cfg(test)]
mod tests;
