use rayon::prelude::*;

use crate::tensor::{Graph, Grads, ParamSet, Real, TensorError};
use crate::train::{accumulate_grads, Session, TrainError};
use crate::variational::KlMode;

use super::{Example, Generator};

/// What a gradient pass optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Reconstruction only.
    Nll,
    /// `NLL + w · KL`
    Joint(f64),
    /// `w · KL` alone (the extra update of [`KlMode::Separate`]).
    Kl(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub step: u64,
    pub examples: usize,
    pub tokens: usize,
    pub nll_sum: f64,
    pub kl_sum: f64,
    pub kl_weight: f64,
    /// Whether the KL term was optimized on this step.
    pub kl_active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub steps: u64,
    pub examples: usize,
    pub tokens: usize,
    /// Token-summed NLL averaged over examples.
    pub mean_nll: f64,
    pub nll_per_token: f64,
    pub mean_kl: f64,
    /// KL weight in effect at the last step of the epoch.
    pub kl_weight: f64,
}

/// Per-example values recorded during a gradient pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleStats {
    pub nll: f64,
    pub kl: f64,
    pub tokens: usize,
}

fn diverged(step: u64, batch: usize, e: TensorError) -> TrainError {
    match e {
        TensorError::Contract { op: "loss", msg } => TrainError::Diverged {
            step,
            batch,
            detail: msg,
        },
        TensorError::NonFiniteGrad { name } => TrainError::Diverged {
            step,
            batch,
            detail: format!("non-finite gradient for `{name}`"),
        },
        e => TrainError::Tensor(e),
    }
}

impl Generator {
    /// Summed gradient of `objective` over `(example, eps)` items.
    pub fn batch_grads<T: Real>(
        &self,
        params: &ParamSet<T>,
        items: &[(&Example, Vec<T>)],
        objective: Objective,
    ) -> Result<(Grads<T>, f64, Vec<ExampleStats>), TensorError> {
        accumulate_grads(params, items, |g, (ex, eps)| {
            let parts = self.loss(g, ex, eps)?;
            let kl_value = parts.kl.map_or(0.0, |k| g.scalar_value(k).as_f64());
            let stats = ExampleStats {
                nll: g.scalar_value(parts.nll).as_f64(),
                kl: kl_value,
                tokens: parts.tokens,
            };
            let total = match (objective, parts.kl) {
                (Objective::Joint(w), Some(kl)) => {
                    let wk = g.scale(kl, T::lit(w));
                    g.add(parts.nll, wk)?
                }
                (Objective::Kl(w), Some(kl)) => g.scale(kl, T::lit(w)),
                (Objective::Kl(_), None) => {
                    return Err(TensorError::contract("loss", "model has no KL term"));
                }
                _ => parts.nll,
            };
            Ok((total, stats))
        })
    }

    /// One optimizer step on `batch` following the annealing schedule. In
    /// [`KlMode::Separate`] a KL-active step takes a second update on the
    /// weighted KL alone.
    pub fn train_batch(&self, s: &mut Session, batch: &[&Example]) -> Result<BatchStats, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Contract("empty batch".into()));
        }
        let sched = self.config.anneal;
        let step = s.step;
        let variational = self.kind().is_variational();
        let w = if variational { sched.kl_weight(step) } else { 0.0 };
        let kl_active = variational && sched.kl_active(step);
        let items: Vec<(&Example, Vec<f32>)> = batch
            .iter()
            .map(|ex| (*ex, self.draw_eps(&mut s.rng)))
            .collect();

        let main = match (kl_active, sched.mode) {
            (true, KlMode::Joint) => Objective::Joint(w),
            _ => Objective::Nll,
        };
        let n = batch.len();
        let (grads, _, stats) = self
            .batch_grads(&s.params, &items, main)
            .map_err(|e| diverged(step, n, e))?;
        s.apply(grads, n).map_err(|e| match e {
            TrainError::Tensor(t) => diverged(step, n, t),
            e => e,
        })?;
        if kl_active && sched.mode == KlMode::Separate {
            let (grads, _, _) = self
                .batch_grads(&s.params, &items, Objective::Kl(w))
                .map_err(|e| diverged(step, n, e))?;
            s.apply(grads, n)?;
        }
        s.step += 1;

        Ok(BatchStats {
            step,
            examples: n,
            tokens: stats.iter().map(|x| x.tokens).sum(),
            nll_sum: stats.iter().map(|x| x.nll).sum(),
            kl_sum: stats.iter().map(|x| x.kl).sum(),
            kl_weight: w,
            kl_active,
        })
    }

    /// One pass over `data` in a seeded random order. Stops early once
    /// `config.max_steps` updates have been taken.
    pub fn train_epoch(&self, s: &mut Session, data: &[Example]) -> Result<EpochStats, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Contract("empty training set".into()));
        }
        let mut out = EpochStats::default();
        let (mut nll, mut kl) = (0.0, 0.0);
        for ids in s.epoch_batches(data.len(), self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| s.step >= m) {
                break;
            }
            let batch: Vec<&Example> = ids.iter().map(|&i| &data[i]).collect();
            let b = self.train_batch(s, &batch)?;
            out.steps += 1;
            out.examples += b.examples;
            out.tokens += b.tokens;
            out.kl_weight = b.kl_weight;
            nll += b.nll_sum;
            kl += b.kl_sum;
        }
        if out.examples > 0 {
            out.mean_nll = nll / out.examples as f64;
            out.mean_kl = kl / out.examples as f64;
            out.nll_per_token = nll / out.tokens as f64;
        }
        Ok(out)
    }
}

/// Mean per-token NLL and mean KL of `data` without updating anything. The
/// latent noise comes from `rng`.
pub fn evaluate<R: rand::Rng>(
    gen: &Generator,
    params: &ParamSet<f32>,
    data: &[Example],
    rng: &mut R,
) -> Result<(f64, f64), TensorError> {
    let items: Vec<(&Example, Vec<f32>)> = data.iter().map(|ex| (ex, gen.draw_eps(rng))).collect();
    let stats = items
        .par_iter()
        .map(|(ex, eps)| {
            let mut g = Graph::new(params);
            let parts = gen.loss(&mut g, ex, eps)?;
            Ok(ExampleStats {
                nll: g.scalar_value(parts.nll).as_f64(),
                kl: parts.kl.map_or(0.0, |k| g.scalar_value(k).as_f64()),
                tokens: parts.tokens,
            })
        })
        .collect::<Result<Vec<_>, TensorError>>()?;
    let tokens: usize = stats.iter().map(|x| x.tokens).sum();
    let nll: f64 = stats.iter().map(|x| x.nll).sum();
    let kl: f64 = stats.iter().map(|x| x.kl).sum();
    Ok((nll / tokens.max(1) as f64, kl / stats.len().max(1) as f64))
}
