//! Shared optimization plumbing: deterministic parallel gradient accumulation,
//! seeded batch order and the mutable training session.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::tensor::{Adam, AdamConfig, Graph, Grads, ParamSet, Real, TensorError, Var};

/// Examples per graph. Fixed so that the summation order, and therefore every
/// bit of the result, does not depend on the number of worker threads.
pub const CHUNK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (batch of {batch} examples): {detail}")]
    Diverged { step: u64, batch: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Contract(String),
}

/// Sum of per-item losses and their gradients. `loss` builds the item's
/// scalar loss in the given graph and may return auxiliary statistics.
pub fn accumulate_grads<T, I, A, F>(
    params: &ParamSet<T>,
    items: &[I],
    loss: F,
) -> Result<(Grads<T>, f64, Vec<A>), TensorError>
where
    T: Real,
    I: Sync,
    A: Send,
    F: for<'g> Fn(&mut Graph<'g, T>, &I) -> Result<(Var, A), TensorError> + Sync,
{
    let parts: Vec<Result<(Grads<T>, f64, Vec<A>), TensorError>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Graph::new(params);
            let mut aux = Vec::with_capacity(chunk.len());
            let mut total: Option<Var> = None;
            for item in chunk {
                let (l, a) = loss(&mut g, item)?;
                aux.push(a);
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let total = total.expect("chunks are non-empty");
            let value = g.scalar_value(total).as_f64();
            if !value.is_finite() {
                return Err(TensorError::contract("loss", format!("non-finite loss {value}")));
            }
            g.backward(total)?;
            Ok((g.into_param_grads(), value, aux))
        })
        .collect();

    let mut grads = Grads::empty(params.len());
    let mut total = 0.0;
    let mut aux = Vec::with_capacity(items.len());
    for p in parts {
        let (g, v, a) = p?;
        grads.add_assign(&g);
        total += v;
        aux.extend(a);
    }
    Ok((grads, total, aux))
}

/// Parameters, optimizer and randomness of one training run.
#[derive(Debug, Clone)]
pub struct Session {
    pub params: ParamSet<f32>,
    pub adam: Adam<f32>,
    /// Optimizer updates taken on the main objective.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Session {
    pub fn new(params: ParamSet<f32>, adam: AdamConfig, rng: ChaCha8Rng) -> Self {
        let adam = Adam::new(adam, &params);
        Session {
            params,
            adam,
            step: 0,
            rng,
        }
    }

    /// Averages `grads` over `n` examples and applies one Adam update.
    pub fn apply(&mut self, mut grads: Grads<f32>, n: usize) -> Result<(), TrainError> {
        grads.scale(1.0 / n.max(1) as f32);
        self.adam.step(&mut self.params, &grads)?;
        Ok(())
    }

    /// A fresh permutation of `0..n` cut into batches of at most `batch`.
    pub fn epoch_batches(&mut self, n: usize, batch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn accumulation_matches_single_graph() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.insert("w", Tensor::row(vec![0.3, -0.2]));
        let xs: Vec<f64> = (0..21).map(|i| i as f64 * 0.1).collect();
        let (grads, total, aux) = accumulate_grads(&ps, &xs, |g, &x| {
            let p = g.param(w);
            let t = g.tanh(p);
            let s = g.sum(t);
            Ok((g.scale(s, x), x))
        })
        .unwrap();
        assert_eq!(aux, xs);
        let sx: f64 = xs.iter().sum();
        let expect_total = sx * (0.3f64.tanh() + (-0.2f64).tanh());
        assert!((total - expect_total).abs() < 1e-12);
        let gw = grads.get(w).unwrap();
        assert!((gw[0] - sx * (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-12);
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let mut ps = ParamSet::<f32>::new();
        let w = ps.insert("w", Tensor::row(vec![0.7, 0.1, -0.4]));
        let xs: Vec<f32> = (0..37).map(|i| (i as f32).sin()).collect();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                accumulate_grads(&ps, &xs, |g, &x| {
                    let p = g.param(w);
                    let e = g.exp(p);
                    let s = g.sum(e);
                    Ok((g.scale(s, x), ()))
                })
                .unwrap()
            })
        };
        let (a, ta, _) = run(1);
        let (b, tb, _) = run(4);
        assert_eq!(ta.to_bits(), tb.to_bits());
        let bits = |g: &Grads<f32>| g.get(w).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
