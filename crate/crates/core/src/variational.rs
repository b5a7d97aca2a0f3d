//! Diagonal Gaussian latents: closed-form KL divergences, reparameterized
//! sampling and the KL weighting schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParamSet, Real, Tensor, TensorError, Var};

/// Diagonal Gaussian `N(mu, exp(logvar))` as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Diagonal Gaussian as graph nodes, each `[1, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self, TensorError> {
        let g = GaussianParams { mu, logvar };
        g.validate()?;
        Ok(g)
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams {
            mu: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn validate(&self) -> Result<(), TensorError> {
        if self.mu.len() != self.logvar.len() {
            return Err(TensorError::Shape {
                op: "gaussian",
                left: vec![self.mu.len()],
                right: vec![self.logvar.len()],
            });
        }
        if self.mu.iter().chain(&self.logvar).any(|v| !v.is_finite()) {
            return Err(TensorError::contract("gaussian", "non-finite parameter"));
        }
        Ok(())
    }

    fn to_graph<T: Real>(&self, g: &mut Graph<'_, T>) -> GaussianVars {
        GaussianVars {
            mu: g.row(self.mu.iter().map(|&v| T::lit(v)).collect()),
            logvar: g.row(self.logvar.iter().map(|&v| T::lit(v)).collect()),
        }
    }

    /// `KL(self || N(0, I))`
    pub fn kl_vs_standard(&self) -> Result<f64, TensorError> {
        self.validate()?;
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let q = self.to_graph(&mut g);
        let kl = kl_standard(&mut g, q)?;
        Ok(g.scalar_value(kl))
    }

    /// `KL(self || p)`
    pub fn kl_to(&self, p: &GaussianParams) -> Result<f64, TensorError> {
        self.validate()?;
        p.validate()?;
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let q = self.to_graph(&mut g);
        let pv = p.to_graph(&mut g);
        let kl = kl_pair(&mut g, q, pv)?;
        Ok(g.scalar_value(kl))
    }

    /// `mu + exp(logvar / 2) ⊙ eps`
    pub fn sample(&self, eps: &[f64]) -> Result<Vec<f64>, TensorError> {
        self.validate()?;
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let q = self.to_graph(&mut g);
        let z = reparameterize(&mut g, q, eps)?;
        Ok(g.value(z).to_vec())
    }
}

/// Splits a `[1, 2·dim]` network output into `(mu, logvar)`.
pub fn split_gaussian<T: Real>(g: &mut Graph<'_, T>, out: Var) -> Result<GaussianVars, TensorError> {
    let [r, n] = g.dims(out);
    if r != 1 || n % 2 != 0 || n == 0 {
        return Err(TensorError::contract(
            "split_gaussian",
            format!("expected [1, 2k] output, got [{r}, {n}]"),
        ));
    }
    let d = n / 2;
    Ok(GaussianVars {
        mu: g.slice_cols(out, 0, d)?,
        logvar: g.slice_cols(out, d, n)?,
    })
}

fn check_pair<T: Real>(g: &Graph<'_, T>, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
    let (da, db) = (g.dims(a), g.dims(b));
    if da != db || da[0] != 1 {
        return Err(TensorError::Shape {
            op,
            left: da.to_vec(),
            right: db.to_vec(),
        });
    }
    Ok(())
}

/// `0.5 · Σ (exp(logvar) + mu² − 1 − logvar)`
pub fn kl_standard<T: Real>(g: &mut Graph<'_, T>, q: GaussianVars) -> Result<Var, TensorError> {
    check_pair(g, "kl_vs_standard", q.mu, q.logvar)?;
    let var = g.exp(q.logvar);
    let mu2 = g.mul(q.mu, q.mu)?;
    let a = g.add(var, mu2)?;
    let a = g.affine(a, T::one(), -T::one());
    let term = g.sub(a, q.logvar)?;
    let s = g.sum(term);
    Ok(g.scale(s, T::lit(0.5)))
}

/// `0.5 · Σ (exp(lv_q − lv_p) + (mu_q − mu_p)² · exp(−lv_p) − 1 − (lv_q − lv_p))`
///
/// With `p = N(0, I)` every intermediate reduces exactly to the ones in
/// [`kl_standard`], so both routes agree bit for bit; with `q == p` every term
/// is exactly zero.
pub fn kl_pair<T: Real>(
    g: &mut Graph<'_, T>,
    q: GaussianVars,
    p: GaussianVars,
) -> Result<Var, TensorError> {
    check_pair(g, "kl_pair", q.mu, q.logvar)?;
    check_pair(g, "kl_pair", p.mu, p.logvar)?;
    check_pair(g, "kl_pair", q.mu, p.mu)?;
    let lv_diff = g.sub(q.logvar, p.logvar)?;
    let ratio = g.exp(lv_diff);
    let d = g.sub(q.mu, p.mu)?;
    let d2 = g.mul(d, d)?;
    let neg_lv_p = g.scale(p.logvar, -T::one());
    let inv_var_p = g.exp(neg_lv_p);
    let maha = g.mul(d2, inv_var_p)?;
    let a = g.add(ratio, maha)?;
    let a = g.affine(a, T::one(), -T::one());
    let term = g.sub(a, lv_diff)?;
    let s = g.sum(term);
    Ok(g.scale(s, T::lit(0.5)))
}

/// `mu + exp(0.5 · logvar) ⊙ eps`, differentiable in `mu` and `logvar`.
pub fn reparameterize<T: Real>(
    g: &mut Graph<'_, T>,
    q: GaussianVars,
    eps: &[T],
) -> Result<Var, TensorError> {
    check_pair(g, "reparameterize", q.mu, q.logvar)?;
    let d = g.dims(q.mu)[1];
    if eps.len() != d {
        return Err(TensorError::Shape {
            op: "reparameterize",
            left: vec![1, d],
            right: vec![eps.len()],
        });
    }
    let half = g.scale(q.logvar, T::lit(0.5));
    let std = g.exp(half);
    let e = g.constant(&Tensor::row(eps.to_vec()))?;
    let noise = g.mul(std, e)?;
    g.add(q.mu, noise)
}

/// How the KL term enters the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// `NLL + w·KL` on every `kld_period`-th step, `NLL` alone otherwise.
    #[default]
    Joint,
    /// An `NLL` update every step plus a separate `w·KL` update every
    /// `kld_period`-th step.
    Separate,
}

/// KL weight schedule: zero during pretraining, then a linear ramp to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub pretrain_steps: u64,
    pub ramp_steps: u64,
    pub kld_period: u64,
    #[serde(default)]
    pub mode: KlMode,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            pretrain_steps: 1000,
            ramp_steps: 5000,
            kld_period: 3,
            mode: KlMode::Joint,
        }
    }
}

impl AnnealSchedule {
    /// KL at full weight from the first step, every step.
    pub fn constant() -> Self {
        AnnealSchedule {
            pretrain_steps: 0,
            ramp_steps: 1,
            kld_period: 1,
            mode: KlMode::Joint,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.ramp_steps == 0 {
            return Err("ramp_steps must be at least 1".into());
        }
        if self.kld_period == 0 {
            return Err("kld_period must be at least 1".into());
        }
        Ok(())
    }

    pub fn kl_weight(&self, step: u64) -> f64 {
        if step < self.pretrain_steps {
            return 0.0;
        }
        let ramp = self.ramp_steps.max(1);
        ((step - self.pretrain_steps) as f64 / ramp as f64).min(1.0)
    }

    /// Whether the KL term is optimized on `step`.
    pub fn kl_active(&self, step: u64) -> bool {
        step % self.kld_period.max(1) == 0 && self.kl_weight(step) > 0.0
    }
}

/// Free-function form of [`AnnealSchedule::kl_weight`].
pub fn kl_weight(step: u64, schedule: &AnnealSchedule) -> f64 {
    schedule.kl_weight(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Antithetic Monte-Carlo estimate of `E_q[log q(z) − log p(z)]`.
    fn mc_kl(q: &GaussianParams, p: &GaussianParams, draws: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_density = |g: &GaussianParams, z: &[f64]| -> f64 {
            z.iter()
                .zip(&g.mu)
                .zip(&g.logvar)
                .map(|((&zi, &m), &lv)| -0.5 * (lv + (zi - m).powi(2) / lv.exp()))
                .sum()
        };
        let mut total = 0.0;
        let mut z = vec![0.0; q.dim()];
        for _ in 0..draws / 2 {
            let eps: Vec<f64> = (0..q.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            for sign in [1.0, -1.0] {
                for i in 0..q.dim() {
                    z[i] = q.mu[i] + (0.5 * q.logvar[i]).exp() * sign * eps[i];
                }
                total += log_density(q, &z) - log_density(p, &z);
            }
        }
        total / (2 * (draws / 2)) as f64
    }

    #[test]
    fn kl_standard_identity_is_zero() {
        assert_eq!(GaussianParams::standard(4).kl_vs_standard().unwrap(), 0.0);
    }

    #[test]
    fn kl_standard_unit_shift() {
        let q = GaussianParams::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(q.kl_vs_standard().unwrap(), 0.5);
        let mc = mc_kl(&q, &GaussianParams::standard(1), 1_000_000, 3);
        assert!((mc - 0.5).abs() < 1e-2, "mc {mc}");
    }

    #[test]
    fn kl_pair_cases() {
        let q = GaussianParams::new(vec![0.3, -1.2], vec![0.4, -0.7]).unwrap();
        assert_eq!(q.kl_to(&q).unwrap(), 0.0);
        assert_eq!(
            q.kl_to(&GaussianParams::standard(2)).unwrap(),
            q.kl_vs_standard().unwrap()
        );
        let q1 = GaussianParams::new(vec![1.0], vec![0.0]).unwrap();
        let p1 = GaussianParams::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(q1.kl_to(&p1).unwrap(), 0.5);
        let mc = mc_kl(&q1, &p1, 1_000_000, 5);
        assert!((mc - 0.5).abs() < 1e-2, "mc {mc}");
    }

    #[test]
    fn kl_pair_dim_mismatch() {
        let q = GaussianParams::standard(2);
        let p = GaussianParams::standard(3);
        assert!(matches!(q.kl_to(&p).unwrap_err(), TensorError::Shape { .. }));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let q = GaussianParams {
            mu: vec![f64::NAN],
            logvar: vec![0.0],
        };
        assert!(matches!(
            q.kl_vs_standard().unwrap_err(),
            TensorError::Contract { .. }
        ));
    }

    #[test]
    fn reparameterize_cases() {
        let q = GaussianParams::new(vec![0.5, -2.0], vec![1.3, -0.4]).unwrap();
        assert_eq!(q.sample(&[0.0, 0.0]).unwrap(), vec![0.5, -2.0]);
        let e = [0.7, -1.1];
        assert_eq!(GaussianParams::standard(2).sample(&e).unwrap(), e.to_vec());
        assert!(q.sample(&[0.0]).is_err());
    }

    #[test]
    fn reparameterized_mean_matches_mu() {
        let q = GaussianParams::new(vec![0.5, -2.0, 3.0], vec![1.3, -0.4, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (s, z) in sums.iter_mut().zip(q.sample(&eps).unwrap()) {
                *s += z;
            }
        }
        for i in 0..3 {
            let sigma = (0.5 * q.logvar[i]).exp();
            let mean = sums[i] / n as f64;
            assert!((mean - q.mu[i]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn kl_and_sampling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::<f64>::new();
        let mut rand_row = |n: usize| Tensor::row((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mq = ps.insert("mu_q", rand_row(5));
        let lq = ps.insert("lv_q", rand_row(5));
        let mp = ps.insert("mu_p", rand_row(5));
        let lp = ps.insert("lv_p", rand_row(5));
        let eps = [0.3, -1.0, 2.0, 0.1, -0.5];
        let r = grad_check(&mut ps, 1e-5, |g| {
            let q = GaussianVars { mu: g.param(mq), logvar: g.param(lq) };
            let p = GaussianVars { mu: g.param(mp), logvar: g.param(lp) };
            let a = kl_standard(g, q)?;
            let b = kl_pair(g, q, p)?;
            let z = reparameterize(g, q, &eps)?;
            let z2 = g.mul(z, z)?;
            let c = g.sum(z2);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn schedule_shape() {
        let s = AnnealSchedule {
            pretrain_steps: 100,
            ramp_steps: 50,
            kld_period: 3,
            mode: KlMode::Joint,
        };
        assert_eq!(kl_weight(0, &s), 0.0);
        assert_eq!(kl_weight(99, &s), 0.0);
        assert_eq!(kl_weight(125, &s), 0.5);
        assert_eq!(kl_weight(150, &s), 1.0);
        assert_eq!(kl_weight(10_000, &s), 1.0);
        assert!(!s.kl_active(99));
        assert!(s.kl_active(102));
        assert!(!s.kl_active(103));
        assert!(AnnealSchedule { ramp_steps: 0, ..s }.validate().is_err());
        assert!(AnnealSchedule { kld_period: 0, ..s }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn kls_are_nonnegative(
            mu in proptest::collection::vec(-5.0f64..5.0, 1..8),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = mu.len();
            let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let q = GaussianParams::new(mu.clone(), lv).unwrap();
            let p = GaussianParams::new(
                (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
                (0..n).map(|_| rng.random_range(-4.0..4.0)).collect(),
            ).unwrap();
            proptest::prop_assert!(q.kl_vs_standard().unwrap() >= 0.0);
            proptest::prop_assert!(q.kl_to(&p).unwrap() >= 0.0);
            proptest::prop_assert_eq!(q.kl_to(&q).unwrap(), 0.0);
        }
    }
}
