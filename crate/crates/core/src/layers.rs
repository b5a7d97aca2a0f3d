//! Network building blocks: embeddings, a single-layer LSTM, dense MLPs and
//! mean pooling. Blocks hold only [`ParamId`] handles; values live in the
//! owning model's [`ParamSet`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParamId, ParamSet, Real, Tensor, TensorError, Var};

/// Word embedding table `[vocab, dim]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let table = params.insert(format!("{name}.table"), Tensor::gaussian(vec![vocab, dim], std, rng));
        Embedding { table, vocab, dim }
    }

    /// `[ids.len(), dim]`
    pub fn lookup<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var, TensorError> {
        let t = g.param(self.table);
        g.gather(t, ids)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// One-layer LSTM cell. Gate blocks are laid out `[input, forget, candidate, output]`
/// along the columns of the weight matrices.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let h4 = 4 * hidden_dim;
        let w_x = params.insert(format!("{name}.w_x"), Tensor::gaussian(vec![input_dim, h4], std, rng));
        let w_h = params.insert(format!("{name}.w_h"), Tensor::gaussian(vec![hidden_dim, h4], std, rng));
        let mut b = vec![T::zero(); h4];
        b[hidden_dim..2 * hidden_dim].fill(T::one());
        let bias = params.insert(format!("{name}.b"), Tensor::row(b));
        LstmCell {
            w_x,
            w_h,
            bias,
            input_dim,
            hidden_dim,
        }
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<'_, T>, rows: usize) -> LstmState {
        LstmState {
            h: g.zeros(rows, self.hidden_dim),
            c: g.zeros(rows, self.hidden_dim),
        }
    }

    /// `x · W_x + b` for a whole input sequence `[L, input_dim]` at once.
    pub fn project_inputs<T: Real>(&self, g: &mut Graph<'_, T>, xs: Var) -> Result<Var, TensorError> {
        let w = g.param(self.w_x);
        let b = g.param(self.bias);
        let xw = g.matmul(xs, w)?;
        g.add_row(xw, b)
    }

    /// Advances the state given pre-projected inputs `[rows, 4H]`.
    pub fn step_projected<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        xw: Var,
        state: LstmState,
    ) -> Result<LstmState, TensorError> {
        let hd = self.hidden_dim;
        let w_h = g.param(self.w_h);
        let hw = g.matmul(state.h, w_h)?;
        let gates = g.add(xw, hw)?;
        let i = g.slice_cols(gates, 0, hd)?;
        let f = g.slice_cols(gates, hd, 2 * hd)?;
        let cand = g.slice_cols(gates, 2 * hd, 3 * hd)?;
        let o = g.slice_cols(gates, 3 * hd, 4 * hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState, TensorError> {
        let xw = self.project_inputs(g, x)?;
        self.step_projected(g, xw, state)
    }

    /// Runs over pre-projected inputs `[L, 4H]`, returning every hidden state
    /// and the final state.
    pub fn run_projected<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        xw: Var,
        init: LstmState,
    ) -> Result<(Vec<Var>, LstmState), TensorError> {
        let len = g.dims(xw)[0];
        let mut state = init;
        let mut hs = Vec::with_capacity(len);
        for t in 0..len {
            let row = g.slice_rows(xw, t, t + 1)?;
            state = self.step_projected(g, row, state)?;
            hs.push(state.h);
        }
        Ok((hs, state))
    }

    /// Encodes `[L, input_dim]` from a zero initial state.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        xs: Var,
    ) -> Result<(Vec<Var>, LstmState), TensorError> {
        let [len, d] = g.dims(xs);
        if len == 0 {
            return Err(TensorError::contract("lstm_encode", "empty input sequence"));
        }
        if d != self.input_dim {
            return Err(TensorError::Shape {
                op: "lstm_encode",
                left: vec![len, d],
                right: vec![self.input_dim, 4 * self.hidden_dim],
            });
        }
        let xw = self.project_inputs(g, xs)?;
        let init = self.zero_state(g, 1);
        self.run_projected(g, xw, init)
    }
}

/// Embedding followed by an LSTM, encoding a token sequence.
#[derive(Debug, Clone)]
pub struct SeqEncoder {
    pub emb: Embedding,
    pub cell: LstmCell,
}

impl SeqEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        vocab: usize,
        embed_dim: usize,
        hidden_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let emb = Embedding::new(params, &format!("{name}.emb"), vocab, embed_dim, std, rng);
        let cell = LstmCell::new(params, &format!("{name}.lstm"), embed_dim, hidden_dim, std, rng);
        SeqEncoder { emb, cell }
    }

    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[usize],
    ) -> Result<(Vec<Var>, LstmState), TensorError> {
        if ids.is_empty() {
            return Err(TensorError::contract("lstm_encode", "empty input sequence"));
        }
        let xs = self.emb.lookup(g, ids)?;
        self.cell.encode(g, xs)
    }
}

/// Elementwise average of a list of equally shaped states.
pub fn mean_pool<T: Real>(g: &mut Graph<'_, T>, states: &[Var]) -> Result<Var, TensorError> {
    if states.is_empty() {
        return Err(TensorError::contract("mean_pool", "no states to pool"));
    }
    if states.len() == 1 {
        return Ok(states[0]);
    }
    let stacked = g.concat_rows(states)?;
    g.mean(stacked, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply<T: Real>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Softplus => g.softplus(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Linear => x,
        }
    }
}

/// Affine layer `x · W + b` followed by an activation.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = params.insert(format!("{name}.w"), Tensor::gaussian(vec![in_dim, out_dim], std, rng));
        let b = params.insert(format!("{name}.b"), Tensor::zeros(vec![1, out_dim]));
        Dense {
            w,
            b,
            act,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, TensorError> {
        let [rows, d] = g.dims(x);
        if d != self.in_dim {
            return Err(TensorError::Shape {
                op: "dense",
                left: vec![rows, d],
                right: vec![self.in_dim, self.out_dim],
            });
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        let y = g.add_row(xw, b)?;
        Ok(self.act.apply(g, y))
    }
}

/// Stack of dense layers with explicit per-layer activations.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` lists every width from input to output; `acts` has one entry per layer.
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        dims: &[usize],
        acts: &[Activation],
        std: f64,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dims.len(), acts.len() + 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(acts)
            .enumerate()
            .map(|(i, (w, &act))| Dense::new(params, &format!("{name}.l{i}"), w[0], w[1], act, std, rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, TensorError> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(g, h))
    }
}

/// LSTM decoder whose input at each step is `[previous word embedding; cond]`,
/// where `cond` is a fixed conditioning vector (possibly empty).
#[derive(Debug, Clone)]
pub struct Decoder {
    pub emb: Embedding,
    pub cell: LstmCell,
    pub out: Dense,
    pub cond_dim: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        vocab: usize,
        embed_dim: usize,
        hidden_dim: usize,
        cond_dim: usize,
        out_in_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let emb = Embedding::new(params, &format!("{name}.emb"), vocab, embed_dim, std, rng);
        let cell = LstmCell::new(
            params,
            &format!("{name}.lstm"),
            embed_dim + cond_dim,
            hidden_dim,
            std,
            rng,
        );
        let out = Dense::new(params, &format!("{name}.out"), out_in_dim, vocab, Activation::Linear, std, rng);
        Decoder {
            emb,
            cell,
            out,
            cond_dim,
        }
    }

    pub fn vocab(&self) -> usize {
        self.emb.vocab
    }

    /// Input-independent part of the gate pre-activations: `cond · W_cond + b`, `[1, 4H]`.
    pub fn cond_projection<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        cond: Option<Var>,
    ) -> Result<Var, TensorError> {
        let b = g.param(self.cell.bias);
        match (cond, self.cond_dim) {
            (None, 0) => Ok(b),
            (Some(c), cd) if cd > 0 => {
                let [r, d] = g.dims(c);
                if r != 1 || d != cd {
                    return Err(TensorError::Shape {
                        op: "decoder_cond",
                        left: vec![r, d],
                        right: vec![1, cd],
                    });
                }
                let w = g.param(self.cell.w_x);
                let e = self.emb.dim;
                let w_c = g.slice_rows(w, e, e + cd)?;
                let cw = g.matmul(c, w_c)?;
                g.add(cw, b)
            }
            _ => Err(TensorError::contract(
                "decoder_cond",
                format!("decoder expects a conditioning vector of width {}", self.cond_dim),
            )),
        }
    }

    /// Gate pre-activations from word ids, `[ids.len(), 4H]`.
    fn project_words<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[usize],
        cond_proj: Var,
    ) -> Result<Var, TensorError> {
        let w = g.param(self.cell.w_x);
        let e = self.emb.dim;
        let w_e = if self.cond_dim == 0 {
            w
        } else {
            g.slice_rows(w, 0, e)?
        };
        let x = self.emb.lookup(g, ids)?;
        let xw = g.matmul(x, w_e)?;
        g.add_row(xw, cond_proj)
    }

    /// Teacher-forced run over `input_ids`, returning every hidden state.
    pub fn run<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        input_ids: &[usize],
        cond_proj: Var,
        init: LstmState,
    ) -> Result<Vec<Var>, TensorError> {
        let xw = self.project_words(g, input_ids, cond_proj)?;
        Ok(self.cell.run_projected(g, xw, init)?.0)
    }

    /// Advances `rows` parallel states by one token each.
    pub fn advance<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        prev_ids: &[usize],
        cond_proj: Var,
        state: LstmState,
    ) -> Result<LstmState, TensorError> {
        let xw = self.project_words(g, prev_ids, cond_proj)?;
        self.cell.step_projected(g, xw, state)
    }

    /// One decoding step: `(logits [rows, V], new state)`.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        prev_ids: &[usize],
        cond_proj: Var,
        state: LstmState,
    ) -> Result<(Var, LstmState), TensorError> {
        let next = self.advance(g, prev_ids, cond_proj, state)?;
        let logits = self.out.forward(g, next.h)?;
        Ok((logits, next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, log_softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn single_step_encoder_output_is_bounded() {
        let mut ps = ParamSet::<f64>::new();
        let enc = SeqEncoder::new(&mut ps, "enc", 7, 5, 6, 0.8, &mut rng());
        let mut g = Graph::new(&ps);
        let (hs, _) = enc.encode(&mut g, &[3]).unwrap();
        assert_eq!(hs.len(), 1);
        for &v in g.value(hs[0]) {
            assert!(v.is_finite() && v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn encoder_is_deterministic_and_sensitive() {
        let mut ps = ParamSet::<f64>::new();
        let enc = SeqEncoder::new(&mut ps, "enc", 9, 4, 5, 0.5, &mut rng());
        let last = |ids: &[usize]| {
            let mut g = Graph::new(&ps);
            let (hs, _) = enc.encode(&mut g, ids).unwrap();
            g.value(*hs.last().unwrap()).to_vec()
        };
        assert_eq!(last(&[1, 2, 3]), last(&[1, 2, 3]));
        let a = last(&[1, 2, 3]);
        let b = last(&[4, 2, 3]);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(diff > 0.0);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut ps = ParamSet::<f64>::new();
        let enc = SeqEncoder::new(&mut ps, "enc", 5, 3, 3, 0.1, &mut rng());
        let mut g = Graph::new(&ps);
        assert!(matches!(
            enc.encode(&mut g, &[]).unwrap_err(),
            TensorError::Contract { op: "lstm_encode", .. }
        ));
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let mut ps = ParamSet::<f32>::new();
        let cell = LstmCell::new(&mut ps, "c", 2, 3, 0.1, &mut rng());
        let b = ps.get(cell.bias).data();
        assert_eq!(&b[0..3], &[0.0; 3]);
        assert_eq!(&b[3..6], &[1.0; 3]);
        assert_eq!(&b[6..12], &[0.0; 6]);
    }

    #[test]
    fn mean_pool_cases() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let h1 = g.row(vec![0.0, 2.0]);
        let h2 = g.row(vec![2.0, 0.0]);
        let m = mean_pool(&mut g, &[h1, h2]).unwrap();
        assert_eq!(g.value(m), &[1.0, 1.0]);
        let single = mean_pool(&mut g, &[h1]).unwrap();
        assert_eq!(g.value(single), &[0.0, 2.0]);
        let s = g.row(vec![0.5, -0.25]);
        let same = mean_pool(&mut g, &[s, s, s]).unwrap();
        assert_eq!(g.value(same), &[0.5, -0.25]);
        assert!(mean_pool(&mut g, &[]).is_err());
    }

    #[test]
    fn identity_dense_layer() {
        let mut ps = ParamSet::<f64>::new();
        let mlp = Mlp::new(&mut ps, "m", &[3, 3], &[Activation::Linear], 0.1, &mut rng());
        let w = ps.get_mut(mlp.layers[0].w).data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new(&ps);
        let x = g.row(vec![0.3, -7.0, 2.5]);
        let y = mlp.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &[0.3, -7.0, 2.5]);
    }

    #[test]
    fn softplus_hidden_layer_is_positive() {
        let mut ps = ParamSet::<f64>::new();
        let mlp = Mlp::new(
            &mut ps,
            "m",
            &[4, 6, 2],
            &[Activation::Softplus, Activation::Linear],
            1.0,
            &mut rng(),
        );
        let mut g = Graph::new(&ps);
        let x = g.row(vec![3.0, -2.0, 0.5, 1.0]);
        let h = mlp.layers[0].forward(&mut g, x).unwrap();
        assert!(g.value(h).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn tanh_mlp_output_bounded_by_final_layer() {
        let mut ps = ParamSet::<f64>::new();
        let mlp = Mlp::new(
            &mut ps,
            "m",
            &[3, 5, 5, 2],
            &[Activation::Tanh, Activation::Tanh, Activation::Linear],
            2.0,
            &mut rng(),
        );
        let last = &mlp.layers[2];
        let w = ps.get(last.w).data().to_vec();
        let b = ps.get(last.b).data().to_vec();
        let bounds: Vec<f64> = (0..2)
            .map(|j| (0..5).map(|i| w[i * 2 + j].abs()).sum::<f64>() + b[j].abs())
            .collect();
        let mut probe = rng();
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| probe.random_range(-50.0..50.0)).collect();
            let mut g = Graph::new(&ps);
            let xv = g.row(x);
            let y = mlp.forward(&mut g, xv).unwrap();
            for (v, bound) in g.value(y).iter().zip(&bounds) {
                assert!(v.abs() <= *bound);
            }
        }
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let mut ps = ParamSet::<f64>::new();
        let d = Dense::new(&mut ps, "d", 3, 2, Activation::Linear, 0.1, &mut rng());
        let mut g = Graph::new(&ps);
        let x = g.row(vec![1.0, 2.0]);
        assert!(matches!(d.forward(&mut g, x).unwrap_err(), TensorError::Shape { .. }));
    }

    fn toy_decoder(ps: &mut ParamSet<f64>, std: f64) -> Decoder {
        Decoder::new(ps, "dec", 6, 3, 4, 2, 4, std, &mut rng())
    }

    #[test]
    fn decode_step_normalizes_and_is_deterministic() {
        let mut ps = ParamSet::<f64>::new();
        let dec = toy_decoder(&mut ps, 0.7);
        let run = || {
            let mut g = Graph::new(&ps);
            let cond = g.row(vec![0.2, -0.4]);
            let cp = dec.cond_projection(&mut g, Some(cond)).unwrap();
            let st = dec.cell.zero_state(&mut g, 1);
            let (logits, next) = dec.step(&mut g, &[2], cp, st).unwrap();
            (g.value(logits).to_vec(), g.value(next.h).to_vec(), g.value(next.c).to_vec())
        };
        let (logits, h, c) = run();
        let total: f64 = log_softmax(&logits).iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(run(), (logits, h, c));
    }

    #[test]
    fn zero_decoder_is_uniform() {
        let mut ps = ParamSet::<f64>::new();
        let dec = toy_decoder(&mut ps, 0.7);
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&ps);
        let cond = g.row(vec![1.0, 1.0]);
        let cp = dec.cond_projection(&mut g, Some(cond)).unwrap();
        let st = dec.cell.zero_state(&mut g, 1);
        let (logits, _) = dec.step(&mut g, &[1], cp, st).unwrap();
        for p in log_softmax(g.value(logits)) {
            assert!((p.exp() - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_step_matches_teacher_forcing_bitwise() {
        let mut ps = ParamSet::<f32>::new();
        let dec = Decoder::new(&mut ps, "dec", 6, 3, 4, 2, 4, 0.5, &mut rng());
        let mut g = Graph::new(&ps);
        let cond = g.row(vec![0.3, -0.1]);
        let cp = dec.cond_projection(&mut g, Some(cond)).unwrap();
        let init = dec.cell.zero_state(&mut g, 1);
        let hs = dec.run(&mut g, &[2, 4, 5], cp, init).unwrap();

        let mut st = dec.cell.zero_state(&mut g, 2);
        for (t, &tok) in [2usize, 4, 5].iter().enumerate() {
            st = dec.advance(&mut g, &[tok, tok], cp, st).unwrap();
            let want = g.value(hs[t]).to_vec();
            assert_eq!(&g.value(st.h)[..4], want.as_slice());
            assert_eq!(&g.value(st.h)[4..], want.as_slice());
        }
    }

    #[test]
    fn layer_gradients_pass_check() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng();
        let enc = SeqEncoder::new(&mut ps, "enc", 8, 3, 4, 0.5, &mut r);
        let mlp = Mlp::new(
            &mut ps,
            "mlp",
            &[4, 5, 3],
            &[Activation::Softplus, Activation::Tanh],
            0.5,
            &mut r,
        );
        let dec = Decoder::new(&mut ps, "dec", 8, 3, 4, 3, 4, 0.5, &mut r);
        let report = grad_check(&mut ps, 1e-5, |g| {
            let (hs, _) = enc.encode(g, &[1, 5, 2])?;
            let x = mean_pool(g, &hs)?;
            let cond = mlp.forward(g, x)?;
            let cp = dec.cond_projection(g, Some(cond))?;
            let init = LstmState { h: x, c: g.zeros(1, 4) };
            let hs = dec.run(g, &[2, 6, 3], cp, init)?;
            let stacked = g.concat_rows(&hs)?;
            let logits = dec.out.forward(g, stacked)?;
            g.softmax_cross_entropy(logits, &[6, 3, 7], None)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
