//! Computation graph and backward pass.
//!
//! Every node is a matrix (`[rows, cols]`); scalars are `[1, 1]` and vectors are
//! single rows. Node ids increase monotonically, so the reverse of creation
//! order is a valid topological order for backpropagation.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, logsumexp, sigmoid, softmax_into, softplus};
use super::{ParamId, ParamSet, Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    MeanRows(Var),
    MeanCols(Var),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<T>>,
        probs: Vec<T>,
    },
    Gather(Var, Vec<usize>),
}

enum Value<'p, T> {
    Owned(Vec<T>),
    Borrowed(&'p [T]),
}

struct Node<'p, T> {
    dims: [usize; 2],
    value: Value<'p, T>,
    op: Op<T>,
    /// Whether any ancestor carries a gradient.
    tracked: bool,
}

impl<T> Node<'_, T> {
    fn data(&self) -> &[T] {
        match &self.value {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

/// Accumulated parameter gradients, indexed by [`ParamId`].
///
/// `None` marks a parameter the loss never touched; its gradient is zero.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    entries: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn empty(num_params: usize) -> Self {
        Grads {
            entries: vec![None; num_params],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.entries[id.0].as_deref()
    }

    /// Gradient for `id`, materializing zeros for untouched parameters.
    pub fn dense(&self, id: ParamId, params: &ParamSet<T>) -> Vec<T> {
        self.get(id)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); params.get(id).numel()])
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.entries.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn max_abs(&self) -> T {
        self.entries
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Define-by-run tape over a borrowed parameter set.
pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<'p, T>>,
    param_nodes: Vec<Option<Var>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    param_grads: Grads<T>,
}

fn sum_of(dims: [usize; 2]) -> usize {
    dims[0] * dims[1]
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            leaf_grads: Vec::new(),
            param_grads: Grads::empty(params.len()),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: [usize; 2], value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(value.len(), sum_of(dims));
        self.nodes.push(Node {
            dims,
            value: Value::Owned(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].data()
    }

    pub fn dims(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].dims
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].dims.to_vec()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let d = self.dims(v);
        Tensor {
            shape: d.to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    /// Scalar value of a `[1,1]` node.
    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var, TensorError> {
        let dims = t.matrix_dims()?;
        Ok(self.push(dims, t.data.clone(), Op::Leaf, false))
    }

    /// Input leaf whose gradient is kept after [`Graph::backward`].
    pub fn input(&mut self, t: &Tensor<T>) -> Result<Var, TensorError> {
        let dims = t.matrix_dims()?;
        Ok(self.push(dims, t.data.clone(), Op::Leaf, true))
    }

    pub fn row(&mut self, data: Vec<T>) -> Var {
        let n = data.len();
        self.push([1, n], data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.push([1, 1], vec![x], Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push([rows, cols], vec![T::zero(); rows * cols], Op::Leaf, false)
    }

    /// Node for a learned parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let dims = t
            .matrix_dims()
            .expect("parameters are at most rank 2 by construction");
        self.nodes.push(Node {
            dims,
            value: Value::Borrowed(t.data()),
            op: Op::Param(id),
            tracked: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<[usize; 2], TensorError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(TensorError::Shape {
                op,
                left: da.to_vec(),
                right: db.to_vec(),
            });
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ([m, k], [k2, n]) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push([m, n], out, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ([m, k], [n, k2]) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push([m, n], out, Op::MatMulNt(a, b), tracked))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let dims = self.same_dims(op_name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(dims, out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast add of a `[1, n]` row (a bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let ([m, n], [r, n2]) = (self.dims(a), self.dims(row));
        if r != 1 || n != n2 {
            return Err(TensorError::Shape {
                op: "add_row",
                left: vec![m, n],
                right: vec![r, n2],
            });
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &b)| x + b))
            .collect();
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push([m, n], out, Op::AddRow(a, row), tracked))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).iter().map(|&x| scale * x + shift).collect();
        let dims = self.dims(a);
        let tracked = self.tracked(a);
        self.push(dims, out, Op::Affine(a, scale), tracked)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::contract("concat_cols", "no inputs"))?;
        let m = self.dims(first)[0];
        for &p in parts {
            if self.dims(p)[0] != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let n: usize = parts.iter().map(|&p| self.dims(p)[1]).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.dims(p)[1];
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push([m, n], out, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::contract("concat_rows", "no inputs"))?;
        let n = self.dims(first)[1];
        for &p in parts {
            if self.dims(p)[1] != n {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let m: usize = parts.iter().map(|&p| self.dims(p)[0]).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push([m, n], out, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Concatenation along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        match axis {
            0 => self.concat_rows(parts),
            1 => self.concat_cols(parts),
            _ => Err(TensorError::contract("concat", format!("axis {axis} out of range"))),
        }
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let [m, n] = self.dims(a);
        if start >= end || end > n {
            return Err(TensorError::contract(
                "slice_cols",
                format!("range {start}..{end} invalid for {n} columns"),
            ));
        }
        let w = end - start;
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let tracked = self.tracked(a);
        Ok(self.push([m, w], out, Op::SliceCols(a, start), tracked))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let [m, n] = self.dims(a);
        if start >= end || end > m {
            return Err(TensorError::contract(
                "slice_rows",
                format!("range {start}..{end} invalid for {m} rows"),
            ));
        }
        let out = self.value(a)[start * n..end * n].to_vec();
        let tracked = self.tracked(a);
        Ok(self.push([end - start, n], out, Op::SliceRows(a, start), tracked))
    }

    /// Mean over `axis`: 0 averages rows into `[1, n]`, 1 averages columns into `[m, 1]`.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let [m, n] = self.dims(a);
        let src = self.value(a);
        let tracked = self.tracked(a);
        match axis {
            0 => {
                let mut out = vec![T::zero(); n];
                for row in src.chunks(n) {
                    out.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + x);
                }
                let inv = T::one() / T::lit(m as f64);
                out.iter_mut().for_each(|o| *o = *o * inv);
                Ok(self.push([1, n], out, Op::MeanRows(a), tracked))
            }
            1 => {
                let inv = T::one() / T::lit(n as f64);
                let out = src
                    .chunks(n)
                    .map(|row| row.iter().copied().sum::<T>() * inv)
                    .collect();
                Ok(self.push([m, 1], out, Op::MeanCols(a), tracked))
            }
            _ => Err(TensorError::contract("mean", format!("axis {axis} out of range"))),
        }
    }

    /// Column-wise maximum over rows, `[m, n] -> [1, n]`. Ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let [_, n] = self.dims(a);
        let src = self.value(a);
        let mut out = src[..n].to_vec();
        let mut arg = vec![0usize; n];
        for (i, row) in src.chunks(n).enumerate().skip(1) {
            for j in 0..n {
                if row[j] > out[j] {
                    out[j] = row[j];
                    arg[j] = i;
                }
            }
        }
        let tracked = self.tracked(a);
        self.push([1, n], out, Op::MaxRows(a, arg), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let tracked = self.tracked(a);
        self.push([1, 1], vec![s], Op::Sum(a), tracked)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let dims = self.dims(a);
        let tracked = self.tracked(a);
        self.push(dims, out, op, tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, T::exp, Op::Exp(a))
    }

    /// Natural log; defined for strictly positive inputs.
    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, T::ln, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let [m, n] = self.dims(a);
        let mut out = vec![T::zero(); m * n];
        for (src, dst) in self.value(a).chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(src, dst);
        }
        let tracked = self.tracked(a);
        self.push([m, n], out, Op::SoftmaxRows(a), tracked)
    }

    /// Fused softmax + cross-entropy: `Σᵢ wᵢ · (logsumexp(logitsᵢ) − logitsᵢ[targetᵢ])`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[T]>,
    ) -> Result<Var, TensorError> {
        let [m, n] = self.dims(logits);
        if targets.len() != m {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                left: vec![m, n],
                right: vec![targets.len()],
            });
        }
        if let Some(w) = weights {
            if w.len() != m {
                return Err(TensorError::Shape {
                    op: "softmax_cross_entropy",
                    left: vec![m],
                    right: vec![w.len()],
                });
            }
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(TensorError::contract(
                "softmax_cross_entropy",
                format!("target {bad} out of range for {n} classes"),
            ));
        }
        let mut probs = vec![T::zero(); m * n];
        let mut loss = T::zero();
        for (i, row) in self.value(logits).chunks(n).enumerate() {
            let lse = logsumexp(row);
            for (p, &x) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            let w = weights.map_or(T::one(), |w| w[i]);
            loss = loss + w * (lse - row[targets[i]]);
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            [1, 1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(<[T]>::to_vec),
                probs,
            },
            tracked,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let [v, d] = self.dims(table);
        if ids.is_empty() {
            return Err(TensorError::contract("gather", "empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::contract(
                "gather",
                format!("index {bad} out of range for {v} rows"),
            ));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked(table);
        Ok(self.push([ids.len(), d], out, Op::Gather(table, ids.to_vec()), tracked))
    }

    /// Accumulated gradient of an [`input`](Graph::input) leaf; zeros when the
    /// leaf did not influence any loss passed to `backward`.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let dims = self.dims(v);
        let data = self
            .leaf_grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![T::zero(); sum_of(dims)]);
        Tensor {
            shape: dims.to_vec(),
            data,
        }
    }

    pub fn param_grads(&self) -> &Grads<T> {
        &self.param_grads
    }

    pub fn into_param_grads(self) -> Grads<T> {
        self.param_grads
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
        self.param_grads = Grads::empty(self.params.len());
    }

    /// Backpropagates from a scalar `loss`, adding into the stored leaf and
    /// parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.dims(loss) != [1, 1] {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.dims(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => add_into(&mut self.leaf_grads[idx], &g),
                Op::Param(id) => add_into(&mut self.param_grads.entries[id.0], &g),
                _ => self.propagate(idx, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.tracked(v) {
            return None;
        }
        let n = sum_of(self.dims(v));
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let ([m, k], [_, n]) = (self.dims(*a), self.dims(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let ([m, k], [n, _]) = (self.dims(*a), self.dims(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nn(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy(gv, g, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + gi * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, T::one());
                }
                let n = self.dims(*row)[1];
                if let Some(gr) = self.slot(grads, *row) {
                    for chunk in g.chunks(n) {
                        axpy(gr, chunk, T::one());
                    }
                }
            }
            Op::Affine(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, *s);
                }
            }
            Op::ConcatCols(parts) => {
                let [m, n] = node.dims;
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p)[1];
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..m {
                            axpy(
                                &mut gp[i * c..(i + 1) * c],
                                &g[i * n + offset..i * n + offset + c],
                                T::one(),
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = sum_of(self.dims(p));
                    if let Some(gp) = self.slot(grads, p) {
                        axpy(gp, &g[offset..offset + len], T::one());
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let [m, w] = node.dims;
                let n = self.dims(*a)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        axpy(
                            &mut ga[i * n + start..i * n + start + w],
                            &g[i * w..(i + 1) * w],
                            T::one(),
                        );
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let n = node.dims[1];
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(&mut ga[start * n..start * n + g.len()], g, T::one());
                }
            }
            Op::MeanRows(a) => {
                let [m, n] = self.dims(*a);
                let inv = T::one() / T::lit(m as f64);
                if let Some(ga) = self.slot(grads, *a) {
                    for chunk in ga.chunks_mut(n) {
                        axpy(chunk, g, inv);
                    }
                }
            }
            Op::MeanCols(a) => {
                let [_, n] = self.dims(*a);
                let inv = T::one() / T::lit(n as f64);
                if let Some(ga) = self.slot(grads, *a) {
                    for (chunk, &gi) in ga.chunks_mut(n).zip(g) {
                        chunk.iter_mut().for_each(|d| *d = *d + gi * inv);
                    }
                }
            }
            Op::MaxRows(a, arg) => {
                let n = self.dims(*a)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (j, &i) in arg.iter().enumerate() {
                        ga[i * n + j] = ga[i * n + j] + g[j];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d = *d + gi * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d = *d + gi * y * (T::one() - y);
                    }
                }
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *d = *d + gi * sigmoid(xi);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d = *d + gi * y;
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *d = *d + gi / xi;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.dims[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for ((dst, gy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = gy.iter().zip(y).map(|(&u, &v)| u * v).sum();
                        for ((d, &gi), &yi) in dst.iter_mut().zip(gy).zip(y) {
                            *d = *d + yi * (gi - dot);
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
            } => {
                let n = self.dims(*logits)[1];
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, (dst, p)) in gl.chunks_mut(n).zip(probs.chunks(n)).enumerate() {
                        let w = weights.as_ref().map_or(T::one(), |w| w[i]) * g[0];
                        for (d, &pi) in dst.iter_mut().zip(p) {
                            *d = *d + w * pi;
                        }
                        dst[targets[i]] = dst[targets[i]] - w;
                    }
                }
            }
            Op::Gather(table, ids) => {
                let d = self.dims(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], T::one());
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * s;
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => axpy(acc, g, T::one()),
        None => *slot = Some(g.to_vec()),
    }
}
