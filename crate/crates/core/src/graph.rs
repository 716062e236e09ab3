//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied to
//! its nodes in execution order. Because nodes can only refer to nodes created
//! before them, the node list is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse.
//!
//! Shapes follow trailing-dimension broadcasting for `add`, `sub` and `mul`:
//! shapes are right-aligned and each aligned pair of dimensions must be equal
//! or contain a 1.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{check_shape, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    OneMinus(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Concat(Vec<NodeId>),
    Slice { input: NodeId, start: usize },
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Softmax(NodeId),
    MaskedSoftmax(NodeId),
    Dropout { input: NodeId, mask: Vec<T> },
    Embedding { table: NodeId, ids: Vec<usize> },
    StackTime(Vec<NodeId>),
    GatherTime { input: NodeId, index: Vec<usize> },
    BatchedDot { keys: NodeId, query: NodeId },
    WeightedSum { weights: NodeId, values: NodeId },
    SelectRows { mask: Vec<bool>, on: NodeId, off: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation record over a borrowed parameter store.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
    recording: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph that records operations for a later [`Graph::backward`].
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_recording(params, true)
    }

    /// A forward-only graph; `backward` on it fails.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_recording(params, false)
    }

    fn with_recording(params: &'p ParamStore<T>, recording: bool) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            recording,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        match &self.nodes[id.0].value {
            Value::Owned(v) => v,
            Value::Param(p) => self.params.value(*p).data(),
        }
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.shape(id), self.value(id).to_vec()).expect("node shapes are valid")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id)[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = self.recording && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        id
    }

    /// Leaf node for a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.param_nodes[id.index()] {
            return node;
        }
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape: self.params.value(id).shape().to_vec(),
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: self.recording,
        });
        self.param_nodes[id.index()] = Some(node);
        node
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Constant, &[])
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<NodeId> {
        Ok(self.constant(Tensor::zeros(shape)?))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let plan_a = BroadcastMap::new(&out_shape, sa);
        let plan_b = BroadcastMap::new(&out_shape, sb);
        let (va, vb) = (self.value(a), self.value(b));
        let n: usize = out_shape.iter().product();
        let out = (0..n)
            .map(|i| f(va[plan_a.index(i)], vb[plan_b.index(i)]))
            .collect();
        Ok(self.push(out_shape, out, op, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let out = self.value(a).iter().map(|&v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, factor), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|&v| T::one() - v).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::OneMinus(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid(a), &[a])
    }

    /// Concatenate along the last axis. Leading dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        let width = s[s.len() - 1];
        if len == 0 || start + len > width {
            return Err(Error::shape("slice", s, &[start, len]));
        }
        let rows = self.value(a).len() / width;
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * width + start..r * width + start + len]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().expect("non-empty shape") = len;
        Ok(self.push(shape, out, Op::Slice { input: a, start }, &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let total: T = v.iter().copied().sum();
        let mean = total / T::of(v.len() as f64);
        self.push(vec![1], vec![mean], Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        let width = s[s.len() - 1];
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        self.push(s, out, Op::Softmax(a), &[a])
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true; masked positions get exactly zero weight.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("masked_softmax", &s, &[mask.len()]));
        }
        let width = s[s.len() - 1];
        let mut out = self.value(a).to_vec();
        for (r, (row, m)) in out.chunks_mut(width).zip(mask.chunks(width)).enumerate() {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(Error::AllMasked(r))?;
            let mut total = T::zero();
            for (v, &keep) in row.iter_mut().zip(m) {
                *v = if keep { (*v - max).exp() } else { T::zero() };
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(self.push(s, out, Op::MaskedSoftmax(a), &[a]))
    }

    /// Inverted dropout. With `rng == None` (inference) or `rate == 0` this
    /// returns `a` unchanged.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: Option<&mut SeededRng>) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidDropout(rate));
        }
        let Some(rng) = rng else { return Ok(a) };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Dropout { input: a, mask }, &[a]))
    }

    /// Rows of `table` (`[V, E]`) selected by `ids`, giving `[ids.len(), E]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", s, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        let (vocab, dim) = (s[0], s[1]);
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(&v[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stack `m` nodes of shape `[b, d]` into `[b, m, d]`.
    pub fn stack_time(&mut self, steps: &[NodeId]) -> Result<NodeId> {
        let first = *steps.first().ok_or(Error::Empty("stack_time inputs"))?;
        let s = self.shape(first).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("stack_time", &s, &[]));
        }
        for &p in steps {
            if self.shape(p) != s.as_slice() {
                return Err(Error::shape("stack_time", &s, self.shape(p)));
            }
        }
        let (b, d, m) = (s[0], s[1], steps.len());
        let mut out = vec![T::zero(); b * m * d];
        for (t, &p) in steps.iter().enumerate() {
            let v = self.value(p);
            for r in 0..b {
                out[(r * m + t) * d..(r * m + t + 1) * d].copy_from_slice(&v[r * d..(r + 1) * d]);
            }
        }
        Ok(self.push(vec![b, m, d], out, Op::StackTime(steps.to_vec()), steps))
    }

    /// `out[r, p, :] = input[r, index[r * m + p], :]` for an input `[b, m, d]`.
    pub fn gather_time(&mut self, input: NodeId, index: &[usize]) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || index.len() != s[0] * s[1] || index.iter().any(|&i| i >= s[1]) {
            return Err(Error::shape("gather_time", &s, &[index.len()]));
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let v = self.value(input);
        let mut out = vec![T::zero(); b * m * d];
        for r in 0..b {
            for p in 0..m {
                let src = (r * m + index[r * m + p]) * d;
                out[(r * m + p) * d..(r * m + p + 1) * d].copy_from_slice(&v[src..src + d]);
            }
        }
        Ok(self.push(
            s,
            out,
            Op::GatherTime {
                input,
                index: index.to_vec(),
            },
            &[input],
        ))
    }

    /// `out[r, j] = <keys[r, j, :], query[r, :]>` for keys `[b, m, d]`, query `[b, d]`.
    pub fn batched_dot(&mut self, keys: NodeId, query: NodeId) -> Result<NodeId> {
        let (sk, sq) = (self.shape(keys), self.shape(query));
        if sk.len() != 3 || sq.len() != 2 || sk[0] != sq[0] || sk[2] != sq[1] {
            return Err(Error::shape("batched_dot", sk, sq));
        }
        let (b, m, d) = (sk[0], sk[1], sk[2]);
        let (kv, qv) = (self.value(keys), self.value(query));
        let mut out = Vec::with_capacity(b * m);
        for r in 0..b {
            let q = &qv[r * d..(r + 1) * d];
            for j in 0..m {
                out.push(dot(&kv[(r * m + j) * d..(r * m + j + 1) * d], q));
            }
        }
        Ok(self.push(vec![b, m], out, Op::BatchedDot { keys, query }, &[keys, query]))
    }

    /// `out[r, :] = sum_j weights[r, j] * values[r, j, :]`.
    pub fn weighted_sum(&mut self, weights: NodeId, values: NodeId) -> Result<NodeId> {
        let (sw, sv) = (self.shape(weights), self.shape(values));
        if sw.len() != 2 || sv.len() != 3 || sw[0] != sv[0] || sw[1] != sv[1] {
            return Err(Error::shape("weighted_sum", sw, sv));
        }
        let (b, m, d) = (sv[0], sv[1], sv[2]);
        let (wv, vv) = (self.value(weights), self.value(values));
        let mut out = vec![T::zero(); b * d];
        for r in 0..b {
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..m {
                axpy(wv[r * m + j], &vv[(r * m + j) * d..(r * m + j + 1) * d], o);
            }
        }
        Ok(self.push(
            vec![b, d],
            out,
            Op::WeightedSum { weights, values },
            &[weights, values],
        ))
    }

    /// Row-wise choice between two `[b, d]` nodes: row `r` comes from `on`
    /// when `mask[r]`, otherwise from `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: NodeId, off: NodeId) -> Result<NodeId> {
        let (so, sf) = (self.shape(on), self.shape(off));
        if so != sf || so.len() != 2 || so[0] != mask.len() {
            return Err(Error::shape("select_rows", so, sf));
        }
        let d = so[1];
        let (von, voff) = (self.value(on), self.value(off));
        let mut out = Vec::with_capacity(von.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { von } else { voff };
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let shape = so.to_vec();
        Ok(self.push(
            shape,
            out,
            Op::SelectRows {
                mask: mask.to_vec(),
                on,
                off,
            },
            &[on, off],
        ))
    }

    /// Weighted sum of per-row negative log-likelihoods:
    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[T]) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[0] != weights.len() {
            return Err(Error::shape("cross_entropy", s, &[targets.len(), weights.len()]));
        }
        let vocab = s[1];
        if let Some(&id) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let v = self.value(logits);
        let mut total = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == T::zero() {
                continue;
            }
            let row = &v[r * vocab..(r + 1) * vocab];
            total = total + w * (log_sum_exp(row) - row[t]);
        }
        Ok(self.push(
            vec![1],
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the record; parameters the
    /// loss does not depend on get zero gradients.
    pub fn backward(self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NoActiveRecord);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut result = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut result);
        }
        Ok(result)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        result: &mut Gradients<T>,
    ) {
        let out = match &node.value {
            Value::Owned(v) => v.as_slice(),
            Value::Param(_) => &[],
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(p) => {
                for (acc, &gv) in result.get_mut(*p).data_mut().iter_mut().zip(g) {
                    *acc = *acc + gv;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bv = self.value(*b);
                    accumulate(grads, *a, m * k, |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] = ga[i * k + p] + dot(grow, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    accumulate(grads, *b, k * n, |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                axpy(av[i * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                for (input, factor) in [(*a, T::one()), (*b, sign)] {
                    if self.wants(input) {
                        let map = BroadcastMap::new(&node.shape, self.shape(input));
                        let len = self.value(input).len();
                        accumulate(grads, input, len, |gi| {
                            for (i, &gv) in g.iter().enumerate() {
                                let j = map.index(i);
                                gi[j] = gi[j] + factor * gv;
                            }
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                for (input, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(input) {
                        let map_in = BroadcastMap::new(&node.shape, self.shape(input));
                        let map_other = BroadcastMap::new(&node.shape, self.shape(other));
                        let ov = self.value(other);
                        let len = self.value(input).len();
                        accumulate(grads, input, len, |gi| {
                            for (i, &gv) in g.iter().enumerate() {
                                let j = map_in.index(i);
                                gi[j] = gi[j] + gv * ov[map_other.index(i)];
                            }
                        });
                    }
                }
            }
            Op::Scale(a, factor) => {
                accumulate(grads, *a, g.len(), |ga| {
                    for (acc, &gv) in ga.iter_mut().zip(g) {
                        *acc = *acc + gv * *factor;
                    }
                });
            }
            Op::OneMinus(a) => {
                accumulate(grads, *a, g.len(), |ga| {
                    for (acc, &gv) in ga.iter_mut().zip(g) {
                        *acc = *acc - gv;
                    }
                });
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, g.len(), |ga| {
                    for ((acc, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                        *acc = *acc + gv * (T::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, g.len(), |ga| {
                    for ((acc, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                        *acc = *acc + gv * y * (T::one() - y);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.shape[node.shape.len() - 1];
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let w = s[s.len() - 1];
                    if self.wants(p) {
                        accumulate(grads, p, rows * w, |gp| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                for (acc, &gv) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *acc = *acc + gv;
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Slice { input, start } => {
                let s = self.shape(*input);
                let width = s[s.len() - 1];
                let len = node.shape[node.shape.len() - 1];
                let rows = g.len() / len;
                accumulate(grads, *input, rows * width, |gi| {
                    for r in 0..rows {
                        let dst = &mut gi[r * width + start..r * width + start + len];
                        for (acc, &gv) in dst.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                            *acc = *acc + gv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                accumulate(grads, *a, len, |ga| {
                    for acc in ga.iter_mut() {
                        *acc = *acc + g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let share = g[0] / T::of(len as f64);
                accumulate(grads, *a, len, |ga| {
                    for acc in ga.iter_mut() {
                        *acc = *acc + share;
                    }
                });
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.len(), |ga| {
                    for (acc, &gv) in ga.iter_mut().zip(g) {
                        *acc = *acc + gv;
                    }
                });
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let width = node.shape[node.shape.len() - 1];
                accumulate(grads, *a, g.len(), |ga| {
                    for ((acc, grow), yrow) in ga.chunks_mut(width).zip(g.chunks(width)).zip(out.chunks(width)) {
                        let inner = dot(grow, yrow);
                        for ((a, &gv), &y) in acc.iter_mut().zip(grow).zip(yrow) {
                            *a = *a + y * (gv - inner);
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => {
                accumulate(grads, *input, g.len(), |ga| {
                    for ((acc, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *acc = *acc + gv * m;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = node.shape[1];
                let len = self.value(*table).len();
                accumulate(grads, *table, len, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        for (acc, &gv) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *acc = *acc + gv;
                        }
                    }
                });
            }
            Op::StackTime(steps) => {
                let (b, m, d) = (node.shape[0], node.shape[1], node.shape[2]);
                for (t, &p) in steps.iter().enumerate() {
                    if self.wants(p) {
                        accumulate(grads, p, b * d, |gp| {
                            for r in 0..b {
                                let src = &g[(r * m + t) * d..(r * m + t + 1) * d];
                                for (acc, &gv) in gp[r * d..(r + 1) * d].iter_mut().zip(src) {
                                    *acc = *acc + gv;
                                }
                            }
                        });
                    }
                }
            }
            Op::GatherTime { input, index } => {
                let (b, m, d) = (node.shape[0], node.shape[1], node.shape[2]);
                accumulate(grads, *input, b * m * d, |gi| {
                    for r in 0..b {
                        for p in 0..m {
                            let dst = (r * m + index[r * m + p]) * d;
                            let src = &g[(r * m + p) * d..(r * m + p + 1) * d];
                            for (acc, &gv) in gi[dst..dst + d].iter_mut().zip(src) {
                                *acc = *acc + gv;
                            }
                        }
                    }
                });
            }
            Op::BatchedDot { keys, query } => {
                let sk = self.shape(*keys);
                let (b, m, d) = (sk[0], sk[1], sk[2]);
                if self.wants(*keys) {
                    let qv = self.value(*query);
                    accumulate(grads, *keys, b * m * d, |gk| {
                        for r in 0..b {
                            for j in 0..m {
                                axpy(
                                    g[r * m + j],
                                    &qv[r * d..(r + 1) * d],
                                    &mut gk[(r * m + j) * d..(r * m + j + 1) * d],
                                );
                            }
                        }
                    });
                }
                if self.wants(*query) {
                    let kv = self.value(*keys);
                    accumulate(grads, *query, b * d, |gq| {
                        for r in 0..b {
                            for j in 0..m {
                                axpy(
                                    g[r * m + j],
                                    &kv[(r * m + j) * d..(r * m + j + 1) * d],
                                    &mut gq[r * d..(r + 1) * d],
                                );
                            }
                        }
                    });
                }
            }
            Op::WeightedSum { weights, values } => {
                let sv = self.shape(*values);
                let (b, m, d) = (sv[0], sv[1], sv[2]);
                if self.wants(*weights) {
                    let vv = self.value(*values);
                    accumulate(grads, *weights, b * m, |gw| {
                        for r in 0..b {
                            let grow = &g[r * d..(r + 1) * d];
                            for j in 0..m {
                                gw[r * m + j] = gw[r * m + j] + dot(grow, &vv[(r * m + j) * d..(r * m + j + 1) * d]);
                            }
                        }
                    });
                }
                if self.wants(*values) {
                    let wv = self.value(*weights);
                    accumulate(grads, *values, b * m * d, |gv| {
                        for r in 0..b {
                            let grow = &g[r * d..(r + 1) * d];
                            for j in 0..m {
                                axpy(wv[r * m + j], grow, &mut gv[(r * m + j) * d..(r * m + j + 1) * d]);
                            }
                        }
                    });
                }
            }
            Op::SelectRows { mask, on, off } => {
                let d = node.shape[1];
                for (input, pick) in [(*on, true), (*off, false)] {
                    if self.wants(input) {
                        accumulate(grads, input, g.len(), |gi| {
                            for (r, &m) in mask.iter().enumerate() {
                                if m == pick {
                                    for (acc, &gv) in gi[r * d..(r + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                        *acc = *acc + gv;
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights } => {
                let vocab = self.shape(*logits)[1];
                let lv = self.value(*logits);
                accumulate(grads, *logits, lv.len(), |gl| {
                    let mut probs = vec![T::zero(); vocab];
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        probs.copy_from_slice(&lv[r * vocab..(r + 1) * vocab]);
                        softmax_in_place(&mut probs);
                        let scale = g[0] * w;
                        let dst = &mut gl[r * vocab..(r + 1) * vocab];
                        for (acc, &p) in dst.iter_mut().zip(&probs) {
                            *acc = *acc + scale * p;
                        }
                        dst[t] = dst[t] - scale;
                    }
                });
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

/// Result shape of broadcasting `a` against `b`, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat indices of a broadcast output back to flat indices of one input.
enum BroadcastMap {
    Identity,
    /// Input is a trailing suffix of the output shape.
    Cycle(usize),
    General(Vec<usize>),
}

impl BroadcastMap {
    fn new(out: &[usize], input: &[usize]) -> Self {
        let in_len: usize = input.iter().product();
        let out_len: usize = out.iter().product();
        if in_len == out_len {
            return BroadcastMap::Identity;
        }
        let offset = out.len() - input.len();
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if out[out.len() - trimmed.len()..] == trimmed[..] {
            return BroadcastMap::Cycle(in_len);
        }
        let mut strides = vec![0; out.len()];
        let mut stride = 1;
        for i in (0..input.len()).rev() {
            if input[i] != 1 {
                strides[i + offset] = stride;
            }
            stride *= input[i];
        }
        let mut map = Vec::with_capacity(out_len);
        let mut counter = vec![0usize; out.len()];
        for _ in 0..out_len {
            map.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for d in (0..out.len()).rev() {
                counter[d] += 1;
                if counter[d] < out[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        BroadcastMap::General(map)
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Cycle(n) => i % n,
            BroadcastMap::General(map) => map[i],
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// Log-softmax of one row, computed in f64.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let lse = log_sum_exp(row).as_f64();
    row.iter().map(|&v| v.as_f64() - lse).collect()
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}
