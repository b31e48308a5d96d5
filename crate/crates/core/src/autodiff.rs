//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations are
//! appended in execution order, so node ids are already a topological order
//! and the backward pass is a single reverse sweep.

use std::borrow::Cow;

use indexmap::IndexMap;

use crate::error::{LabError, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: T },
    Mul { a: Var, b: Var },
    Softmax { a: Var },
    Gelu { a: Var },
    Tanh { a: Var },
    LayerNorm { x: Var, gain: Var, offset: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    SwapAxes12 { a: Var, dims: [usize; 4] },
    GatherRows { a: Var, rows: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Mul { .. } => "mul",
            Op::Softmax { .. } => "softmax",
            Op::Gelu { .. } => "gelu",
            Op::Tanh { .. } => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::SwapAxes12 { .. } => "swap_axes12",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
pub struct Tape<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
    params: Vec<(String, Var)>,
    recording: bool,
    non_finite: Option<&'static str>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    /// Tape with gradient recording enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            recording: true,
            non_finite: None,
        }
    }

    /// Tape for forward-only evaluation; `backward` is rejected.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
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

    /// Name of the first primitive that produced a non-finite value, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Named trainable parameter, borrowed for the lifetime of the tape.
    pub fn param(&mut self, name: &str, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param,
            requires_grad: self.recording,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    /// `a @ b` where `a` is `[..., k]` and `b` is `[k, n]` (or `[n, k]` with
    /// `trans_b`). Leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 {
            return Err(LabError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(LabError::shape(
                "matmul",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let rows = sa[..sa.len() - 1].iter().product::<usize>();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); rows * n];
        if trans_b {
            mm_nt(av, bv, &mut out, rows, k, n);
        } else {
            mm_nn(av, bv, &mut out, rows, k, n);
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out), Op::MatMul { a, b, trans_b }, rg))
    }

    /// Batched product of `[g, m, k]` and `[g, k, n]` (or `[g, n, k]` with
    /// `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(LabError::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != bk {
            return Err(LabError::shape(
                "batch_matmul",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); g * m * n];
        for gi in 0..g {
            let ao = &av[gi * m * k..(gi + 1) * m * k];
            let bo = &bv[gi * k * n..(gi + 1) * k * n];
            let oo = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                mm_nt(ao, bo, oo, m, k, n);
            } else {
                mm_nn(ao, bo, oo, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(LabError::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out), Op::Add { a, b }, rg))
    }

    /// Adds a `[n]` bias to every row of `[..., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(bias) != [n] {
            return Err(LabError::shape(
                "add_bias",
                format!("{:?} + bias {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let bv = self.value(bias).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out), Op::AddBias { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale { a, c }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(LabError::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out), Op::Mul { a, b }, rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(LabError::shape("softmax", "rank-0 input"));
        }
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out), Op::Softmax { a }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gelu { a }, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Tanh { a }, rg))
    }

    /// Layer norm over the last axis (population variance) with learnable
    /// gain and offset of shape `[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(offset) != [n] {
            return Err(LabError::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, offset {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(offset)
                ),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let ov = self.value(offset).data();
        let rows = xv.len() / n;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(LAYER_NORM_EPS);
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + ov[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(offset);
        Ok(self.push(
            Tensor::new(shape, out),
            Op::LayerNorm { x, gain, offset, xhat, inv_std },
            rg,
        ))
    }

    /// Row lookup into a `[vocab, d]` table. Output shape is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(LabError::shape("embedding", format!("table {ts:?}")));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(LabError::invalid(format!(
                "embedding: id {bad} out of range for vocab {vocab}"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1 / (1 - p)`. `p == 0` is the identity.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(LabError::invalid(format!("dropout: p={p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out), Op::Dropout { a, mask }, rg))
    }

    /// Mean cross-entropy of `[n, c]` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(LabError::shape(
                "cross_entropy",
                format!("logits {s:?} vs {} targets", targets.len()),
            ));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(LabError::invalid(format!(
                "cross_entropy: target {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max.as_f64()
                + row
                    .iter()
                    .map(|&v| (v - max).as_f64().exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[t].as_f64();
            softmax_in_place(row);
        }
        let loss = T::from_f64(total / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { a }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(LabError::shape("mean", "empty input"));
        }
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(T::from_f64(s / n as f64)), Op::Mean { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(LabError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).reshaped(shape);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// `[p, q, r, s] -> [p, r, q, s]`; splits and merges attention heads.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(LabError::shape("swap_axes12", format!("{s:?} is not rank 4")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(a).data(), dims);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![s[0], s[2], s[1], s[3]], out),
            Op::SwapAxes12 { a, dims },
            rg,
        ))
    }

    /// Selects rows of a `[r, d]` matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(LabError::shape("gather_rows", format!("{s:?} is not rank 2")));
        }
        let (r, d) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(LabError::shape(
                "gather_rows",
                format!("row {bad} out of range for {s:?}"),
            ));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out),
            Op::GatherRows { a, rows: rows.to_vec() },
            rg,
        ))
    }

    /// Gradients of a scalar node with respect to every parameter registered
    /// on this tape. Parameters off the loss path get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<ParamStore<T>> {
        if !self.recording {
            return Err(LabError::invalid("backward on an inference tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(LabError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[id] = Some(g);
            }
        }

        let mut by_name = IndexMap::new();
        for (name, v) in &self.params {
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.shape(*v)),
            };
            match by_name.get_mut(name) {
                // The same tensor registered twice (weight tying) accumulates.
                Some(existing) => add_into(existing, &g),
                None => {
                    by_name.insert(name.clone(), g);
                }
            }
        }
        Ok(ParamStore::from_map(by_name))
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let k = sa[sa.len() - 1];
                let rows = self.value(*a).len() / k;
                let n = node.value.last_dim();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); rows * k];
                    if *trans_b {
                        mm_nn(gd, bv, &mut ga, rows, n, k);
                    } else {
                        mm_nt(gd, bv, &mut ga, rows, n, k);
                    }
                    accumulate(grads, *a, Tensor::new(sa.to_vec(), ga));
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = if *trans_b {
                        let mut gb = vec![T::zero(); n * k];
                        mm_tn(gd, av, &mut gb, rows, n, k);
                        gb
                    } else {
                        let mut gb = vec![T::zero(); k * n];
                        mm_tn(av, gd, &mut gb, rows, k, n);
                        gb
                    };
                    accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.last_dim();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); groups * m * k];
                    for gi in 0..groups {
                        let go = &gd[gi * m * n..(gi + 1) * m * n];
                        let bo = &bv[gi * k * n..(gi + 1) * k * n];
                        let out = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            mm_nn(go, bo, out, m, n, k);
                        } else {
                            mm_nt(go, bo, out, m, n, k);
                        }
                    }
                    accumulate(grads, *a, Tensor::new(sa.to_vec(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); groups * k * n];
                    for gi in 0..groups {
                        let go = &gd[gi * m * n..(gi + 1) * m * n];
                        let ao = &av[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            mm_tn(go, ao, out, m, n, k);
                        } else {
                            mm_tn(ao, go, out, m, k, n);
                        }
                    }
                    accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb));
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddBias { a, bias } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*bias) {
                    let n = g.last_dim();
                    let mut gb = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::new(vec![n], gb));
                }
            }
            Op::Scale { a, c } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.map(|x| x * *c));
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let ga = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga));
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(g.shape().to_vec(), gb));
                }
            }
            Op::Softmax { a } => {
                if self.rg(*a) {
                    let n = g.last_dim();
                    let y = node.value.data();
                    let mut ga = vec![T::zero(); y.len()];
                    for ((gr, yr), out) in gd.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga));
                }
            }
            Op::Gelu { a } => {
                if self.rg(*a) {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let three_k = T::from_f64(3.0 * GELU_A);
                    let xv = self.value(*a).data();
                    let ga = gd
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &x)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let d = half * (T::one() + t)
                                + half * x * (T::one() - t * t) * c * (T::one() + three_k * x * x);
                            gv * d
                        })
                        .collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga));
                }
            }
            Op::Tanh { a } => {
                if self.rg(*a) {
                    let y = node.value.data();
                    let ga = gd
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga));
                }
            }
            Op::LayerNorm { x, gain, offset, xhat, inv_std } => {
                let n = g.last_dim();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let nf = T::from_f64(n as f64);
                    let mut gx = vec![T::zero(); gd.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &gd[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            gx[r * n + j] = *is / nf * (nf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx));
                }
                if self.rg(*gain) || self.rg(*offset) {
                    let mut gg = vec![T::zero(); n];
                    let mut go = vec![T::zero(); n];
                    for (gr, hr) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                            go[j] += gr[j];
                        }
                    }
                    if self.rg(*gain) {
                        accumulate(grads, *gain, Tensor::new(vec![n], gg));
                    }
                    if self.rg(*offset) {
                        accumulate(grads, *offset, Tensor::new(vec![n], go));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let ts = self.shape(*table);
                    let d = ts[1];
                    let mut gt = vec![T::zero(); ts[0] * d];
                    for (row, &i) in gd.chunks(d).zip(ids) {
                        for (acc, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *table, Tensor::new(ts.to_vec(), gt));
                }
            }
            Op::Dropout { a, mask } => {
                if self.rg(*a) {
                    let ga = gd.iter().zip(mask).map(|(&x, &m)| x * m).collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.rg(*logits) {
                    let c = self.value(*logits).last_dim();
                    let scale = gd[0] / T::from_f64(targets.len() as f64);
                    let mut gl = probs.clone();
                    for (row, &t) in gl.chunks_mut(c).zip(targets) {
                        row[t] = row[t] - T::one();
                        for v in row.iter_mut() {
                            *v = *v * scale;
                        }
                    }
                    accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), gl));
                }
            }
            Op::Sum { a } => {
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::full(self.shape(*a), gd[0]));
                }
            }
            Op::Mean { a } => {
                if self.rg(*a) {
                    let n = T::from_f64(self.value(*a).len() as f64);
                    accumulate(grads, *a, Tensor::full(self.shape(*a), gd[0] / n));
                }
            }
            Op::Reshape { a } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.reshaped(self.shape(*a)));
                }
            }
            Op::SwapAxes12 { a, dims } => {
                if self.rg(*a) {
                    let back = swap12(gd, [dims[0], dims[2], dims[1], dims[3]]);
                    accumulate(grads, *a, Tensor::new(dims.to_vec(), back));
                }
            }
            Op::GatherRows { a, rows } => {
                if self.rg(*a) {
                    let s = self.shape(*a);
                    let d = s[1];
                    let mut ga = vec![T::zero(); s[0] * d];
                    for (row, &i) in gd.chunks(d).zip(rows) {
                        for (acc, &v) in ga[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *a, Tensor::new(s.to_vec(), ga));
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn swap12<T: Real>(src: &[T], [p, q, r, s]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..p {
        for j in 0..q {
            for k in 0..r {
                let from = ((i * q + j) * r + k) * s;
                let to = ((i * r + k) * q + j) * s;
                out[to..to + s].copy_from_slice(&src[from..from + s]);
            }
        }
    }
    out
}

/// `out[m, n] += a[m, k] @ b[k, n]`
fn mm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] @ b[n, k]^T`
fn mm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m, n] += a[r, m]^T @ b[r, n]`
fn mm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], r: usize, m: usize, n: usize) {
    for row in 0..r {
        let arow = &a[row * m..(row + 1) * m];
        let brow = &b[row * n..(row + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
