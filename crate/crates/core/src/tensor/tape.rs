//! Reverse-mode differentiation tape.
//!
//! Every op evaluates eagerly, stores its output value on the tape, and records
//! what its backward rule needs. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction; the backward sweep walks it
//! once in reverse.

use std::cell::RefCell;
use std::collections::HashMap;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::param::{ParamId, ParamStore};
use super::{count, strides, Real, Tensor};
use crate::error::{data_err, dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which samples the batch-hard miner picked for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletPick<R: Real> {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_pos: R,
    pub d_neg: R,
    /// `margin + d_pos - d_neg > 0`
    pub active: bool,
}

enum Op<R: Real> {
    Input,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    ReduceMean { x: Var, axes: Vec<usize> },
    Affine { x: Var, w: Var, b: Var, mask: Option<Vec<bool>> },
    Concat { parts: Vec<Var>, axis: usize },
    BroadcastHadamard { g: Var, l: Var },
    Reshape(Var),
    Expand(Var),
    Add(Var, Var),
    Scale(Var, R),
    Sum(Var),
    WeightedSum(Var, Tensor<R>),
    Unfold3x3(Var),
    AvgPool2(Var),
    GatherFrames { x: Var, index: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<R> },
    Triplet { emb: Var, picks: Vec<TripletPick<R>> },
}

impl<R: Real> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::Affine { .. } => "pointwise_affine",
            Op::Concat { .. } => "concat",
            Op::BroadcastHadamard { .. } => "broadcast_hadamard",
            Op::Reshape(_) => "reshape",
            Op::Expand(_) => "expand",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Unfold3x3(_) => "unfold3x3",
            Op::AvgPool2(_) => "avg_pool2",
            Op::GatherFrames { .. } => "gather_frames",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Triplet { .. } => "batch_hard_triplet",
        }
    }
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

thread_local! {
    static CORRUPT_OP: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Test hook: scales every backward contribution of the named op by 1.5 on the
/// current thread, so gradient checks can be shown to catch a broken rule.
pub fn corrupt_gradient_of(op: Option<&str>) {
    CORRUPT_OP.with(|c| *c.borrow_mut() = op.map(str::to_owned));
}

fn corrupted(op: &str) -> bool {
    CORRUPT_OP.with(|c| c.borrow().as_deref() == Some(op))
}

/// Recorded computation. Single-threaded by contract.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn input(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.input(value, false)
    }

    /// Records a parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {}",
                op.name()
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- ops

    /// `a [m,k] · b [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul shape mismatch: {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        count::record("matmul", m * k * n);
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dim_err!("transpose expects rank 2, got {:?}", s));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose2(self.value(x).data(), m, n);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), &[x])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(dim_err!("softmax_rows on a scalar"));
        }
        let n = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows(x), &[x])
    }

    /// Mean over `axes`; reduced axes are removed. An empty axis set returns `x`.
    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        if axes.is_empty() {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(dim_err!(
                "reduce_mean axis {bad} out of range for shape {:?}",
                shape
            ));
        }
        let keep = keepdim_shape(&shape, &axes);
        let map = broadcast_index(&shape, &keep);
        let out_len: usize = keep.iter().product();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let mut acc = vec![R::zero(); out_len];
        for (v, &o) in self.value(x).data().iter().zip(&map) {
            acc[o] += *v;
        }
        let inv = R::one() / R::of(count as f64);
        acc.iter_mut().for_each(|v| *v *= inv);
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        self.push(
            Tensor::from_parts(out_shape, acc),
            Op::ReduceMean { x, axes },
            &[x],
        )
    }

    /// Per-position affine map over the last axis (a 1x1 convolution):
    /// `y = x · w + b`, optionally followed by ReLU.
    ///
    /// The ReLU derivative at exactly zero is taken as 1, so zero-initialized
    /// layers still receive gradient.
    pub fn affine(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 2 || sb.len() != 1 || sb[0] != sw[1] {
            return Err(dim_err!(
                "affine weight/bias shapes {:?} / {:?} are inconsistent",
                sw,
                sb
            ));
        }
        if sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(dim_err!(
                "affine channel mismatch: input {:?}, weight {:?}",
                sx,
                sw
            ));
        }
        let (c_in, c_out) = (sw[0], sw[1]);
        let positions = self.value(x).len() / c_in;
        count::record("pointwise_affine", positions * c_in * c_out);
        let mut out = gemm(
            self.value(x).data(),
            self.value(w).data(),
            positions,
            c_in,
            c_out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(c_out) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let mask = relu.then(|| {
            out.iter_mut()
                .map(|v| {
                    let keep = *v >= R::zero();
                    if !keep {
                        *v = R::zero();
                    }
                    keep
                })
                .collect()
        });
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = c_out;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Affine { x, w, b, mask },
            &[x, w, b],
        )
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        if parts.len() == 1 {
            if axis >= self.shape(first).len() {
                return Err(dim_err!("concat axis {axis} out of range"));
            }
            return Ok(first);
        }
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", s0));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(dim_err!(
                    "concat mismatch along axis {axis}: {:?} vs {:?}",
                    s0,
                    s
                ));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let mut out_shape = s0.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.len() / outer;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let axis = self
            .shape(first)
            .len()
            .checked_sub(1)
            .ok_or_else(|| dim_err!("concat_channels on a scalar"))?;
        self.concat(parts, axis)
    }

    /// Channelwise product of a global feature against every spatial position:
    /// `g [1,1,C] ⊙ l [H,W,C]`, or batched `g [B,1,1,C] ⊙ l [B,H,W,C]`.
    pub fn broadcast_hadamard(&mut self, g: Var, l: Var) -> Result<Var> {
        let (sg, sl) = (self.shape(g).to_vec(), self.shape(l).to_vec());
        let (batch, spatial, c) = hadamard_dims(&sg, &sl)?;
        count::record("broadcast_hadamard", batch * spatial * c);
        let (gv, lv) = (self.value(g).data(), self.value(l).data());
        let mut out = Vec::with_capacity(lv.len());
        for b in 0..batch {
            let grow = &gv[b * c..(b + 1) * c];
            for s in 0..spatial {
                let base = (b * spatial + s) * c;
                out.extend(lv[base..base + c].iter().zip(grow).map(|(&x, &y)| x * y));
            }
        }
        self.push(
            Tensor::from_parts(sl, out),
            Op::BroadcastHadamard { g, l },
            &[g, l],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() || shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("cannot reshape {:?} to {:?}", v.shape(), shape));
        }
        if v.shape() == shape {
            return Ok(x);
        }
        let value = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Broadcasts size-1 axes of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let ok = sx.len() == shape.len() && sx.iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(dim_err!("cannot expand {:?} to {:?}", sx, shape));
        }
        if sx == shape {
            return Ok(x);
        }
        let map = broadcast_index(shape, &sx);
        let src = self.value(x).data();
        let out: Vec<R> = map.iter().map(|&i| src[i]).collect();
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Expand(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = R::of(s);
        let v = self.value(x);
        let out = v.data().iter().map(|&a| a * s).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, s), &[x])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ x ⊙ weights` as a scalar; `weights` is a constant.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<R>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(dim_err!(
                "weighted_sum shape mismatch: {:?} vs {:?}",
                self.shape(x),
                weights.shape()
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), &[x])
    }

    /// Zero-padded 3x3 neighbourhood unfold: `[N,H,W,C] -> [N,H,W,9C]`,
    /// channel layout `(dy, dx, c)`. A 3x3 convolution is this followed by
    /// [`Tape::affine`].
    pub fn unfold3x3(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("unfold3x3 expects [N,H,W,C], got {:?}", s));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![R::zero(); n * h * w * 9 * c];
        for f in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let dst = ((f * h + y) * w + xx) * 9 * c;
                    for dy in 0..3 {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let sx = xx as isize + dx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let from = ((f * h + sy as usize) * w + sx as usize) * c;
                            let to = dst + (dy * 3 + dx) * c;
                            out[to..to + c].copy_from_slice(&src[from..from + c]);
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, h, w, 9 * c], out),
            Op::Unfold3x3(x),
            &[x],
        )
    }

    /// 2x2 mean pooling with stride 2 over `[N,H,W,C]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(dim_err!(
                "avg_pool2 expects [N,H,W,C] with even H and W, got {:?}",
                s
            ));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = R::of(0.25);
        let mut out = vec![R::zero(); n * ho * wo * c];
        for f in 0..n {
            for y in 0..ho {
                for xx in 0..wo {
                    let dst = ((f * ho + y) * wo + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let from = ((f * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] += src[from + ch];
                        }
                    }
                    out[dst..dst + c].iter_mut().for_each(|v| *v *= quarter);
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, ho, wo, c], out),
            Op::AvgPool2(x),
            &[x],
        )
    }

    /// Selects entries along the leading axis: `out[i] = x[index[i]]`.
    pub fn gather_frames(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index.is_empty() {
            return Err(dim_err!("gather_frames needs a non-scalar input and indices"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(dim_err!("gather index {bad} out of range for {:?}", s));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(inner * index.len());
        for &i in index {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = index.len();
        self.push(
            Tensor::from_parts(shape, out),
            Op::GatherFrames {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Mean cross-entropy of `logits [N,K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err!(
                "cross_entropy expects [N,K] logits for {} labels, got {:?}",
                labels.len(),
                s
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(data_err!("label {bad} out of range for {k} classes"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0f64;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
            let lse = row
                .iter()
                .map(|&v| (v - max).as_f64().exp())
                .sum::<f64>()
                .ln()
                + max.as_f64();
            loss += lse - row[label].as_f64();
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        self.push(
            Tensor::scalar(R::of(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Tensor::from_parts(s, probs),
            },
            &[logits],
        )
    }

    /// Batch-hard triplet loss over `embeddings [N,C]` with Euclidean distance.
    pub fn batch_hard_triplet(&mut self, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let picks = batch_hard_selection(self.value(emb), labels, margin)?;
        let loss = picks
            .iter()
            .map(|p| (margin + p.d_pos.as_f64() - p.d_neg.as_f64()).max(0.0))
            .sum::<f64>()
            / picks.len() as f64;
        self.push(
            Tensor::scalar(R::of(loss)),
            Op::Triplet { emb, picks },
            &[emb],
        )
    }

    // ---------------------------------------------------------- backward

    /// Propagates `seed` (ones for a scalar output when `None`) back from
    /// `output` without touching the tape or any parameter store.
    pub fn gradients(&self, output: Var, seed: Option<Tensor<R>>) -> Result<Gradients<R>> {
        let out_val = self.value(output);
        let seed = match seed {
            Some(s) if s.shape() == out_val.shape() => s,
            Some(s) => {
                return Err(dim_err!(
                    "seed shape {:?} does not match output {:?}",
                    s.shape(),
                    out_val.shape()
                ))
            }
            None if out_val.len() == 1 => Tensor::full(out_val.shape().to_vec(), R::one()),
            None => {
                return Err(Error::Contract(format!(
                    "backward needs a scalar output, got shape {:?}",
                    out_val.shape()
                )))
            }
        };
        let mut grads: Vec<Option<Tensor<R>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                let node = &self.nodes[i];
                let corrupt = corrupted(node.op.name());
                for (v, mut t) in self.local_grads(node, &g) {
                    if !self.nodes[v.0].needs_grad {
                        continue;
                    }
                    if corrupt {
                        t.data_mut().iter_mut().for_each(|x| *x *= R::of(1.5));
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(t),
                    }
                }
            }
            if matches!(self.nodes[i].op, Op::Input | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    /// Accumulates `∂loss/∂param` into every parameter on the tape, then
    /// clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<R>) -> Result<()> {
        let grads = self.gradients(loss, None)?;
        grads.accumulate_into(store);
        self.clear();
        Ok(())
    }

    fn local_grads(&self, node: &Node<R>, g: &Tensor<R>) -> Vec<(Var, Tensor<R>)> {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let da = gemm_nt(gd, bv.data(), m, n, k);
                let db = gemm_tn(av.data(), gd, m, k, n);
                vec![
                    (*a, Tensor::from_parts(vec![m, k], da)),
                    (*b, Tensor::from_parts(vec![k, n], db)),
                ]
            }
            Op::Transpose(x) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                vec![(*x, Tensor::from_parts(vec![n, m], transpose2(gd, m, n)))]
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = *g.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gd.chunks(n)) {
                    let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                vec![(*x, Tensor::from_parts(node.value.shape().to_vec(), dx))]
            }
            Op::ReduceMean { x, axes } => {
                let shape = self.shape(*x);
                let keep = keepdim_shape(shape, axes);
                let map = broadcast_index(shape, &keep);
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                let inv = R::one() / R::of(count as f64);
                let dx = map.iter().map(|&o| gd[o] * inv).collect();
                vec![(*x, Tensor::from_parts(shape.to_vec(), dx))]
            }
            Op::Affine { x, w, b, mask } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (c_in, c_out) = (wv.shape()[0], wv.shape()[1]);
                let positions = xv.len() / c_in;
                let gz: Vec<R> = match mask {
                    Some(m) => gd
                        .iter()
                        .zip(m)
                        .map(|(&v, &k)| if k { v } else { R::zero() })
                        .collect(),
                    None => gd.to_vec(),
                };
                let dx = gemm_nt(&gz, wv.data(), positions, c_out, c_in);
                let dw = gemm_tn(xv.data(), &gz, positions, c_in, c_out);
                let mut db = vec![R::zero(); c_out];
                for row in gz.chunks(c_out) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().to_vec(), dx)),
                    (*w, Tensor::from_parts(vec![c_in, c_out], dw)),
                    (*b, Tensor::from_parts(vec![c_out], db)),
                ]
            }
            Op::Concat { parts, axis } => {
                let outer: usize = g.shape()[..*axis].iter().product();
                let mut bufs: Vec<Vec<R>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.value(*p).len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (buf, p) in bufs.iter_mut().zip(parts) {
                        let block = self.value(*p).len() / outer;
                        buf.extend_from_slice(&gd[offset..offset + block]);
                        offset += block;
                    }
                }
                parts
                    .iter()
                    .zip(bufs)
                    .map(|(p, d)| (*p, Tensor::from_parts(self.shape(*p).to_vec(), d)))
                    .collect()
            }
            Op::BroadcastHadamard { g: gv, l } => {
                let (sg, sl) = (self.shape(*gv), self.shape(*l));
                let (batch, spatial, c) = hadamard_dims(sg, sl).expect("validated in forward");
                let (gval, lval) = (self.value(*gv).data(), self.value(*l).data());
                let mut dg = vec![R::zero(); batch * c];
                let mut dl = Vec::with_capacity(lval.len());
                for b in 0..batch {
                    let grow = &gval[b * c..(b + 1) * c];
                    for s in 0..spatial {
                        let base = (b * spatial + s) * c;
                        for ch in 0..c {
                            dg[b * c + ch] += gd[base + ch] * lval[base + ch];
                            dl.push(gd[base + ch] * grow[ch]);
                        }
                    }
                }
                vec![
                    (*gv, Tensor::from_parts(sg.to_vec(), dg)),
                    (*l, Tensor::from_parts(sl.to_vec(), dl)),
                ]
            }
            Op::Reshape(x) => vec![(*x, Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec()))],
            Op::Expand(x) => {
                let sx = self.shape(*x);
                let map = broadcast_index(g.shape(), sx);
                let mut dx = vec![R::zero(); self.value(*x).len()];
                for (&i, &v) in map.iter().zip(gd) {
                    dx[i] += v;
                }
                vec![(*x, Tensor::from_parts(sx.to_vec(), dx))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(x, s) => vec![(
                *x,
                Tensor::from_parts(g.shape().to_vec(), gd.iter().map(|&v| v * *s).collect()),
            )],
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x).to_vec(), gd[0]))],
            Op::WeightedSum(x, w) => vec![(
                *x,
                Tensor::from_parts(
                    w.shape().to_vec(),
                    w.data().iter().map(|&v| v * gd[0]).collect(),
                ),
            )],
            Op::Unfold3x3(x) => {
                let s = self.shape(*x);
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![R::zero(); n * h * w * c];
                for f in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((f * h + y) * w + xx) * 9 * c;
                            for dy in 0..3 {
                                let sy = y as isize + dy as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx_ in 0..3 {
                                    let sx = xx as isize + dx_ as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let to = ((f * h + sy as usize) * w + sx as usize) * c;
                                    let from = src + (dy * 3 + dx_) * c;
                                    for ch in 0..c {
                                        dx[to + ch] += gd[from + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(s.to_vec(), dx))]
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = R::of(0.25);
                let mut dx = vec![R::zero(); n * h * w * c];
                for f in 0..n {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let from = ((f * ho + y) * wo + xx) * c;
                            for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let to = ((f * h + 2 * y + dy) * w + 2 * xx + ddx) * c;
                                for ch in 0..c {
                                    dx[to + ch] = gd[from + ch] * quarter;
                                }
                            }
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(s.to_vec(), dx))]
            }
            Op::GatherFrames { x, index } => {
                let s = self.shape(*x);
                let inner: usize = s[1..].iter().product();
                let mut dx = vec![R::zero(); self.value(*x).len()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..inner {
                        dx[i * inner + j] += gd[k * inner + j];
                    }
                }
                vec![(*x, Tensor::from_parts(s.to_vec(), dx))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.shape()[1];
                let scale = gd[0] / R::of(labels.len() as f64);
                let mut d = probs.data().to_vec();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= R::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, Tensor::from_parts(probs.shape().to_vec(), d))]
            }
            Op::Triplet { emb, picks } => {
                let ev = self.value(*emb);
                let c = ev.shape()[1];
                let e = ev.data();
                let scale = gd[0] / R::of(picks.len() as f64);
                let mut d = vec![R::zero(); ev.len()];
                for p in picks.iter().filter(|p| p.active) {
                    // +d(a,p)
                    if p.d_pos > R::zero() {
                        for ch in 0..c {
                            let diff = (e[p.anchor * c + ch] - e[p.positive * c + ch]) / p.d_pos;
                            d[p.anchor * c + ch] += scale * diff;
                            d[p.positive * c + ch] -= scale * diff;
                        }
                    }
                    // -d(a,n)
                    if p.d_neg > R::zero() {
                        for ch in 0..c {
                            let diff = (e[p.anchor * c + ch] - e[p.negative * c + ch]) / p.d_neg;
                            d[p.anchor * c + ch] -= scale * diff;
                            d[p.negative * c + ch] += scale * diff;
                        }
                    }
                }
                vec![(*emb, Tensor::from_parts(ev.shape().to_vec(), d))]
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
    params: Vec<(ParamId, Var)>,
}

impl<R: Real> Gradients<R> {
    /// Gradient with respect to an input or parameter leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds every reached parameter gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<R>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                let p = store.get_mut(id);
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b);
            }
        }
    }
}

/// Batch-hard mining: for every anchor, the farthest same-label sample and the
/// nearest different-label sample. Ties go to the lowest index.
pub fn batch_hard_selection<R: Real>(
    emb: &Tensor<R>,
    labels: &[usize],
    margin: f64,
) -> Result<Vec<TripletPick<R>>> {
    if emb.rank() != 2 || emb.shape()[0] != labels.len() {
        return Err(dim_err!(
            "triplet expects [N,C] embeddings for {} labels, got {:?}",
            labels.len(),
            emb.shape()
        ));
    }
    let (n, c) = (emb.shape()[0], emb.shape()[1]);
    let e = emb.data();
    let dist = |i: usize, j: usize| -> R {
        let mut acc = R::zero();
        for ch in 0..c {
            let d = e[i * c + ch] - e[j * c + ch];
            acc += d * d;
        }
        acc.sqrt()
    };
    let mut picks = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, R)> = None;
        let mut neg: Option<(usize, R)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.map_or(true, |(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (Some((p, dp)), Some((q, dn))) = (pos, neg) else {
            return Err(Error::Contract(format!(
                "degenerate triplet batch: anchor {a} (label {}) lacks a positive or a negative",
                labels[a]
            )));
        };
        picks.push(TripletPick {
            anchor: a,
            positive: p,
            negative: q,
            d_pos: dp,
            d_neg: dn,
            active: margin + dp.as_f64() - dn.as_f64() > 0.0,
        });
    }
    Ok(picks)
}

fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
    let mut total = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn transpose2<R: Real>(src: &[R], m: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

/// For every flat index of `big`, the flat index into `small`, where each axis
/// of `small` either matches `big` or has size 1.
fn broadcast_index(big: &[usize], small: &[usize]) -> Vec<usize> {
    let st = strides(small);
    let eff: Vec<usize> = small
        .iter()
        .zip(&st)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = big.iter().product();
    let mut idx = vec![0usize; big.len()];
    let mut cur = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(cur);
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < big[d] {
                break;
            }
            cur -= eff[d] * big[d];
            idx[d] = 0;
        }
    }
    out
}

fn hadamard_dims(sg: &[usize], sl: &[usize]) -> Result<(usize, usize, usize)> {
    let mismatch = || dim_err!("broadcast_hadamard mismatch: global {:?}, local {:?}", sg, sl);
    match (sg, sl) {
        ([1, 1, cg], [h, w, c]) if cg == c => Ok((1, h * w, *c)),
        ([b0, 1, 1, cg], [b, h, w, c]) if cg == c && b0 == b => Ok((*b, h * w, *c)),
        _ => Err(mismatch()),
    }
}
