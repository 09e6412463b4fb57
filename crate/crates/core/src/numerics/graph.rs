//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records one forward computation. Nodes are appended in
//! evaluation order, so every input of node `i` has an index below `i`
//! and the backward sweep is a single reverse pass. Parameters enter as
//! named leaves; whether a leaf accumulates a gradient is decided by the
//! graph's [`Trainable`] policy when the leaf is created, and nodes that
//! cannot reach a trainable leaf are never differentiated.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::tensor::{gemm, softmax_in_place, MatRef, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One packed sequence inside a batch of concatenated rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// Leading positions that attend to each other bidirectionally.
    /// Zero gives a plain causal mask.
    pub prefix: usize,
}

/// Row layout of a packed batch: which rows belong to which sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    segments: Vec<Segment>,
    row_segment: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lens_and_prefixes: &[(usize, usize)]) -> Result<Self> {
        let mut segments = Vec::with_capacity(lens_and_prefixes.len());
        let mut row_segment = Vec::new();
        let mut start = 0;
        for (i, &(len, prefix)) in lens_and_prefixes.iter().enumerate() {
            if len == 0 {
                return shape_err(format!("segment {i} is empty"));
            }
            if prefix > len {
                return shape_err(format!("segment {i}: prefix {prefix} > length {len}"));
            }
            segments.push(Segment { start, len, prefix });
            row_segment.extend(std::iter::repeat_n(i, len));
            start += len;
        }
        Ok(Self {
            segments,
            row_segment,
        })
    }

    /// Causal layout for sequences of the given lengths.
    pub fn causal(lens: &[usize]) -> Result<Self> {
        let v: Vec<_> = lens.iter().map(|&l| (l, 0)).collect();
        Self::new(&v)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn rows(&self) -> usize {
        self.row_segment.len()
    }

    pub fn row_segment(&self, row: usize) -> usize {
        self.row_segment[row]
    }
}

/// Which named leaves receive gradients.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    /// Inference: nothing is differentiated.
    #[default]
    None,
    All,
    Only(HashSet<String>),
}

impl Trainable {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Only(set) => set.contains(name),
        }
    }
}

enum Op<T> {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        x: usize,
        bias: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<T>,
    },
    Gelu {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        layout: Arc<SeqLayout>,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    GateRows {
        x: usize,
        gates: usize,
        expert: usize,
        layout: Arc<SeqLayout>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    Sum {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded forward computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, usize)>,
    param_index: HashMap<String, usize>,
    trainable: Trainable,
    differentiated: bool,
}

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new(Trainable::None)
    }
}

impl<T: Real> Graph<T> {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            trainable,
            differentiated: false,
        }
    }

    pub fn inference() -> Self {
        Self::new(Trainable::None)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    /// Named parameter leaf. The same name always maps to the same node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&i) = self.param_index.get(name) {
            return Var(i);
        }
        let rg = self.trainable.contains(name);
        let v = self.push(value.clone(), Op::Leaf, rg);
        self.param_index.insert(name.to_string(), v.0);
        self.params.push((name.to_string(), v.0));
        v
    }

    /// Unnamed leaf, e.g. an input whose gradient a test wants to inspect.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `a·b`, or `a·bᵀ` when `trans_b`.
    pub fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let bm = MatRef::new(self.value(b).data(), br, bc);
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            if trans_b { bm.t() } else { bm },
            &mut out,
            false,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `x·wᵀ` for a weight stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_impl(x, w, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    /// Adds a length-`d` bias to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(bias).len() != d {
            return shape_err(format!(
                "bias of {} values for rows of width {d}",
                self.value(bias).len()
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += *bb;
            }
        }
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(
            Tensor::new(vec![n, d], data)?,
            Op::AddRow {
                x: x.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = Tensor::from_fn(self.value(x).shape(), |i| self.value(x).data()[i] * c);
        let rg = self.rg(x.0);
        self.push(t, Op::Scale { x: x.0, c }, rg)
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return shape_err("embedding lookup with no ids");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!(
                    "id {id} outside embedding table of {vocab} rows"
                )));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table.0);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise `x / rms(x) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gain).len() != d {
            return shape_err("rms_norm gain width");
        }
        let eps = T::from_f64(RMS_EPS);
        let dd = T::from_f64(d as f64);
        let g = self.value(gain).data();
        let mut inv_rms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in self.value(x).data().chunks(d) {
            let ms = row.iter().map(|v| *v * *v).sum::<T>() / dd;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(v, gg)| *v * r * *gg));
        }
        let rg = self.rg(x.0) || self.rg(gain.0);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let t = Tensor::from_fn(self.value(x).shape(), |i| {
            let v = self.value(x).data()[i];
            half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
        });
        let rg = self.rg(x.0);
        self.push(t, Op::Gelu { x: x.0 }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = Tensor::from_fn(self.value(x).shape(), |i| {
            let v = self.value(x).data()[i];
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        });
        let rg = self.rg(x.0);
        self.push(t, Op::Relu { x: x.0 }, rg)
    }

    /// Row-wise softmax of an `[n, d]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::Softmax { x: x.0 }, rg))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    /// Position `i` of a segment sees position `j` when `j <= i` or `j`
    /// lies inside the segment's bidirectional prefix.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &Arc<SeqLayout>,
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        if n != layout.rows() {
            return shape_err(format!("attention over {n} rows, layout has {}", layout.rows()));
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("width {d} not divisible into {heads} heads"));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::new();
        let mut qh = Vec::new();
        let mut kh = Vec::new();
        let mut vh = Vec::new();
        let mut oh = Vec::new();
        for seg in layout.segments() {
            let l = seg.len;
            for h in 0..heads {
                gather_head(qd, seg.start, l, d, h, dh, &mut qh);
                gather_head(kd, seg.start, l, d, h, dh, &mut kh);
                gather_head(vd, seg.start, l, d, h, dh, &mut vh);
                let p0 = probs.len();
                probs.resize(p0 + l * l, T::zero());
                let p = &mut probs[p0..];
                gemm(
                    MatRef::new(&qh, l, dh),
                    MatRef::new(&kh, l, dh).t(),
                    p,
                    false,
                );
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    let visible = if i < seg.prefix { seg.prefix } else { i + 1 };
                    for s in row[..visible].iter_mut() {
                        *s = *s * scale;
                    }
                    softmax_in_place(&mut row[..visible]);
                    for s in row[visible..].iter_mut() {
                        *s = T::zero();
                    }
                }
                oh.resize(l * dh, T::zero());
                gemm(MatRef::new(p, l, l), MatRef::new(&vh, l, dh), &mut oh, false);
                scatter_head(&oh, seg.start, l, d, h, dh, &mut out, false);
            }
        }
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                layout: layout.clone(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `[n, V]` logits against per-row targets;
    /// `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2()?;
        if targets.len() != n {
            return shape_err(format!("{} targets for {n} rows", targets.len()));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!(
                "target {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, t) in probs.chunks_mut(vocab).zip(targets) {
            if let Some(t) = t {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|z| (*z - max).exp()).sum::<T>().ln() + max;
                total -= (row[*t] - lse).as_f64();
            }
            softmax_in_place(row);
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                param: "cross_entropy".into(),
                detail: format!("loss is {loss}"),
            });
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Scales each row of `x` by the gate its sequence assigns to `expert`.
    pub fn gate_rows(
        &mut self,
        x: Var,
        gates: Var,
        expert: usize,
        layout: &Arc<SeqLayout>,
    ) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (b, k) = self.value(gates).dims2()?;
        if n != layout.rows() || b != layout.segments().len() || expert >= k {
            return shape_err(format!(
                "gate_rows: x {n}x{d}, gates {b}x{k}, expert {expert}, layout {} rows / {} segments",
                layout.rows(),
                layout.segments().len()
            ));
        }
        let g = self.value(gates).data();
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(d).enumerate() {
            let gv = g[layout.row_segment(r) * k + expert];
            for v in row.iter_mut() {
                *v = *v * gv;
            }
        }
        let rg = self.rg(x.0) || self.rg(gates.0);
        Ok(self.push(
            Tensor::new(vec![n, d], data)?,
            Op::GateRows {
                x: x.0,
                gates: gates.0,
                expert,
                layout: layout.clone(),
            },
            rg,
        ))
    }

    /// Stacks matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_rows of nothing");
        };
        let (_, d) = self.value(*first).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (n, w) = self.value(*p).dims2()?;
            if w != d {
                return shape_err(format!("concat_rows: width {w} vs {d}"));
            }
            data.extend_from_slice(self.value(*p).data());
            rows += n;
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            Tensor::new(vec![rows, d], data)?,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    /// Populates gradients of every reachable trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.differentiated = true;
        if !self.rg(loss.0) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, i: usize) -> &mut Vec<T> {
        let n = self.nodes[i].value.len();
        self.grads[i].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn accumulate(&mut self, i: usize, contrib: impl Iterator<Item = T>) {
        let buf = self.grad_buf(i);
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // The op is moved out so its saved buffers can be read while
        // gradient buffers of earlier nodes are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (m, k) = self.nodes[a].value.dims2().unwrap();
                let (br, bc) = self.nodes[b].value.dims2().unwrap();
                let n = if trans_b { br } else { bc };
                if self.rg(a) {
                    let mut buf = self.grads[a].take().unwrap_or_else(|| vec![T::zero(); m * k]);
                    let bm = MatRef::new(self.nodes[b].value.data(), br, bc);
                    // dA = dC·Bᵀ   (or dC·B when C = A·Bᵀ)
                    gemm(
                        MatRef::new(g, m, n),
                        if trans_b { bm } else { bm.t() },
                        &mut buf,
                        true,
                    );
                    self.grads[a] = Some(buf);
                }
                if self.rg(b) {
                    let mut buf = self.grads[b].take().unwrap_or_else(|| vec![T::zero(); br * bc]);
                    let am = MatRef::new(self.nodes[a].value.data(), m, k);
                    let gm = MatRef::new(g, m, n);
                    if trans_b {
                        // dB = dCᵀ·A
                        gemm(gm.t(), am, &mut buf, true);
                    } else {
                        // dB = Aᵀ·dC
                        gemm(am.t(), gm, &mut buf, true);
                    }
                    self.grads[b] = Some(buf);
                }
            }
            Op::Add { a, b } => {
                for &x in [a, b] {
                    if self.rg(x) {
                        self.accumulate(x, g.iter().copied());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let bv = self.nodes[b].value.data().to_vec();
                    self.accumulate(a, g.iter().zip(bv).map(|(g, y)| *g * y));
                }
                if self.rg(b) {
                    let av = self.nodes[a].value.data().to_vec();
                    self.accumulate(b, g.iter().zip(av).map(|(g, x)| *g * x));
                }
            }
            Op::AddRow { x, bias } => {
                let (x, bias) = (*x, *bias);
                if self.rg(x) {
                    self.accumulate(x, g.iter().copied());
                }
                if self.rg(bias) {
                    let d = self.nodes[bias].value.len();
                    let buf = self.grad_buf(bias);
                    for row in g.chunks(d) {
                        for (b, gg) in buf.iter_mut().zip(row) {
                            *b += *gg;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(*x, g.iter().map(|v| *v * c));
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].value.dims2().unwrap().1;
                let buf = self.grad_buf(*table);
                for (row, &id) in g.chunks(d).zip(ids) {
                    for (b, gg) in buf[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *b += *gg;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let (_, d) = self.nodes[x].value.dims2().unwrap();
                let dd = T::from_f64(d as f64);
                let xv = self.nodes[x].value.data().to_vec();
                let gv = self.nodes[gain].value.data().to_vec();
                if self.rg(x) {
                    let buf = self.grad_buf(x);
                    for ((xr, gr), (br, &r)) in xv
                        .chunks(d)
                        .zip(g.chunks(d))
                        .zip(buf.chunks_mut(d).zip(inv_rms))
                    {
                        let dot: T = (0..d).map(|j| gr[j] * gv[j] * xr[j]).sum();
                        let coef = r * r * r * dot / dd;
                        for j in 0..d {
                            br[j] += r * gv[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
                if self.rg(gain) {
                    let buf = self.grad_buf(gain);
                    for ((xr, gr), &r) in xv.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        for j in 0..d {
                            buf[j] += gr[j] * xr[j] * r;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(0.044715);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let xv = self.nodes[*x].value.data().to_vec();
                self.accumulate(
                    *x,
                    g.iter().zip(xv).map(|(g, v)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        *g * d
                    }),
                );
            }
            Op::Relu { x } => {
                let xv = self.nodes[*x].value.data().to_vec();
                self.accumulate(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, v)| if v > T::zero() { *g } else { T::zero() }),
                );
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = self.nodes[i].value.dims2().unwrap().1;
                let mut contrib = vec![T::zero(); y.len()];
                for ((yr, gr), cr) in y.chunks(d).zip(g.chunks(d)).zip(contrib.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..d {
                        cr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*x, contrib.into_iter());
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, *heads, probs, g),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.nodes[*logits].value.dims2().unwrap().1;
                let scale = g[0] / T::from_f64(*count as f64);
                let buf = self.grad_buf(*logits);
                for ((br, pr), t) in buf.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                    if let Some(t) = t {
                        for j in 0..vocab {
                            br[j] += pr[j] * scale;
                        }
                        br[*t] -= scale;
                    }
                }
            }
            Op::GateRows {
                x,
                gates,
                expert,
                layout,
            } => {
                let (x, gates, expert) = (*x, *gates, *expert);
                let d = self.nodes[x].value.dims2().unwrap().1;
                let k = self.nodes[gates].value.dims2().unwrap().1;
                if self.rg(x) {
                    let gv = self.nodes[gates].value.data().to_vec();
                    let buf = self.grad_buf(x);
                    for (r, (br, gr)) in buf.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        let w = gv[layout.row_segment(r) * k + expert];
                        for j in 0..d {
                            br[j] += gr[j] * w;
                        }
                    }
                }
                if self.rg(gates) {
                    let xv = self.nodes[x].value.data().to_vec();
                    let buf = self.grad_buf(gates);
                    for (r, (xr, gr)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                        let dot: T = xr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        buf[layout.row_segment(r) * k + expert] += dot;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if self.rg(p) {
                        self.accumulate(p, g[off..off + n].iter().copied());
                    }
                    off += n;
                }
            }
            Op::Sum { x } => {
                let g0 = g[0];
                let n = self.nodes[*x].value.len();
                self.accumulate(*x, std::iter::repeat_n(g0, n));
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: usize,
        k: usize,
        v: usize,
        layout: &SeqLayout,
        heads: usize,
        probs: &[T],
        g: &[T],
    ) {
        let (n, d) = self.nodes[q].value.dims2().unwrap();
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let (mut qh, mut kh, mut vh, mut goh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut dp, mut tmp) = (Vec::new(), Vec::new());
        let mut p_off = 0;
        {
            let qd = self.nodes[q].value.data();
            let kd = self.nodes[k].value.data();
            let vd = self.nodes[v].value.data();
            for seg in layout.segments() {
                let l = seg.len;
                for h in 0..heads {
                    let p = &probs[p_off..p_off + l * l];
                    p_off += l * l;
                    gather_head(qd, seg.start, l, d, h, dh, &mut qh);
                    gather_head(kd, seg.start, l, d, h, dh, &mut kh);
                    gather_head(vd, seg.start, l, d, h, dh, &mut vh);
                    gather_head(g, seg.start, l, d, h, dh, &mut goh);
                    tmp.resize(l * dh, T::zero());
                    // dV = Pᵀ·dO
                    gemm(MatRef::new(p, l, l).t(), MatRef::new(&goh, l, dh), &mut tmp, false);
                    scatter_head(&tmp, seg.start, l, d, h, dh, &mut dv, true);
                    // dP = dO·Vᵀ, then through the softmax
                    dp.resize(l * l, T::zero());
                    gemm(MatRef::new(&goh, l, dh), MatRef::new(&vh, l, dh).t(), &mut dp, false);
                    for r in 0..l {
                        let pr = &p[r * l..(r + 1) * l];
                        let dr = &mut dp[r * l..(r + 1) * l];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                        for j in 0..l {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    // dQ = dS·K, dK = dSᵀ·Q
                    gemm(MatRef::new(&dp, l, l), MatRef::new(&kh, l, dh), &mut tmp, false);
                    scatter_head(&tmp, seg.start, l, d, h, dh, &mut dq, true);
                    gemm(MatRef::new(&dp, l, l).t(), MatRef::new(&qh, l, dh), &mut tmp, false);
                    scatter_head(&tmp, seg.start, l, d, h, dh, &mut dk, true);
                }
            }
        }
        for (idx, contrib) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(idx) {
                self.accumulate(idx, contrib.into_iter());
            }
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of trainable parameters, in first-use order.
    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(name, i)| {
                self.grads[*i].as_ref().map(|g| {
                    (
                        name.clone(),
                        Tensor::new(self.nodes[*i].value.shape().to_vec(), g.clone())
                            .expect("gradient shape matches parameter"),
                    )
                })
            })
            .collect()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }
}

fn gather_head<T: Real>(
    src: &[T],
    start: usize,
    l: usize,
    d: usize,
    h: usize,
    dh: usize,
    out: &mut Vec<T>,
) {
    out.clear();
    for r in start..start + l {
        out.extend_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head<T: Real>(
    src: &[T],
    start: usize,
    l: usize,
    d: usize,
    h: usize,
    dh: usize,
    dst: &mut [T],
    add: bool,
) {
    for (i, r) in (start..start + l).enumerate() {
        let dst_row = &mut dst[r * d + h * dh..r * d + (h + 1) * dh];
        let src_row = &src[i * dh..(i + 1) * dh];
        if add {
            for (a, b) in dst_row.iter_mut().zip(src_row) {
                *a += *b;
            }
        } else {
            dst_row.copy_from_slice(src_row);
        }
    }
}
