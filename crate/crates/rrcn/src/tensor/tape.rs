//! The recording tape: forward operations and exact reverse-mode backward.

use super::{axis_split, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One selection used by the fused convolution-layer op: sorted row and
/// column indices for a single output position.
pub(crate) type LayerSelection = (Vec<usize>, Vec<usize>);

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Outer,
    Tanh,
    Sigmoid,
    Softmax {
        axis: usize,
        mask: Option<usize>,
    },
    MaxAxis {
        axis: usize,
        /// Flat input index of the winner per output element.
        argmax: Vec<usize>,
    },
    GatherSub {
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    Concat,
    Stack,
    Slice {
        start: usize,
    },
    Reshape,
    RowDot,
    WeightedSum,
    RowWeightedSum,
    SumAll,
    Bce {
        labels: Vec<f64>,
    },
    ConvAt {
        rows: Vec<usize>,
        cols: Vec<usize>,
        summed: bool,
    },
    ConvLayer {
        selections: Vec<LayerSelection>,
        summed: bool,
    },
    SampleLogProb {
        drawn: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "elementwise-multiply",
            Op::Scale(_) => "scale",
            Op::MatMul => "matrix-multiply",
            Op::Outer => "outer-product",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax { .. } => "softmax-over-axis",
            Op::MaxAxis { .. } => "max-over-axis",
            Op::GatherSub { .. } => "gather-submatrix",
            Op::Concat => "concatenate",
            Op::Stack => "stack",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::RowDot => "row-wise-dot",
            Op::WeightedSum => "weighted-sum",
            Op::RowWeightedSum => "row-weighted-sum",
            Op::SumAll => "scalar-reduce-sum",
            Op::Bce { .. } => "binary-cross-entropy",
            Op::ConvAt { .. } => "convolve-at",
            Op::ConvLayer { .. } => "conv-layer",
            Op::SampleLogProb { .. } => "sample-log-prob",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<NodeId>,
}

/// Probability clamp for binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// A recorded forward pass. Build one per pass; [`Tape::backward`] is a
/// pure function of the recorded graph, so calling it twice yields
/// identical results.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kernel_applications: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Counts kernel applications performed by convolve-at / conv-layer
    /// ops recorded on this tape.
    pub fn kernel_applications(&self) -> u64 {
        self.kernel_applications
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, inputs });
        Ok(id)
    }

    /// Records an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        // Tensor construction already validated finiteness.
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: vec![],
        });
        id
    }

    fn binary_same_shape(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, a, b, |x, y| x * y)
    }

    /// Multiplies every element by a fixed constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * c).collect())?;
        self.push(out, Op::Scale(c), vec![a])
    }

    /// Matrix product `(m,k) x (k,n) -> (m,n)`, or matrix-vector
    /// `(m,k) x (k) -> (m)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = |detail: String| TensorError::ShapeMismatch {
            op: "matrix-multiply",
            detail,
        };
        match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => {
                let (m, k, n) = (*m, *k, *n);
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ta.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            data[i * n + j] += av * tb.data()[p * n + j];
                        }
                    }
                }
                let out = Tensor::new(vec![m, n], data)?;
                self.push(out, Op::MatMul, vec![a, b])
            }
            ([m, k], [k2]) if k == k2 => {
                let (m, k) = (*m, *k);
                let mut data = vec![0.0; m];
                for i in 0..m {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += ta.data()[i * k + p] * tb.data()[p];
                    }
                    data[i] = s;
                }
                let out = Tensor::new(vec![m], data)?;
                self.push(out, Op::MatMul, vec![a, b])
            }
            (sa, sb) => Err(mismatch(format!("{:?} x {:?}", sa, sb))),
        }
    }

    /// Outer product. For 1-D inputs `(m) x (n) -> (m,n)`; for 2-D inputs
    /// `(m,d) x (n,d) -> (m,n,d)` the product is taken per channel
    /// (column) `l`: `out[i][j][l] = a[i][l] * b[j][l]`.
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        match (ta.shape(), tb.shape()) {
            ([m], [n]) => {
                let (m, n) = (*m, *n);
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[i * n + j] = ta.data()[i] * tb.data()[j];
                    }
                }
                let out = Tensor::new(vec![m, n], data)?;
                self.push(out, Op::Outer, vec![a, b])
            }
            ([m, d], [n, d2]) if d == d2 => {
                let (m, n, d) = (*m, *n, *d);
                let mut data = vec![0.0; m * n * d];
                for i in 0..m {
                    for j in 0..n {
                        for l in 0..d {
                            data[(i * n + j) * d + l] = ta.data()[i * d + l] * tb.data()[j * d + l];
                        }
                    }
                }
                let out = Tensor::new(vec![m, n, d], data)?;
                self.push(out, Op::Outer, vec![a, b])
            }
            (sa, sb) => Err(TensorError::ShapeMismatch {
                op: "outer-product",
                detail: format!("{:?} x {:?}", sa, sb),
            }),
        }
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x.tanh()).collect(),
        )?;
        self.push(out, Op::Tanh, vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
        )?;
        self.push(out, Op::Sigmoid, vec![a])
    }

    /// Softmax along `axis`, computed with max-subtraction. With `mask`
    /// (1-D input only) the masked index receives probability exactly 0,
    /// as if its logit were negative infinity.
    pub fn softmax(&mut self, a: NodeId, axis: usize, mask: Option<usize>) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let rank = ta.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "softmax-over-axis",
                axis,
                rank,
            });
        }
        if let Some(m) = mask {
            if rank != 1 {
                return Err(TensorError::Invalid {
                    op: "softmax-over-axis",
                    detail: "mask is only supported for 1-D input".into(),
                });
            }
            if m >= ta.shape()[0] {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax-over-axis",
                    index: m,
                    size: ta.shape()[0],
                });
            }
            if ta.shape()[0] < 2 {
                return Err(TensorError::Invalid {
                    op: "softmax-over-axis",
                    detail: "masked softmax needs at least two entries".into(),
                });
            }
        }
        let (outer, asize, inner) = axis_split(ta.shape(), axis);
        let mut data = vec![0.0; ta.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let flat = |t: usize| (o * asize + t) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for t in 0..asize {
                    if mask == Some(t) {
                        continue;
                    }
                    max = max.max(ta.data()[flat(t)]);
                }
                let mut denom = 0.0;
                for t in 0..asize {
                    if mask == Some(t) {
                        continue;
                    }
                    let e = (ta.data()[flat(t)] - max).exp();
                    data[flat(t)] = e;
                    denom += e;
                }
                for t in 0..asize {
                    data[flat(t)] = if mask == Some(t) {
                        0.0
                    } else {
                        data[flat(t)] / denom
                    };
                }
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Softmax { axis, mask }, vec![a])
    }

    /// Maximum along `axis`, removing it from the shape. The winning
    /// input position is recorded per output element (lowest index wins
    /// ties) and backward routes gradient only to the winners.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let rank = ta.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "max-over-axis",
                axis,
                rank,
            });
        }
        let (outer, asize, inner) = axis_split(ta.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_flat = 0;
                for t in 0..asize {
                    let flat = (o * asize + t) * inner + i;
                    if ta.data()[flat] > best {
                        best = ta.data()[flat];
                        best_flat = flat;
                    }
                }
                data[o * inner + i] = best;
                argmax[o * inner + i] = best_flat;
            }
        }
        let mut shape: Vec<usize> = ta.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::MaxAxis { axis, argmax }, vec![a])
    }

    /// Gathers the submatrix of the given rows x columns across all
    /// channels of an `(R,C,D)` tensor, yielding `(|rows|,|cols|,D)`.
    pub fn gather_sub(&mut self, a: NodeId, rows: &[usize], cols: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let [r, c, d] = match ta.shape() {
            [r, c, d] => [*r, *c, *d],
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "gather-submatrix",
                    detail: format!("expected rank-3 input, got {:?}", s),
                })
            }
        };
        for &i in rows {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather-submatrix",
                    index: i,
                    size: r,
                });
            }
        }
        for &j in cols {
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather-submatrix",
                    index: j,
                    size: c,
                });
            }
        }
        let mut data = vec![0.0; rows.len() * cols.len() * d];
        for (oi, &i) in rows.iter().enumerate() {
            for (oj, &j) in cols.iter().enumerate() {
                for l in 0..d {
                    data[(oi * cols.len() + oj) * d + l] = ta.data()[(i * c + j) * d + l];
                }
            }
        }
        let out = Tensor::new(vec![rows.len(), cols.len(), d], data)?;
        self.push(
            out,
            Op::GatherSub {
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            vec![a],
        )
    }

    /// Concatenates 1-D tensors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concatenate",
                detail: "no inputs".into(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            self.check(p)?;
            let tp = self.value(p);
            if tp.shape().len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "concatenate",
                    detail: format!("expected 1-D inputs, got {:?}", tp.shape()),
                });
            }
            data.extend_from_slice(tp.data());
        }
        let out = Tensor::vector(data)?;
        self.push(out, Op::Concat, parts.to_vec())
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "stack",
                detail: "no inputs".into(),
            });
        }
        self.check(parts[0])?;
        let base = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::new();
        for &p in parts {
            self.check(p)?;
            let tp = self.value(p);
            if tp.shape() != base.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", tp.shape(), base),
                });
            }
            data.extend_from_slice(tp.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&base);
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Stack, parts.to_vec())
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        if ta.shape().len() != 1 || start + len > ta.shape()[0] || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("range {}..{} of {:?}", start, start + len, ta.shape()),
            });
        }
        let out = Tensor::vector(ta.data()[start..start + len].to_vec())?;
        self.push(out, Op::Slice { start }, vec![a])
    }

    /// Reinterprets the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", ta.shape(), shape),
            });
        }
        let out = Tensor::new(shape, ta.data().to_vec())?;
        self.push(out, Op::Reshape, vec![a])
    }

    /// Row-wise dot product of two `(L,d)` tensors: `out[i] = sum_l a[i,l]*b[i,l]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        match (ta.shape(), tb.shape()) {
            ([l, d], [l2, d2]) if l == l2 && d == d2 => {
                let (l, d) = (*l, *d);
                let mut data = vec![0.0; l];
                for i in 0..l {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += ta.data()[i * d + c] * tb.data()[i * d + c];
                    }
                    data[i] = s;
                }
                let out = Tensor::vector(data)?;
                self.push(out, Op::RowDot, vec![a, b])
            }
            (sa, sb) => Err(TensorError::ShapeMismatch {
                op: "row-wise-dot",
                detail: format!("{:?} vs {:?}", sa, sb),
            }),
        }
    }

    /// Weighted sum of equal-shape members: `out = sum_i alpha[i] * m_i`.
    /// `alpha` is a 1-D tensor whose length equals the member count.
    pub fn weighted_sum(&mut self, alpha: NodeId, members: &[NodeId]) -> Result<NodeId> {
        self.check(alpha)?;
        let n = {
            let t = self.value(alpha);
            if t.shape().len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted-sum",
                    detail: format!("weights must be 1-D, got {:?}", t.shape()),
                });
            }
            t.shape()[0]
        };
        if n != members.len() || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "weighted-sum",
                detail: format!("{} weights vs {} members", n, members.len()),
            });
        }
        self.check(members[0])?;
        let base = self.value(members[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(members[0]).numel()];
        for (i, &m) in members.iter().enumerate() {
            self.check(m)?;
            let tm = self.value(m);
            if tm.shape() != base.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted-sum",
                    detail: format!("member {} has {:?}, expected {:?}", i, tm.shape(), base),
                });
            }
            let w = self.value(alpha).data()[i];
            for (o, &v) in data.iter_mut().zip(self.nodes[m.0].value.data()) {
                *o += w * v;
            }
        }
        let out = Tensor::new(base, data)?;
        let mut inputs = vec![alpha];
        inputs.extend_from_slice(members);
        self.push(out, Op::WeightedSum, inputs)
    }

    /// Per-row convex combination across members: weights `(K,L)`,
    /// members `K` tensors of shape `(L,d)`, output `(L,d)` with
    /// `out[r,l] = sum_i alpha[i,r] * m_i[r,l]`.
    pub fn row_weighted_sum(&mut self, alpha: NodeId, members: &[NodeId]) -> Result<NodeId> {
        self.check(alpha)?;
        let (k, l) = match self.value(alpha).shape() {
            [k, l] => (*k, *l),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "row-weighted-sum",
                    detail: format!("weights must be 2-D, got {:?}", s),
                })
            }
        };
        if k != members.len() || k == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "row-weighted-sum",
                detail: format!("{} weight rows vs {} members", k, members.len()),
            });
        }
        self.check(members[0])?;
        let (l2, d) = match self.value(members[0]).shape() {
            [l2, d] => (*l2, *d),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "row-weighted-sum",
                    detail: format!("members must be 2-D, got {:?}", s),
                })
            }
        };
        if l2 != l {
            return Err(TensorError::ShapeMismatch {
                op: "row-weighted-sum",
                detail: format!("weights cover {} rows, members have {}", l, l2),
            });
        }
        let mut data = vec![0.0; l * d];
        for (i, &m) in members.iter().enumerate() {
            self.check(m)?;
            let tm = self.value(m);
            if tm.shape() != [l, d] {
                return Err(TensorError::ShapeMismatch {
                    op: "row-weighted-sum",
                    detail: format!("member {} has {:?}, expected {:?}", i, tm.shape(), [l, d]),
                });
            }
            for r in 0..l {
                let w = self.value(alpha).data()[i * l + r];
                for c in 0..d {
                    data[r * d + c] += w * self.nodes[m.0].value.data()[r * d + c];
                }
            }
        }
        let out = Tensor::new(vec![l, d], data)?;
        let mut inputs = vec![alpha];
        inputs.extend_from_slice(members);
        self.push(out, Op::RowWeightedSum, inputs)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s: f64 = self.value(a).data().iter().sum();
        let out = Tensor::scalar(s)?;
        self.push(out, Op::SumAll, vec![a])
    }

    /// Summed binary cross-entropy of predicted probabilities against 0/1
    /// labels. Predictions are clamped to `[1e-7, 1-1e-7]` before the log.
    pub fn bce(&mut self, scores: NodeId, labels: &[f64]) -> Result<NodeId> {
        self.check(scores)?;
        let ts = self.value(scores);
        if ts.shape().len() != 1 || ts.shape()[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "binary-cross-entropy",
                detail: format!("scores {:?} vs {} labels", ts.shape(), labels.len()),
            });
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Invalid {
                op: "binary-cross-entropy",
                detail: "labels must be 0 or 1".into(),
            });
        }
        let mut total = 0.0;
        for (&p, &y) in ts.data().iter().zip(labels) {
            let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
        let out = Tensor::scalar(total)?;
        self.push(
            out,
            Op::Bce {
                labels: labels.to_vec(),
            },
            vec![scores],
        )
    }

    /// One kernel application: inputs `H (L,L,d)` and weights `(k,k,d)`,
    /// output the length-`d` channel vector
    /// `out[l] = sum_ij w[i,j,l] * H[rows[i], cols[j], l]`.
    /// With `summed` the channel sum is taken and replicated across `d`.
    pub fn convolve_at(
        &mut self,
        h: NodeId,
        kernel: NodeId,
        rows: &[usize],
        cols: &[usize],
        summed: bool,
    ) -> Result<NodeId> {
        self.check(h)?;
        self.check(kernel)?;
        let (l, d) = conv_input_dims(self.value(h), self.value(kernel), rows, cols)?;
        let _ = l;
        let data = apply_kernel(
            self.value(h).data(),
            self.value(kernel).data(),
            conv_dims(self.value(h)),
            rows,
            cols,
            summed,
        );
        self.kernel_applications += 1;
        let out = Tensor::new(vec![d], data)?;
        self.push(
            out,
            Op::ConvAt {
                rows: rows.to_vec(),
                cols: cols.to_vec(),
                summed,
            },
            vec![h, kernel],
        )
    }

    /// A full selection-driven convolution layer: one kernel application
    /// per output position, using the provided per-position sorted
    /// row/column selections (row-major order, length `L*L`). Output has
    /// the same `(L,L,d)` shape as the input.
    pub fn conv_layer(
        &mut self,
        h: NodeId,
        kernel: NodeId,
        selections: Vec<LayerSelection>,
        summed: bool,
    ) -> Result<NodeId> {
        self.check(h)?;
        self.check(kernel)?;
        let (l, d) = {
            let first = selections.first().ok_or_else(|| TensorError::Invalid {
                op: "conv-layer",
                detail: "no selections".into(),
            })?;
            conv_input_dims(self.value(h), self.value(kernel), &first.0, &first.1)?
        };
        if selections.len() != l * l {
            return Err(TensorError::Invalid {
                op: "conv-layer",
                detail: format!("expected {} selections, got {}", l * l, selections.len()),
            });
        }
        let mut data = vec![0.0; l * l * d];
        for (pos, (rows, cols)) in selections.iter().enumerate() {
            conv_input_dims(self.value(h), self.value(kernel), rows, cols)?;
            let v = apply_kernel(
                self.value(h).data(),
                self.value(kernel).data(),
                conv_dims(self.value(h)),
                rows,
                cols,
                summed,
            );
            self.kernel_applications += 1;
            data[pos * d..(pos + 1) * d].copy_from_slice(&v);
        }
        let out = Tensor::new(vec![l, l, d], data)?;
        self.push(out, Op::ConvLayer { selections, summed }, vec![h, kernel])
    }

    /// Log-probability of drawing the given distinct indices sequentially
    /// without replacement (renormalizing after each draw) from the input
    /// probability vector.
    pub fn sample_log_prob(&mut self, probs: NodeId, drawn: &[usize]) -> Result<NodeId> {
        self.check(probs)?;
        let tp = self.value(probs);
        if tp.shape().len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "sample-log-prob",
                detail: format!("expected 1-D probabilities, got {:?}", tp.shape()),
            });
        }
        let n = tp.shape()[0];
        let mut seen = vec![false; n];
        let mut log_p = 0.0;
        let mut remaining = 1.0;
        for &i in drawn {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "sample-log-prob",
                    index: i,
                    size: n,
                });
            }
            if seen[i] {
                return Err(TensorError::Invalid {
                    op: "sample-log-prob",
                    detail: format!("index {} drawn twice", i),
                });
            }
            seen[i] = true;
            let p = tp.data()[i];
            if p <= 0.0 || remaining <= 0.0 {
                return Err(TensorError::Invalid {
                    op: "sample-log-prob",
                    detail: "drawn index has no probability mass".into(),
                });
            }
            log_p += (p / remaining).ln();
            remaining -= p;
        }
        let out = Tensor::scalar(log_p)?;
        self.push(
            out,
            Op::SampleLogProb {
                drawn: drawn.to_vec(),
            },
            vec![probs],
        )
    }

    /// Reverse-mode differentiation from a scalar loss node. Every node
    /// reachable from the loss receives its exact accumulated gradient;
    /// unreachable nodes report zeros. Pure over the recorded graph:
    /// repeated calls return identical results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        let mut reached = vec![false; self.nodes.len()];
        grads[loss.0][0] = 1.0;
        reached[loss.0] = true;

        for idx in (0..=loss.0).rev() {
            if !reached[idx] {
                continue;
            }
            for &input in &self.nodes[idx].inputs {
                reached[input.0] = true;
            }
            // Split off the gradient of the current node so inputs can be
            // accumulated without aliasing.
            let (before, rest) = grads.split_at_mut(idx);
            let g = &rest[0];
            let node = &self.nodes[idx];
            let ins = &node.inputs;
            let val = |id: NodeId| self.nodes[id.0].value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Add => {
                    for (o, &gv) in before[ins[0].0 .0].iter_mut().zip(g) {
                        *o += gv;
                    }
                    for (o, &gv) in before[ins[1].0 .0].iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                Op::Sub => {
                    for (o, &gv) in before[ins[0].0 .0].iter_mut().zip(g) {
                        *o += gv;
                    }
                    for (o, &gv) in before[ins[1].0 .0].iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
                Op::Mul => {
                    let (a, b) = (ins[0], ins[1]);
                    for i in 0..g.len() {
                        before[a.0 .0][i] += g[i] * val(b)[i];
                    }
                    for i in 0..g.len() {
                        before[b.0 .0][i] += g[i] * val(a)[i];
                    }
                }
                Op::Scale(c) => {
                    for (o, &gv) in before[ins[0].0 .0].iter_mut().zip(g) {
                        *o += gv * c;
                    }
                }
                Op::MatMul => {
                    let (a, b) = (ins[0], ins[1]);
                    let sa = self.nodes[a.0 .0].value.shape().to_vec();
                    let sb = self.nodes[b.0 .0].value.shape().to_vec();
                    match (sa.as_slice(), sb.as_slice()) {
                        ([m, k], [_, n]) => {
                            let (m, k, n) = (*m, *k, *n);
                            for i in 0..m {
                                for j in 0..n {
                                    let gv = g[i * n + j];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for p in 0..k {
                                        before[a.0 .0][i * k + p] += gv * val(b)[p * n + j];
                                        before[b.0 .0][p * n + j] += gv * val(a)[i * k + p];
                                    }
                                }
                            }
                        }
                        ([m, k], [_]) => {
                            let (m, k) = (*m, *k);
                            for i in 0..m {
                                let gv = g[i];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    before[a.0 .0][i * k + p] += gv * val(b)[p];
                                    before[b.0 .0][p] += gv * val(a)[i * k + p];
                                }
                            }
                        }
                        _ => unreachable!("matmul shapes validated in forward"),
                    }
                }
                Op::Outer => {
                    let (a, b) = (ins[0], ins[1]);
                    let sa = self.nodes[a.0 .0].value.shape().to_vec();
                    match sa.as_slice() {
                        [m] => {
                            let n = self.nodes[b.0 .0].value.numel();
                            for i in 0..*m {
                                for j in 0..n {
                                    let gv = g[i * n + j];
                                    before[a.0 .0][i] += gv * val(b)[j];
                                    before[b.0 .0][j] += gv * val(a)[i];
                                }
                            }
                        }
                        [m, d] => {
                            let (m, d) = (*m, *d);
                            let n = self.nodes[b.0 .0].value.shape()[0];
                            for i in 0..m {
                                for j in 0..n {
                                    for l in 0..d {
                                        let gv = g[(i * n + j) * d + l];
                                        before[a.0 .0][i * d + l] += gv * val(b)[j * d + l];
                                        before[b.0 .0][j * d + l] += gv * val(a)[i * d + l];
                                    }
                                }
                            }
                        }
                        _ => unreachable!("outer shapes validated in forward"),
                    }
                }
                Op::Tanh => {
                    let y = &node.value;
                    for i in 0..g.len() {
                        before[ins[0].0 .0][i] += g[i] * (1.0 - y.data()[i] * y.data()[i]);
                    }
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    for i in 0..g.len() {
                        before[ins[0].0 .0][i] += g[i] * y.data()[i] * (1.0 - y.data()[i]);
                    }
                }
                Op::Softmax { axis, .. } => {
                    let y = &node.value;
                    let (outer, asize, inner) = axis_split(y.shape(), *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let flat = |t: usize| (o * asize + t) * inner + i;
                            let mut dot = 0.0;
                            for t in 0..asize {
                                dot += g[flat(t)] * y.data()[flat(t)];
                            }
                            for t in 0..asize {
                                before[ins[0].0 .0][flat(t)] +=
                                    y.data()[flat(t)] * (g[flat(t)] - dot);
                            }
                        }
                    }
                }
                Op::MaxAxis { argmax, .. } => {
                    for (out_i, &in_flat) in argmax.iter().enumerate() {
                        before[ins[0].0 .0][in_flat] += g[out_i];
                    }
                }
                Op::GatherSub { rows, cols } => {
                    let shape = self.nodes[ins[0].0 .0].value.shape();
                    let (c, d) = (shape[1], shape[2]);
                    for (oi, &i) in rows.iter().enumerate() {
                        for (oj, &j) in cols.iter().enumerate() {
                            for l in 0..d {
                                before[ins[0].0 .0][(i * c + j) * d + l] +=
                                    g[(oi * cols.len() + oj) * d + l];
                            }
                        }
                    }
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &p in ins {
                        let n = self.nodes[p.0].value.numel();
                        for i in 0..n {
                            before[p.0][i] += g[offset + i];
                        }
                        offset += n;
                    }
                }
                Op::Stack => {
                    let per = self.nodes[ins[0].0].value.numel();
                    for (s, &p) in ins.iter().enumerate() {
                        for i in 0..per {
                            before[p.0][i] += g[s * per + i];
                        }
                    }
                }
                Op::Slice { start } => {
                    for i in 0..g.len() {
                        before[ins[0].0 .0][start + i] += g[i];
                    }
                }
                Op::Reshape => {
                    for (o, &gv) in before[ins[0].0 .0].iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                Op::RowDot => {
                    let (a, b) = (ins[0], ins[1]);
                    let d = self.nodes[a.0 .0].value.shape()[1];
                    for i in 0..g.len() {
                        let gv = g[i];
                        for c in 0..d {
                            before[a.0 .0][i * d + c] += gv * val(b)[i * d + c];
                            before[b.0 .0][i * d + c] += gv * val(a)[i * d + c];
                        }
                    }
                }
                Op::WeightedSum => {
                    let alpha = ins[0];
                    for (i, &m) in ins[1..].iter().enumerate() {
                        let w = val(alpha)[i];
                        let mut dot = 0.0;
                        for j in 0..g.len() {
                            before[m.0][j] += w * g[j];
                            dot += g[j] * val(m)[j];
                        }
                        before[alpha.0][i] += dot;
                    }
                }
                Op::RowWeightedSum => {
                    let alpha = ins[0];
                    let [l, d] = match node.value.shape() {
                        [l, d] => [*l, *d],
                        _ => unreachable!(),
                    };
                    for (i, &m) in ins[1..].iter().enumerate() {
                        for r in 0..l {
                            let w = val(alpha)[i * l + r];
                            let mut dot = 0.0;
                            for c in 0..d {
                                before[m.0][r * d + c] += w * g[r * d + c];
                                dot += g[r * d + c] * val(m)[r * d + c];
                            }
                            before[alpha.0][i * l + r] += dot;
                        }
                    }
                }
                Op::SumAll => {
                    let gv = g[0];
                    for o in before[ins[0].0 .0].iter_mut() {
                        *o += gv;
                    }
                }
                Op::Bce { labels } => {
                    let gv = g[0];
                    for (i, (&p, &y)) in val(ins[0]).iter().zip(labels).enumerate() {
                        if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                            before[ins[0].0 .0][i] += gv * (-y / p + (1.0 - y) / (1.0 - p));
                        }
                    }
                }
                Op::ConvAt { rows, cols, summed } => {
                    backprop_kernel(
                        &mut before[..],
                        ins[0],
                        ins[1],
                        val(ins[0]),
                        val(ins[1]),
                        conv_dims(&self.nodes[ins[0].0 .0].value),
                        rows,
                        cols,
                        *summed,
                        g,
                    );
                }
                Op::ConvLayer { selections, summed } => {
                    let d = self.nodes[ins[0].0 .0].value.shape()[2];
                    for (pos, (rows, cols)) in selections.iter().enumerate() {
                        backprop_kernel(
                            &mut before[..],
                            ins[0],
                            ins[1],
                            val(ins[0]),
                            val(ins[1]),
                            conv_dims(&self.nodes[ins[0].0 .0].value),
                            rows,
                            cols,
                            *summed,
                            &g[pos * d..(pos + 1) * d],
                        );
                    }
                }
                Op::SampleLogProb { drawn } => {
                    let gv = g[0];
                    let p = val(ins[0]);
                    // d logP / dp_j accumulates 1/p_j for the draw of j and
                    // 1/(1 - S_t) for every later draw t, where S_t is the
                    // mass already removed before draw t.
                    let mut removed = 0.0;
                    for (t, &i) in drawn.iter().enumerate() {
                        before[ins[0].0 .0][i] += gv / p[i];
                        if t > 0 {
                            let denom = 1.0 - removed;
                            for &j in &drawn[..t] {
                                before[ins[0].0 .0][j] += gv / denom;
                            }
                        }
                        removed += p[i];
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn conv_dims(h: &Tensor) -> (usize, usize, usize) {
    let s = h.shape();
    (s[0], s[1], s[2])
}

fn conv_input_dims(
    h: &Tensor,
    kernel: &Tensor,
    rows: &[usize],
    cols: &[usize],
) -> Result<(usize, usize)> {
    let (hr, hc, hd) = match h.shape() {
        [a, b, c] => (*a, *b, *c),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "convolve-at",
                detail: format!("input must be rank-3, got {:?}", s),
            })
        }
    };
    let (k1, k2, kd) = match kernel.shape() {
        [a, b, c] => (*a, *b, *c),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "convolve-at",
                detail: format!("kernel must be rank-3, got {:?}", s),
            })
        }
    };
    if hr != hc || k1 != k2 || kd != hd {
        return Err(TensorError::ShapeMismatch {
            op: "convolve-at",
            detail: format!("input {:?} vs kernel {:?}", h.shape(), kernel.shape()),
        });
    }
    if rows.len() != k1 || cols.len() != k1 {
        return Err(TensorError::ShapeMismatch {
            op: "convolve-at",
            detail: format!(
                "kernel size {} vs {} rows / {} cols",
                k1,
                rows.len(),
                cols.len()
            ),
        });
    }
    for &i in rows.iter().chain(cols) {
        if i >= hr {
            return Err(TensorError::IndexOutOfRange {
                op: "convolve-at",
                index: i,
                size: hr,
            });
        }
    }
    Ok((hr, hd))
}

fn apply_kernel(
    h: &[f64],
    w: &[f64],
    dims: (usize, usize, usize),
    rows: &[usize],
    cols: &[usize],
    summed: bool,
) -> Vec<f64> {
    let (_, c, d) = dims;
    let k = rows.len();
    let mut out = vec![0.0; d];
    for (i, &ri) in rows.iter().enumerate() {
        for (j, &cj) in cols.iter().enumerate() {
            let wbase = (i * k + j) * d;
            let hbase = (ri * c + cj) * d;
            for l in 0..d {
                out[l] += w[wbase + l] * h[hbase + l];
            }
        }
    }
    if summed {
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v = s);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn backprop_kernel(
    grads: &mut [Vec<f64>],
    h_id: NodeId,
    w_id: NodeId,
    h: &[f64],
    w: &[f64],
    dims: (usize, usize, usize),
    rows: &[usize],
    cols: &[usize],
    summed: bool,
    g: &[f64],
) {
    let (_, c, d) = dims;
    let k = rows.len();
    // In summed mode each channel of the output equals the full sum, so
    // the effective upstream for every (i,j,l) term is the channel total.
    let gs: f64 = if summed { g.iter().sum() } else { 0.0 };
    for (i, &ri) in rows.iter().enumerate() {
        for (j, &cj) in cols.iter().enumerate() {
            let wbase = (i * k + j) * d;
            let hbase = (ri * c + cj) * d;
            for l in 0..d {
                let gv = if summed { gs } else { g[l] };
                grads[h_id.0][hbase + l] += gv * w[wbase + l];
                grads[w_id.0][wbase + l] += gv * h[hbase + l];
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Raw gradient data of a node (zeros when unreachable from the loss).
    pub fn grad_of(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    /// Gradient of a node as a tensor shaped like its value.
    pub fn grad_tensor(&self, tape: &Tape, id: NodeId) -> Tensor {
        Tensor::new(tape.value(id).shape().to_vec(), self.grads[id.0].clone())
            .expect("gradient matches node shape")
    }

    /// Moves the gradient data of a node out of the map.
    pub fn take(&mut self, id: NodeId) -> Vec<f64> {
        std::mem::take(&mut self.grads[id.0])
    }
}
