//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The op set is fixed to what the policy model and the four training losses
//! need. Ops evaluate eagerly onto a tape; `backward` walks the tape in exact
//! reverse insertion order, which is a valid reverse topological order because
//! every op only references earlier nodes.

use crate::error::{CordError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    EmbedGather(Var, Vec<usize>),
    GatherIndex(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu(Var),
    SumAll(Var),
    MeanAll(Var),
    WeightedSum(Var, Vec<F>),
    StopGrad(#[allow(dead_code)] Var),
    KlRows { student: Var, teacher: Var, reverse: bool },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

const LN_EPS: f64 = 1e-5;

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, ctx: &str) -> Result<Var> {
        value.check_finite(ctx)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register a differentiable leaf (parameter tensor).
    pub fn leaf(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(Op::Leaf, t, "leaf")
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(Op::Leaf, t, "constant")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(CordError::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = ta.shape.clone();
        self.push(Op::Add(a, b), Tensor { shape, data }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(CordError::ShapeMismatch(format!(
                "mul {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = ta.shape.clone();
        self.push(Op::Mul(a, b), Tensor { shape, data }, "mul")
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| x * c).collect();
        let shape = ta.shape.clone();
        self.push(Op::Scale(a, c), Tensor { shape, data }, "scale")
    }

    /// `a + c * b`, same shapes.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: F) -> Result<Var> {
        let sb = self.scale(b, c)?;
        self.add(a, sb)
    }

    /// Broadcast-add a `[C]` bias to every row of a `[R, C]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.shape.len() != 2 || tb.shape != vec![tx.cols()] {
            return Err(CordError::ShapeMismatch(format!(
                "add_bias {:?} vs {:?}",
                tx.shape, tb.shape
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = tx.data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + tb.data[j];
            }
        }
        self.push(
            Op::AddBias(x, b),
            Tensor {
                shape: vec![r, c],
                data,
            },
            "add_bias",
        )
    }

    /// `[R, K] x [K, C] -> [R, C]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.cols() != tb.rows() {
            return Err(CordError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let value = matmul_nn(ta, tb);
        self.push(Op::Matmul(a, b), value, "matmul")
    }

    /// `[R, K] x [C, K]^T -> [R, C]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.cols() != tb.cols() {
            return Err(CordError::ShapeMismatch(format!(
                "matmul_nt {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let value = matmul_nt(ta, tb);
        self.push(Op::MatmulNT(a, b), value, "matmul_nt")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.len() != 2 || start > end || end > tx.rows() {
            return Err(CordError::InvalidArgument(format!(
                "slice_rows {}..{} of {:?}",
                start, end, tx.shape
            )));
        }
        let c = tx.cols();
        let data = tx.data[start * c..end * c].to_vec();
        self.push(
            Op::SliceRows(x, start, end),
            Tensor {
                shape: vec![end - start, c],
                data,
            },
            "slice_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.len() != 2 || start > end || end > tx.cols() {
            return Err(CordError::InvalidArgument(format!(
                "slice_cols {}..{} of {:?}",
                start, end, tx.shape
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&tx.data[i * c + start..i * c + end]);
        }
        self.push(
            Op::SliceCols(x, start, end),
            Tensor {
                shape: vec![r, w],
                data,
            },
            "slice_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CordError::InvalidArgument("concat_rows of nothing".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.shape.len() != 2 || tp.cols() != c {
                return Err(CordError::ShapeMismatch("concat_rows width".into()));
            }
            rows += tp.rows();
            data.extend_from_slice(&tp.data);
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor {
                shape: vec![rows, c],
                data,
            },
            "concat_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CordError::InvalidArgument("concat_cols of nothing".into()));
        }
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let tp = self.value(p);
                if tp.rows() != r {
                    return Err(CordError::ShapeMismatch("concat_cols height".into()));
                }
                data.extend_from_slice(tp.row(i));
            }
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor {
                shape: vec![r, total],
                data,
            },
            "concat_cols",
        )
    }

    /// Gather rows of an embedding table `[V, d]` by token id.
    pub fn embed_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape.len() != 2 {
            return Err(CordError::ShapeMismatch("embed table must be 2-d".into()));
        }
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(CordError::InvalidArgument(format!(
                    "token id {} out of table range {}",
                    id, v
                )));
            }
            data.extend_from_slice(tt.row(id));
        }
        self.push(
            Op::EmbedGather(table, ids.to_vec()),
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            "embed_gather",
        )
    }

    /// Pick one element per row: `[R, C], ids[R] -> [R]`.
    pub fn gather_index(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.len() != 2 || ids.len() != tx.rows() {
            return Err(CordError::ShapeMismatch("gather_index".into()));
        }
        let c = tx.cols();
        let mut data = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if id >= c {
                return Err(CordError::InvalidArgument(format!(
                    "gather index {} out of {}",
                    id, c
                )));
            }
            data.push(tx.data[i * c + id]);
        }
        self.push(
            Op::GatherIndex(x, ids.to_vec()),
            Tensor {
                shape: vec![ids.len()],
                data,
            },
            "gather_index",
        )
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.len() != 2 {
            return Err(CordError::ShapeMismatch("log_softmax needs 2-d".into()));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row(i);
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        self.push(
            Op::LogSoftmaxRows(x),
            Tensor {
                shape: vec![r, c],
                data,
            },
            "log_softmax",
        )
    }

    /// Row-wise softmax over the lower triangle of a square score matrix;
    /// entries above the diagonal get exactly zero probability.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.len() != 2 || tx.rows() != tx.cols() {
            return Err(CordError::ShapeMismatch("causal_softmax needs square".into()));
        }
        let n = tx.rows();
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            let row = tx.row(i);
            let m = row[..=i].iter().cloned().fold(F::neg_infinity(), F::max);
            let denom: F = row[..=i].iter().map(|&v| (v - m).exp()).sum();
            for j in 0..=i {
                data[i * n + j] = (row[j] - m).exp() / denom;
            }
        }
        self.push(
            Op::CausalSoftmax(x),
            Tensor {
                shape: vec![n, n],
                data,
            },
            "causal_softmax",
        )
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if tx.shape.len() != 2
            || tg.shape != vec![tx.cols()]
            || tb.shape != vec![tx.cols()]
        {
            return Err(CordError::ShapeMismatch("layer_norm".into()));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let eps = F::from_f64_(LN_EPS);
        let cn = F::from_f64_(c as f64);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row(i);
            let mu = row.iter().cloned().sum::<F>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..c {
                data.push((row[j] - mu) * inv * tg.data[j] + tb.data[j]);
            }
        }
        self.push(
            Op::LayerNorm { x, gain, bias },
            Tensor {
                shape: vec![r, c],
                data,
            },
            "layer_norm",
        )
    }

    /// GELU nonlinearity (tanh approximation; smooth, so finite differences
    /// behave well in gradient checks).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = tx.shape.clone();
        self.push(Op::Gelu(x), Tensor { shape, data }, "gelu")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data.iter().cloned().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s), "sum")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(CordError::InvalidArgument("mean of empty tensor".into()));
        }
        let s: F = tx.data.iter().cloned().sum();
        let m = s / F::from_f64_(tx.len() as f64);
        self.push(Op::MeanAll(x), Tensor::scalar(m), "mean")
    }

    /// Dot product with a constant weight vector; weights carry no gradient.
    pub fn weighted_sum(&mut self, x: Var, weights: &[F]) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(CordError::ShapeMismatch("weighted_sum length".into()));
        }
        let s: F = tx
            .data
            .iter()
            .zip(weights)
            .map(|(&v, &w)| v * w)
            .sum();
        self.push(
            Op::WeightedSum(x, weights.to_vec()),
            Tensor::scalar(s),
            "weighted_sum",
        )
    }

    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::StopGrad(x), value, "stop_grad")
    }

    /// Per-row KL divergence between two log-distribution matrices `[T, V]`,
    /// returning `[T]`. With `reverse = true` this is KL(student || teacher);
    /// otherwise KL(teacher || student). Both arguments get exact partials,
    /// so gradient flow is controlled entirely by `stop_grad` on the caller
    /// side.
    pub fn kl_rows(&mut self, student: Var, teacher: Var, reverse: bool) -> Result<Var> {
        let (ts, tt) = (self.value(student), self.value(teacher));
        if ts.shape.len() != 2 || !ts.same_shape(tt) {
            return Err(CordError::ShapeMismatch(format!(
                "kl_rows {:?} vs {:?}",
                ts.shape, tt.shape
            )));
        }
        let (r, c) = (ts.rows(), ts.cols());
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let (s, t) = (ts.row(i), tt.row(i));
            let mut d = F::zero();
            for j in 0..c {
                d = d + if reverse {
                    s[j].exp() * (s[j] - t[j])
                } else {
                    t[j].exp() * (t[j] - s[j])
                };
            }
            data.push(d);
        }
        self.push(
            Op::KlRows {
                student,
                teacher,
                reverse,
            },
            Tensor {
                shape: vec![r],
                data,
            },
            "kl_rows",
        )
    }

    /// Gradients of a scalar root with respect to every tape node.
    /// Entries are `None` where no gradient flows.
    pub fn backward(&self, root: Var) -> Result<Grads<F>> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(CordError::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor {
            shape: root_val.shape.clone(),
            data: vec![F::one()],
        });

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            g.check_finite("gradient")?;
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let acc = |grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>| {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data.iter_mut().zip(&delta.data) {
                        *e = *e + *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = Tensor {
                    shape: ta.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&tb.data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect(),
                };
                let db = Tensor {
                    shape: tb.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &av)| gv * av)
                        .collect(),
                };
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|&gv| gv * *c).collect(),
                };
                acc(grads, *a, da);
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, g.clone());
                let c = self.value(*x).cols();
                let r = self.value(*x).rows();
                let mut db = vec![F::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] = db[j] + g.data[i * c + j];
                    }
                }
                acc(
                    grads,
                    *b,
                    Tensor {
                        shape: vec![c],
                        data: db,
                    },
                );
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, matmul_nt(g, tb));
                acc(grads, *b, matmul_tn(ta, g));
            }
            Op::MatmulNT(a, b) => {
                // C = A B^T: dA = dC B, dB = dC^T A
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, matmul_nn(g, tb));
                acc(grads, *b, matmul_tn(g, ta));
            }
            Op::SliceRows(x, start, _end) => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![F::zero(); r * c];
                dx[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: vec![r, c],
                        data: dx,
                    },
                );
            }
            Op::SliceCols(x, start, end) => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let w = end - start;
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..w {
                        dx[i * c + start + j] = g.data[i * w + j];
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: vec![r, c],
                        data: dx,
                    },
                );
            }
            Op::ConcatRows(parts) => {
                let c = g.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    let dp = Tensor {
                        shape: vec![pr, c],
                        data: g.data[offset * c..(offset + pr) * c].to_vec(),
                    };
                    acc(grads, p, dp);
                    offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.shape[0];
                let total = g.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                    }
                    acc(
                        grads,
                        p,
                        Tensor {
                            shape: vec![r, w],
                            data: dp,
                        },
                    );
                    offset += w;
                }
            }
            Op::EmbedGather(table, ids) => {
                let tt = self.value(*table);
                let (v, d) = (tt.rows(), tt.cols());
                let mut dt = vec![F::zero(); v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g.data[i * d + j];
                    }
                }
                acc(
                    grads,
                    *table,
                    Tensor {
                        shape: vec![v, d],
                        data: dt,
                    },
                );
            }
            Op::GatherIndex(x, ids) => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![F::zero(); r * c];
                for (i, &id) in ids.iter().enumerate() {
                    dx[i * c + id] = g.data[i];
                }
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: vec![r, c],
                        data: dx,
                    },
                );
            }
            Op::LogSoftmaxRows(x) => {
                let ty = &node.value;
                let (r, c) = (ty.rows(), ty.cols());
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gr = &g.data[i * c..(i + 1) * c];
                    let yr = ty.row(i);
                    let gsum: F = gr.iter().cloned().sum();
                    for j in 0..c {
                        dx.push(gr[j] - yr[j].exp() * gsum);
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: vec![r, c],
                        data: dx,
                    },
                );
            }
            Op::CausalSoftmax(x) => {
                let tp = &node.value;
                let n = tp.rows();
                let mut dx = vec![F::zero(); n * n];
                for i in 0..n {
                    let pr = tp.row(i);
                    let gr = &g.data[i * n..(i + 1) * n];
                    let dot: F = (0..=i).map(|j| pr[j] * gr[j]).sum();
                    for j in 0..=i {
                        dx[i * n + j] = pr[j] * (gr[j] - dot);
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: vec![n, n],
                        data: dx,
                    },
                );
            }
            Op::LayerNorm { x, gain, bias } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let (r, c) = (tx.rows(), tx.cols());
                let eps = F::from_f64_(LN_EPS);
                let cn = F::from_f64_(c as f64);
                let mut dx = vec![F::zero(); r * c];
                let mut dgain = vec![F::zero(); c];
                let mut dbias = vec![F::zero(); c];
                for i in 0..r {
                    let row = tx.row(i);
                    let gr = &g.data[i * c..(i + 1) * c];
                    let mu = row.iter().cloned().sum::<F>() / cn;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cn;
                    let inv = (var + eps).sqrt().recip();
                    // dxhat_j = g_j * gain_j
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mu) * inv;
                        let dxhat = gr[j] * tg.data[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgain[j] = dgain[j] + gr[j] * xhat;
                        dbias[j] = dbias[j] + gr[j];
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mu) * inv;
                        let dxhat = gr[j] * tg.data[j];
                        dx[i * c + j] =
                            inv * (dxhat - sum_dxhat / cn - xhat * sum_dxhat_xhat / cn);
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: vec![r, c],
                        data: dx,
                    },
                );
                acc(
                    grads,
                    *gain,
                    Tensor {
                        shape: vec![c],
                        data: dgain,
                    },
                );
                acc(
                    grads,
                    *bias,
                    Tensor {
                        shape: vec![c],
                        data: dbias,
                    },
                );
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let data = tx
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| gv * gelu_bwd(v))
                    .collect();
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data,
                    },
                );
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                let gv = g.data[0];
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data: vec![gv; tx.len()],
                    },
                );
            }
            Op::MeanAll(x) => {
                let tx = self.value(*x);
                let gv = g.data[0] / F::from_f64_(tx.len() as f64);
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data: vec![gv; tx.len()],
                    },
                );
            }
            Op::WeightedSum(x, weights) => {
                let tx = self.value(*x);
                let gv = g.data[0];
                let data = weights.iter().map(|&w| gv * w).collect();
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data,
                    },
                );
            }
            Op::KlRows {
                student,
                teacher,
                reverse,
            } => {
                let (ts, tt) = (self.value(*student), self.value(*teacher));
                let (r, c) = (ts.rows(), ts.cols());
                let mut ds = vec![F::zero(); r * c];
                let mut dt = vec![F::zero(); r * c];
                for i in 0..r {
                    let gv = g.data[i];
                    let (s, t) = (ts.row(i), tt.row(i));
                    for j in 0..c {
                        if *reverse {
                            // D = sum exp(s) (s - t)
                            let p = s[j].exp();
                            ds[i * c + j] = gv * p * (s[j] - t[j] + F::one());
                            dt[i * c + j] = -gv * p;
                        } else {
                            // D = sum exp(t) (t - s)
                            let q = t[j].exp();
                            ds[i * c + j] = -gv * q;
                            dt[i * c + j] = gv * q * (t[j] - s[j] + F::one());
                        }
                    }
                }
                acc(
                    grads,
                    *student,
                    Tensor {
                        shape: vec![r, c],
                        data: ds,
                    },
                );
                acc(
                    grads,
                    *teacher,
                    Tensor {
                        shape: vec![r, c],
                        data: dt,
                    },
                );
            }
        }
        Ok(())
    }
}

/// Backward result: per-node gradients.
pub struct Grads<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient of the root with respect to `v`; zeros if no path exists.
    pub fn get(&self, v: Var, tape: &Tape<F>) -> Tensor<F> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape.clone()),
        }
    }

    pub fn has_grad(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64_((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_(0.044715);
    let half = F::from_f64_(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64_((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_(0.044715);
    let half = F::from_f64_(0.5);
    let three = F::from_f64_(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

fn matmul_nn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b.data[p * c..(p + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
    }
}

/// `A [R,K] x B^T` where `B` is `[C,K]`.
fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (r, k, c) = (a.rows(), a.cols(), b.rows());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let arow = a.row(i);
        for j in 0..c {
            let brow = b.row(j);
            let mut s = F::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            out.push(s);
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
    }
}

/// `A^T x B` where `A` is `[K,R]`, `B` is `[K,C]`.
fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (k, r, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![F::zero(); r * c];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for i in 0..r {
            let av = arow[i];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
    }
}
