use std::collections::HashMap;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Transpose(Var),
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Relu(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<F> },
    MaskedFill { x: Var, mask: Vec<bool>, heads: usize },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Pick { x: Var, idx: Vec<usize> },
    Reshape(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradient tape. Nodes are appended in evaluation order, so the node list is
/// already a topological order; `backward` walks it in reverse.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    training: bool,
    rng: Option<StreamRng>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<F> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, contribution: Vec<F>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn accumulate_with<F: Scalar>(slot: &mut Option<Vec<F>>, len: usize, f: impl FnOnce(&mut [F])) {
    let g = slot.get_or_insert_with(|| vec![F::ZERO; len]);
    f(g);
}

impl<F: Scalar> Graph<F> {
    /// Inference-mode graph: dropout disabled.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            rng: None,
            bound: HashMap::new(),
        }
    }

    /// Training-mode graph; dropout masks come from `rng`.
    pub fn training(rng: StreamRng) -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
            rng: Some(rng),
            bound: HashMap::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a gradient-tracked leaf. Binding the same
    /// id twice returns the same node, so shared weights accumulate into one
    /// gradient.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    // ---- linear algebra ------------------------------------------------

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        F::gemm(
            m,
            k,
            n,
            F::ONE,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            F::ZERO,
            &mut out,
            n as isize,
            1,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `[g, m, k] @ [g, k, n]`, or `[g, m, k] @ [g, n, k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("batch_matmul", &sa, &sb);
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err("batch_matmul", &sa, &sb);
        }
        let mut out = vec![F::ZERO; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..g {
            F::gemm(
                m,
                k,
                n,
                F::ONE,
                &ad[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &bd[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                F::ZERO,
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return shape_err("transpose", s, &[]);
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x]))
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_same(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return shape_err("add_bias", self.shape(x), self.shape(bias));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        let out: Vec<F> = self.value(x).data().iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        let out: Vec<F> = self.value(x).data().iter().map(|&v| v + s).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > F::ZERO { v } else { F::ZERO })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), &[x])
    }

    /// Logistic function.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                if v >= F::ZERO {
                    F::ONE / (F::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::ONE + e)
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout. Identity in inference mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let rng = self.rng.as_mut().expect("training graph carries an rng");
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.next_f64() < p { F::ZERO } else { keep })
            .collect();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }, &[x])
    }

    /// Additive -inf mask. `x` is `[batch * heads, q, k]`, `mask` is
    /// `[batch, q, k]` (true = blocked) and is shared by all heads.
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, heads: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if heads == 0 || mask.len() * heads != n {
            return shape_err("masked_fill", self.shape(x), &[mask.len(), heads]);
        }
        let s = self.shape(x).to_vec();
        let per = if s.len() == 3 { s[1] * s[2] } else { n };
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let g = i / per;
            let b = g / heads;
            if mask[b * per + i % per] {
                *v = F::NEG_INFINITY;
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::MaskedFill { x, mask, heads }, &[x]))
    }

    // ---- shape ----------------------------------------------------------

    /// Concatenates along the trailing dimension.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        let mut total = 0;
        for &x in xs {
            if self.value(x).rows() != rows || self.shape(x).len() != 2 {
                return shape_err("concat", self.shape(xs[0]), self.shape(x));
            }
            total += self.value(x).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let c = self.value(x).cols();
                out.extend_from_slice(&self.value(x).data()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(xs.to_vec()),
            xs,
        ))
    }

    /// Concatenates 2-d tensors along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.value(xs[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            if self.value(x).cols() != cols || self.shape(x).len() != 2 {
                return shape_err("concat", self.shape(xs[0]), self.shape(x));
            }
            rows += self.value(x).rows();
            out.extend_from_slice(self.value(x).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(xs.to_vec()),
            xs,
        ))
    }

    /// Rows `start..start + len` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] {
            return shape_err("slice", s, &[start, len]);
        }
        let c = s[1];
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![len, c], out),
            Op::SliceRows { x, start },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return shape_err("reshape", self.shape(x), shape);
        }
        let out = self.value(x).data().to_vec();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Reshape(x), &[x]))
    }

    /// `[batch * seq, heads * dh]` to `[batch * heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != batch * seq || s[1] % heads != 0 {
            return shape_err("split_heads", s, &[batch, seq, heads]);
        }
        let d = s[1];
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![F::ZERO; src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + t) * d + h * dh;
                    let to = ((b * heads + h) * seq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch * heads, seq, dh], out),
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return shape_err("merge_heads", s, &[batch, seq, heads]);
        }
        let dh = s[2];
        let d = dh * heads;
        let src = self.value(x).data();
        let mut out = vec![F::ZERO; src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + t) * d + h * dh;
                    let from = ((b * heads + h) * seq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch * seq, d], out),
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        ))
    }

    /// Row lookup: `table[ids[i]]` for each `i`. Used for embeddings.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return shape_err("embedding", s, &[]);
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err("embedding", s, &[bad]);
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    // ---- normalisation ----------------------------------------------------

    /// Row-wise softmax over the trailing dimension, max-subtracted. A row
    /// that is entirely `-inf` yields zeros.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.value(x).cols();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(F::NEG_INFINITY, F::max);
            if m == F::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = F::ZERO);
                continue;
            }
            let mut sum = F::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let c = self.value(x).cols();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(F::NEG_INFINITY, F::max);
            let sum: F = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x), &[x])
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return shape_err("layer_norm", self.shape(x), self.shape(gain));
        }
        let eps = F::from_f64(eps);
        let n = F::from_f64(c as f64);
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / c;
        let mut xhat = vec![F::ZERO; xd.len()];
        let mut inv_std = vec![F::ZERO; rows];
        let mut out = vec![F::ZERO; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::ONE / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(
            Tensor::scalar(s / F::from_f64(n as f64)),
            Op::Mean(x),
            &[x],
        )
    }

    /// `[r, c]` to `[r]` by summing each row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let c = self.value(x).cols();
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().sum())
            .collect();
        let r = out.len();
        self.push(Tensor::from_parts(vec![r], out), Op::SumRows(x), &[x])
    }

    /// `[r, c]` to `[r]`: element `idx[i]` of row `i`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let c = self.value(x).cols();
        let r = self.value(x).rows();
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return shape_err("pick", self.shape(x), &[idx.len()]);
        }
        let d = self.value(x).data();
        let out: Vec<F> = idx.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![r], out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    // ---- backward --------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    accumulate_with(&mut grads[a.0], m * k, |ga| {
                        // dA += dC @ B^T
                        F::gemm(m, n, k, F::ONE, g, n as isize, 1, bd, 1, n as isize, F::ONE, ga, k as isize, 1);
                    });
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    accumulate_with(&mut grads[b.0], k * n, |gb| {
                        // dB += A^T @ dC
                        F::gemm(k, m, n, F::ONE, ad, 1, k as isize, g, n as isize, 1, F::ONE, gb, n as isize, 1);
                    });
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bg, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate_with(&mut grads[a.0], bg * m * k, |ga| {
                        for t in 0..bg {
                            let gs = &g[t * m * n..(t + 1) * m * n];
                            let bs = &bd[t * k * n..(t + 1) * k * n];
                            // dA = dC @ B^T  (B stored [k, n], or [n, k] when transposed)
                            let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                            F::gemm(
                                m,
                                n,
                                k,
                                F::ONE,
                                gs,
                                n as isize,
                                1,
                                bs,
                                rsb,
                                csb,
                                F::ONE,
                                &mut ga[t * m * k..(t + 1) * m * k],
                                k as isize,
                                1,
                            );
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate_with(&mut grads[b.0], bg * k * n, |gb| {
                        for t in 0..bg {
                            let gs = &g[t * m * n..(t + 1) * m * n];
                            let as_ = &ad[t * m * k..(t + 1) * m * k];
                            let out = &mut gb[t * k * n..(t + 1) * k * n];
                            if *trans_b {
                                // dB[n, k] = dC^T @ A
                                F::gemm(n, m, k, F::ONE, gs, 1, n as isize, as_, k as isize, 1, F::ONE, out, k as isize, 1);
                            } else {
                                // dB[k, n] = A^T @ dC
                                F::gemm(k, m, n, F::ONE, as_, 1, k as isize, gs, n as isize, 1, F::ONE, out, n as isize, 1);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    accumulate_with(&mut grads[bias.0], n, |gb| {
                        for row in g.chunks(n) {
                            for (a, &b) in gb.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(bd).map(|(&u, &v)| u * v).collect());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(ad).map(|(&u, &v)| u * v).collect());
                }
            }
            Op::Scale(x, s) => {
                accumulate(&mut grads[x.0], g.iter().map(|&v| v * *s).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                accumulate(&mut grads[x.0], g.to_vec());
            }
            Op::ConcatCols(xs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for x in xs {
                    let c = self.value(*x).cols();
                    if self.wants(*x) {
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        accumulate(&mut grads[x.0], part);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = self.value(*x).numel();
                    if self.wants(*x) {
                        accumulate(&mut grads[x.0], g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let n = self.value(*x).numel();
                accumulate_with(&mut grads[x.0], n, |gx| {
                    for (a, &b) in gx[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *a += b;
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut out = vec![F::ZERO; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(&mut grads[x.0], out);
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = self.value(*x).cols();
                let dh = d / heads;
                let mut out = vec![F::ZERO; g.len()];
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let to = (b * seq + t) * d + h * dh;
                            let from = ((b * heads + h) * seq + t) * dh;
                            out[to..to + dh].copy_from_slice(&g[from..from + dh]);
                        }
                    }
                }
                accumulate(&mut grads[x.0], out);
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = node.value.cols();
                let dh = d / heads;
                let mut out = vec![F::ZERO; g.len()];
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let from = (b * seq + t) * d + h * dh;
                            let to = ((b * heads + h) * seq + t) * dh;
                            out[to..to + dh].copy_from_slice(&g[from..from + dh]);
                        }
                    }
                }
                accumulate(&mut grads[x.0], out);
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).cols();
                let n = self.value(*table).numel();
                accumulate_with(&mut grads[table.0], n, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut out = vec![F::ZERO; y.len()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[x.0], out);
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut out = vec![F::ZERO; y.len()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let s: F = gr.iter().copied().sum();
                    for j in 0..c {
                        o[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                accumulate(&mut grads[x.0], out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gd = self.value(*gain).data();
                if self.wants(*x) {
                    let n = F::from_f64(c as f64);
                    let mut out = vec![F::ZERO; g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = F::ZERO;
                        let mut m2 = F::ZERO;
                        for j in 0..c {
                            let d = gr[j] * gd[j];
                            m1 += d;
                            m2 += d * xr[j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..c {
                            out[r * c + j] = is * (gr[j] * gd[j] - m1 - xr[j] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], out);
                }
                if self.wants(*gain) {
                    accumulate_with(&mut grads[gain.0], c, |gg| {
                        for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] += gr[j] * xr[j];
                            }
                        }
                    });
                }
                if self.wants(*bias) {
                    accumulate_with(&mut grads[bias.0], c, |gb| {
                        for gr in g.chunks(c) {
                            for j in 0..c {
                                gb[j] += gr[j];
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                accumulate(
                    &mut grads[x.0],
                    g.iter()
                        .zip(xd)
                        .map(|(&u, &v)| if v > F::ZERO { u } else { F::ZERO })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                accumulate(
                    &mut grads[x.0],
                    g.iter().zip(y).map(|(&u, &s)| u * s * (F::ONE - s)).collect(),
                );
            }
            Op::Dropout { x, mask } => {
                accumulate(&mut grads[x.0], g.iter().zip(mask).map(|(&u, &m)| u * m).collect());
            }
            Op::MaskedFill { x, mask, heads } => {
                let s = node.value.shape();
                let per = if s.len() == 3 { s[1] * s[2] } else { g.len() };
                let out = g
                    .iter()
                    .enumerate()
                    .map(|(i, &u)| {
                        let b = i / per / heads;
                        if mask[b * per + i % per] {
                            F::ZERO
                        } else {
                            u
                        }
                    })
                    .collect();
                accumulate(&mut grads[x.0], out);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / F::from_f64(n as f64);
                accumulate(&mut grads[x.0], vec![v; n]);
            }
            Op::SumRows(x) => {
                let c = self.value(*x).cols();
                let mut out = Vec::with_capacity(g.len() * c);
                for &u in g {
                    out.extend(std::iter::repeat_n(u, c));
                }
                accumulate(&mut grads[x.0], out);
            }
            Op::Pick { x, idx } => {
                let c = self.value(*x).cols();
                let n = self.value(*x).numel();
                accumulate_with(&mut grads[x.0], n, |gx| {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                });
            }
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}
