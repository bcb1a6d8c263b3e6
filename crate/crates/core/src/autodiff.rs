//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it in reverse.
//!
//! Parameters enter a graph through [`Graph::param`], which remembers their
//! index in a [`ParamSet`]; `backward` returns one gradient tensor per
//! parameter, zero for parameters the loss does not depend on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::TagLattice;
use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Weighted row selections for [`Graph::embedding_bag`]: one bag per output
/// row, each a list of `(table row, weight)`.
pub type Bags = Vec<Vec<(usize, f64)>>;

/// Cached gradient of a fused CRF loss node.
#[derive(Debug)]
struct CrfCache {
    d_emissions: Vec<f64>,
    d_transitions: Vec<f64>,
    d_start: Vec<f64>,
    d_end: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Dropout(Var, Vec<f64>),
    LogSumExp(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    EmbeddingBag(Var, Bags),
    TakeLast(Var, Vec<usize>),
    CrfNll {
        emissions: Var,
        transitions: Var,
        start: Var,
        end: Var,
        cache: Box<CrfCache>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl Graph {
    /// An evaluation-mode graph: dropout is the identity.
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A training-mode graph whose dropout masks come from `seed`.
    pub fn train(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, &[])
    }

    /// A trainable leaf bound to parameter `id`.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("param"));
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Binds every tensor of `params` as a leaf; the result is indexed like
    /// the set.
    pub fn bind(&mut self, params: &ParamSet) -> Result<Vec<Var>> {
        params
            .tensors()
            .iter()
            .enumerate()
            .map(|(id, t)| self.param(id, t))
            .collect()
    }

    /// `a[..., k] · b[k, n]`; `a` is treated as a stack of rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(out_shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[g, m, k] · [g, k, n] -> [g, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        self.push("batch_matmul", value, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(shape_err("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        let value = permute_tensor(self.value(x), &axes);
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err("permute", self.shape(x), axes));
        }
        let value = permute_tensor(self.value(x), axes);
        self.push("permute", value, Op::Permute(x, axes.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// `a + b` where `b`'s shape equals `a`'s or a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let bd = self.value(b).data();
        let mut value = self.value(a).clone();
        let period = bd.len();
        if period > 0 {
            for chunk in value.data_mut().chunks_mut(period) {
                for (o, &v) in chunk.iter_mut().zip(bd) {
                    *o += v;
                }
            }
        }
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let bd = self.value(b).data();
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(bd) {
            *o *= v;
        }
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let w = value.last_dim();
        if w > 0 {
            for row in value.data_mut().chunks_mut(w) {
                softmax_row(row, None);
            }
        }
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Softmax over the last axis with masked-out columns forced to weight 0.
    ///
    /// `keep` holds one `[width]` mask per segment; consecutive groups of
    /// `rows_per_segment` rows share a segment.
    pub fn masked_softmax(
        &mut self,
        x: Var,
        keep: &[bool],
        rows_per_segment: usize,
    ) -> Result<Var> {
        let mut value = self.value(x).clone();
        let w = value.last_dim();
        let rows = value.rows();
        if w == 0 || rows_per_segment == 0 || keep.len() * rows_per_segment != rows * w {
            return Err(shape_err(
                "masked_softmax",
                value.shape(),
                &[keep.len(), rows_per_segment],
            ));
        }
        for (r, row) in value.data_mut().chunks_mut(w).enumerate() {
            let seg = r / rows_per_segment;
            softmax_row(row, Some(&keep[seg * w..(seg + 1) * w]));
        }
        self.push("masked_softmax", value, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut normalized = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let n = (row[j] - mean) * is;
                normalized[r * w + j] = n;
                out[r * w + j] = n * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push("layer_norm", value, op, &[x, gain, bias])
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Inverted dropout with drop probability `rate`; the identity in
    /// evaluation mode or when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!(
                "dropout rate {rate} must be below 1"
            )));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let mut value = self.value(x).clone();
        for (o, m) in value.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push("dropout", value, Op::Dropout(x, mask), &[x])
    }

    /// `ln Σ exp` over the last axis; the axis is removed from the shape.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        if w == 0 || xv.rank() == 0 {
            return Err(shape_err("logsumexp", xv.shape(), &[]));
        }
        let out: Vec<f64> = (0..xv.rows())
            .map(|r| crate::tensor::log_sum_exp(xv.row(r)))
            .collect();
        let value = Tensor::new(xv.shape()[..xv.rank() - 1].to_vec(), out)?;
        self.push("logsumexp", value, Op::LogSumExp(x), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// Rows `table[idx[i]]` stacked into `[idx.len(), width]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(shape_err("gather_rows", tv.shape(), &[]));
        }
        let (n, w) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= n {
                return Err(shape_err("gather_rows", tv.shape(), &[i]));
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), w], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows(table, idx.to_vec()),
            &[table],
        )
    }

    /// Weighted sums of table rows, one per bag: a sparse-by-dense product.
    pub fn embedding_bag(&mut self, table: Var, bags: Bags) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(shape_err("embedding_bag", tv.shape(), &[]));
        }
        let (n, w) = (tv.shape()[0], tv.shape()[1]);
        let mut out = vec![0.0; bags.len() * w];
        for (bag, row) in bags.iter().zip(out.chunks_mut(w.max(1))) {
            for &(i, weight) in bag {
                if i >= n {
                    return Err(shape_err("embedding_bag", tv.shape(), &[i]));
                }
                for (o, &t) in row.iter_mut().zip(tv.row(i)) {
                    *o += weight * t;
                }
            }
        }
        let value = Tensor::new(vec![bags.len(), w], out)?;
        self.push(
            "embedding_bag",
            value,
            Op::EmbeddingBag(table, bags),
            &[table],
        )
    }

    /// Gathers along the last axis with a per-row index matrix.
    ///
    /// `x` is `[g, m, r]` and `idx` is `[m, n]` (row-major) with values
    /// below `r`; the result is `[g, m, n]` with
    /// `out[g][i][j] = x[g][i][idx[i][j]]`.
    pub fn take_last(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || idx.len() != xs[1] * n || idx.iter().any(|&i| i >= xs[2]) {
            return Err(shape_err("take_last", &xs, &[idx.len(), n]));
        }
        let (g, m, r) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            for i in 0..m {
                let src = &xd[(gi * m + i) * r..(gi * m + i + 1) * r];
                let dst = &mut out[(gi * m + i) * n..(gi * m + i + 1) * n];
                for (d, &j) in dst.iter_mut().zip(&idx[i * n..(i + 1) * n]) {
                    *d = src[j];
                }
            }
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        self.push("take_last", value, Op::TakeLast(x, idx.to_vec()), &[x])
    }

    /// Mean CRF negative log-likelihood over a padded batch.
    ///
    /// `emissions` is `[batch, width, n_tags]`; sequence `b` occupies its
    /// first `lengths[b]` positions and `gold[b * width + t]` holds its tags.
    /// Positions past a sequence's length contribute nothing.
    pub fn crf_nll(
        &mut self,
        emissions: Var,
        transitions: Var,
        start: Var,
        end: Var,
        gold: &[usize],
        lengths: &[usize],
    ) -> Result<Var> {
        let es = self.shape(emissions).to_vec();
        if es.len() != 3 || es[0] != lengths.len() || gold.len() != es[0] * es[1] {
            return Err(shape_err("crf_nll", &es, &[lengths.len(), gold.len()]));
        }
        let (batch, width, k) = (es[0], es[1], es[2]);
        if self.shape(transitions) != [k, k] || self.shape(start) != [k] || self.shape(end) != [k] {
            return Err(shape_err("crf_nll", self.shape(transitions), &[k, k]));
        }
        if batch == 0 || lengths.iter().any(|&l| l == 0 || l > width) {
            return Err(Error::Invalid(
                "crf_nll needs sequences of length 1..=width".into(),
            ));
        }
        let trans = self.value(transitions).data().to_vec();
        let st = self.value(start).data().to_vec();
        let en = self.value(end).data().to_vec();
        let ed = self.value(emissions).data();
        let scale = 1.0 / batch as f64;
        let mut cache = CrfCache {
            d_emissions: vec![0.0; ed.len()],
            d_transitions: vec![0.0; k * k],
            d_start: vec![0.0; k],
            d_end: vec![0.0; k],
        };
        let mut total = 0.0;
        for (b, &len) in lengths.iter().enumerate() {
            let offset = b * width * k;
            let lattice = TagLattice::new(
                k,
                ed[offset..offset + len * k].to_vec(),
                trans.clone(),
                st.clone(),
                en.clone(),
            )?;
            let tags = &gold[b * width..b * width + len];
            let marg = lattice.marginals();
            total += marg.log_z - lattice.score_sequence(tags)?;

            // gradient = expected counts under the model - gold counts
            for (d, p) in cache.d_emissions[offset..offset + len * k]
                .iter_mut()
                .zip(&marg.unary)
            {
                *d += scale * p;
            }
            for (d, p) in cache.d_transitions.iter_mut().zip(&marg.pairwise) {
                *d += scale * p;
            }
            for t in 0..k {
                cache.d_start[t] += scale * marg.unary[t];
                cache.d_end[t] += scale * marg.unary[(len - 1) * k + t];
            }
            for (pos, &t) in tags.iter().enumerate() {
                cache.d_emissions[offset + pos * k + t] -= scale;
            }
            for pair in tags.windows(2) {
                cache.d_transitions[pair[0] * k + pair[1]] -= scale;
            }
            cache.d_start[tags[0]] -= scale;
            cache.d_end[tags[len - 1]] -= scale;
        }
        let value = Tensor::scalar(total * scale);
        let op = Op::CrfNll {
            emissions,
            transitions,
            start,
            end,
            cache: Box::new(cache),
        };
        self.push("crf_nll", value, op, &[emissions, transitions, start, end])
    }

    /// Reverse-mode pass from a scalar `loss`. Returns one gradient per
    /// tensor of `params`, zero where the loss does not depend on it.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<Vec<Tensor>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));
        let mut out: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.needs(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(Tensor::data_mut)
    }

    fn propagate(
        &self,
        node: &Node,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut [Tensor],
    ) -> Result<()> {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let target = out
                    .get_mut(*id)
                    .ok_or_else(|| Error::Invalid(format!("parameter {id} not in set")))?;
                if target.shape() != gy.shape() {
                    return Err(shape_err("backward param", target.shape(), gy.shape()));
                }
                for (o, v) in target.data_mut().iter_mut().zip(g) {
                    *o += v;
                }
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k.max(1);
                let bd = self.value(*b).data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    gemm_nt(g, bd, da, m, k, n);
                }
                let ad = self.value(*a).data();
                if let Some(db) = self.grad_buf(grads, *b) {
                    gemm_tn(ad, g, db, m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for i in 0..bs {
                        gemm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                let rank = gy.rank();
                let mut axes: Vec<usize> = (0..rank).collect();
                axes.swap(rank - 2, rank - 1);
                let back = permute_tensor(gy, &axes);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_into(dx, back.data());
                }
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_tensor(gy, &inverse);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_into(dx, back.data());
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    let period = db.len();
                    if period > 0 {
                        for chunk in g.chunks(period) {
                            add_into(db, chunk);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                let ad = self.value(*a).data();
                if let Some(db) = self.grad_buf(grads, *b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let w = y.last_dim();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * w..(r + 1) * w];
                        let inner = dot(yr, gr);
                        for j in 0..w {
                            dx[r * w + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let w = gy.last_dim();
                let rows = gy.rows();
                let gain_d = self.value(*gain).data();
                if let Some(dg) = self.grad_buf(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..w {
                            dg[j] += g[r * w + j] * normalized[r * w + j];
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *bias) {
                    for r in 0..rows {
                        add_into(db, &g[r * w..(r + 1) * w]);
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let mut dn = vec![0.0; w];
                    for r in 0..rows {
                        for j in 0..w {
                            dn[j] = g[r * w + j] * gain_d[j];
                        }
                        let nr = &normalized[r * w..(r + 1) * w];
                        let mean_dn = dn.iter().sum::<f64>() / w as f64;
                        let mean_dn_n = dot(&dn, nr) / w as f64;
                        for j in 0..w {
                            dx[r * w + j] += inv_std[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = gy.last_dim();
                let rows = gy.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(dp) = self.grad_buf(grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let lse = node.value.data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for r in 0..xv.rows() {
                        for (j, v) in xv.row(r).iter().enumerate() {
                            dx[r * w + j] += g[r] * (v - lse[r]).exp();
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::GatherRows(table, idx) => {
                let w = gy.last_dim();
                if let Some(dt) = self.grad_buf(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dt[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::EmbeddingBag(table, bags) => {
                let w = gy.last_dim();
                if let Some(dt) = self.grad_buf(grads, *table) {
                    for (r, bag) in bags.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        for &(i, weight) in bag {
                            for (d, gv) in dt[i * w..(i + 1) * w].iter_mut().zip(gr) {
                                *d += weight * gv;
                            }
                        }
                    }
                }
            }
            Op::TakeLast(x, idx) => {
                let xs = self.shape(*x);
                let (bs, m, r) = (xs[0], xs[1], xs[2]);
                let n = gy.last_dim();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for gi in 0..bs {
                        for i in 0..m {
                            let row = gi * m + i;
                            for (j, &col) in idx[i * n..(i + 1) * n].iter().enumerate() {
                                dx[row * r + col] += g[row * n + j];
                            }
                        }
                    }
                }
            }
            Op::CrfNll {
                emissions,
                transitions,
                start,
                end,
                cache,
            } => {
                let scale = g[0];
                let pairs = [
                    (*emissions, &cache.d_emissions),
                    (*transitions, &cache.d_transitions),
                    (*start, &cache.d_start),
                    (*end, &cache.d_end),
                ];
                for (v, local) in pairs {
                    if let Some(dv) = self.grad_buf(grads, v) {
                        for (d, l) in dv.iter_mut().zip(local.iter()) {
                            *d += scale * l;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_row(row: &mut [f64], keep: Option<&[bool]>) {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| kept(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut total = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        *v = if kept(j) { (*v - max).exp() } else { 0.0 };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Materializes a permutation of axes: output axis `i` is input axis `axes[i]`.
fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    if !src.is_empty() {
        let last = rank - 1;
        let mut index = vec![0usize; rank];
        loop {
            // inner axis in a tight loop
            let base: usize = (0..last).map(|i| index[i] * strides[i]).sum();
            for j in 0..out_shape[last] {
                out.push(src[base + j * strides[last]]);
            }
            let mut axis = last;
            loop {
                if axis == 0 {
                    return Tensor::new(out_shape, out).expect("permute preserves size");
                }
                axis -= 1;
                index[axis] += 1;
                if index[axis] < out_shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::eval();
        let eye = g
            .constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]))
            .unwrap();
        let a_val = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let a = g.constant(a_val.clone()).unwrap();
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y), &a_val);
    }

    #[test]
    fn logsumexp_of_zeros() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::vector(vec![0.0; 4])).unwrap();
        let y = g.logsumexp(x).unwrap();
        assert!((g.value(y).item() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::eval();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4, 5])).unwrap();
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn relu_gradient_at_negative_and_positive() {
        let mut params = ParamSet::new();
        params.push("x", Tensor::vector(vec![-1.0, 2.0]));
        let mut g = Graph::eval();
        let x = g.bind(&params).unwrap()[0];
        let r = g.relu(x).unwrap();
        let loss = g.sum(r).unwrap();
        let grads = g.backward(loss, &params).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut params = ParamSet::new();
        params.push("x", Tensor::vector(vec![0.0]));
        let mut g = Graph::eval();
        let x = g.bind(&params).unwrap()[0];
        let r = g.relu(x).unwrap();
        let loss = g.sum(r).unwrap();
        assert_eq!(g.backward(loss, &params).unwrap()[0].data(), &[0.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut params = ParamSet::new();
        params.push("used", Tensor::vector(vec![1.0, 2.0]));
        params.push("unused", Tensor::zeros(&[2, 2]));
        let mut g = Graph::eval();
        let v = g.bind(&params).unwrap();
        let loss = g.sum(v[0]).unwrap();
        let grads = g.backward(loss, &params).unwrap();
        assert_eq!(grads[1], Tensor::zeros(&[2, 2]));
        assert_eq!(grads[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut params = ParamSet::new();
        params.push("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::eval();
        let x = g.bind(&params).unwrap()[0];
        assert!(matches!(
            g.backward(x, &params),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::vector(vec![1e300])).unwrap();
        assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::eval();
        let x = g
            .constant(t(&[2, 4], &[1., 2., 3., 4., -5., 0., 5., 10.]))
            .unwrap();
        let gain = g.constant(Tensor::filled(&[4], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_in_training_zeroes_and_rescales() {
        let mut g = Graph::train(3);
        let x = g.constant(Tensor::filled(&[1000], 1.0)).unwrap();
        let y = g.dropout(x, 0.1).unwrap();
        let vals = g.value(y).data();
        let dropped = vals.iter().filter(|v| **v == 0.0).count();
        assert!(dropped > 50 && dropped < 150, "{dropped}");
        assert!(vals
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut g = Graph::eval();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let y = g.masked_softmax(x, &[true, false, true], 2).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            assert_eq!(row[1], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_matches_index_formula() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t(&[2, 3, 4], &data);
        let p = permute_tensor(&x, &[1, 2, 0]);
        assert_eq!(p.shape(), &[3, 4, 2]);
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..2 {
                    assert_eq!(p.data()[(i * 4 + j) * 2 + k], data[(k * 3 + i) * 4 + j]);
                }
            }
        }
    }

    #[test]
    fn take_last_gathers_by_row() {
        let mut g = Graph::eval();
        let x = g
            .constant(t(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]))
            .unwrap();
        let y = g.take_last(x, &[2, 0, 1, 1], 2).unwrap();
        assert_eq!(g.value(y).data(), &[3., 1., 5., 5.]);
    }

    #[test]
    fn crf_node_matches_lattice_nll() {
        let mut g = Graph::eval();
        let em = g.constant(Tensor::zeros(&[1, 2, 2])).unwrap();
        let tr = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let st = g.constant(Tensor::zeros(&[2])).unwrap();
        let en = g.constant(Tensor::zeros(&[2])).unwrap();
        let loss = g.crf_nll(em, tr, st, en, &[1, 0], &[2]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }
}
