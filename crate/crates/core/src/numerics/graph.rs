//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node arena is already a
//! topological order; `backward` walks it once in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::nn::Param;
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, softmax_in_place, sigmoid, Tensor};
use crate::asam::SuperpointPartition;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-supplied op: `(inputs, output, d_output) -> d_inputs`.
pub type CustomBackward = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Arc<[usize]> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, part: Arc<SuperpointPartition> },
    SegmentSum { x: Var, part: Arc<SuperpointPartition> },
    SegmentSoftmax { x: Var, part: Arc<SuperpointPartition> },
    NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    SinCos { x: Var, d: usize, base: f64 },
    SplitHeads { x: Var, heads: usize },
    MergeHeads(Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, bias: Option<Var>, probs: Tensor },
    ClampCols { x: Var, lo: Vec<f64>, hi: Vec<f64> },
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    BceProb { p: Var, target: Tensor, weight: Option<Tensor>, lo: f64, hi: f64 },
    BceLogits { x: Var, target: Tensor },
    CrossEntropy { x: Var, target: Vec<usize> },
    DiceRows { p: Var, target: Tensor },
    L1Rows { x: Var, target: Tensor },
    SquaredError { x: Var, target: Tensor },
    Custom { inputs: Vec<Var>, rule: Arc<CustomBackward> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass.
///
/// Parameters bound through [`Graph::param`] are deduplicated by name, so a
/// head shared across decoder layers accumulates one gradient.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    train: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that tracks parameter gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            train: true,
        }
    }

    /// Graph whose parameters are bound as constants; nothing is differentiable
    /// unless created with [`Graph::leaf`].
    pub fn inference() -> Self {
        Self {
            train: false,
            ..Self::new()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Softmax weights saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(p.name()) {
            return v;
        }
        let v = self.leaf(p.value().clone(), self.train);
        self.params.insert(p.name().to_string(), v);
        v
    }

    /// Makes later [`Graph::param`] calls for `name` resolve to `v`.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    /// Gradients of every bound parameter, keyed by parameter name.
    pub fn param_grads(&self, grads: &Gradients) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), n, k, m, &mut out);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (m, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt {n}x{k} by ({m}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; n * m];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), n, k, m, &mut out);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::MatMulNT(a, b), &[a, b]))
    }

    /// `x · w + b` for `x: n×c_in`, `w: c_in×c_out`, `b: c_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`m` row vector to every row of `x: n×m`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(b).len() != m {
            return Err(Error::shape(format!(
                "row bias of length {} for {n}x{m}",
                self.value(b).len()
            )));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::AddRow(x, b), &[x, b]))
    }

    /// Scales every row of `x: n×m` elementwise by a length-`m` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(g).len() != m {
            return Err(Error::shape("mul_row length mismatch"));
        }
        let gv = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &gg) in row.iter_mut().zip(gv) {
                *o *= gg;
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::MulRow(x, g), &[x, g]))
    }

    /// Scales row `i` of `x: n×m` by the scalar `w[i]` (`w: n×1`).
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(w).len() != n {
            return Err(Error::shape("mul_col length mismatch"));
        }
        let wv = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &ww) in out.chunks_mut(m).zip(wv) {
            for o in row.iter_mut() {
                *o *= ww;
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::MulCol(x, w), &[x, w]))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        self.push(t, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        if m > 0 {
            for row in out.chunks_mut(m) {
                softmax_in_place(row);
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::SoftmaxRows(x), &[x]))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for row in out.chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::LayerNorm { x, inv_std }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let n = self.value(xs[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.value(x).dims2()?;
            if r != n {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(n, total, out)?;
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if start + len > m {
            return Err(Error::shape("slice_cols out of range"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        let t = Tensor::matrix(n, len, out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    /// Row `i` of the output is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather index {bad} out of {r} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        Ok(self.push(t, Op::GatherRows { x, index }, &[x]))
    }

    // ---- segment (superpoint) kernels -----------------------------------

    fn check_partition(&self, x: Var, part: &SuperpointPartition) -> Result<(usize, usize)> {
        let (n, c) = self.value(x).dims2()?;
        if n != part.point_count() {
            return Err(Error::shape(format!(
                "{n} rows for a partition of {} points",
                part.point_count()
            )));
        }
        Ok((n, c))
    }

    /// Channel-wise max or mean over each superpoint's members.
    pub fn segment_pool(
        &mut self,
        x: Var,
        part: &Arc<SuperpointPartition>,
        mode: PoolMode,
    ) -> Result<Var> {
        let (_, c) = self.check_partition(x, part)?;
        let m = part.segment_count();
        let src = self.value(x).data();
        let mut out = vec![0.0; m * c];
        match mode {
            PoolMode::Max => {
                let mut argmax = vec![0usize; m * c];
                for (s, members) in part.members().iter().enumerate() {
                    for ch in 0..c {
                        let mut best = members[0];
                        for &p in &members[1..] {
                            if src[p * c + ch] > src[best * c + ch] {
                                best = p;
                            }
                        }
                        out[s * c + ch] = src[best * c + ch];
                        argmax[s * c + ch] = best;
                    }
                }
                let t = Tensor::matrix(m, c, out)?;
                Ok(self.push(t, Op::SegmentMax { x, argmax }, &[x]))
            }
            PoolMode::Mean => {
                for (s, members) in part.members().iter().enumerate() {
                    let orow = &mut out[s * c..(s + 1) * c];
                    for &p in members {
                        for (o, v) in orow.iter_mut().zip(&src[p * c..(p + 1) * c]) {
                            *o += v;
                        }
                    }
                    let inv = 1.0 / members.len() as f64;
                    orow.iter_mut().for_each(|o| *o *= inv);
                }
                let t = Tensor::matrix(m, c, out)?;
                Ok(self.push(
                    t,
                    Op::SegmentMean {
                        x,
                        part: part.clone(),
                    },
                    &[x],
                ))
            }
        }
    }

    /// Channel-wise sum over each superpoint's members.
    pub fn segment_sum(&mut self, x: Var, part: &Arc<SuperpointPartition>) -> Result<Var> {
        let (_, c) = self.check_partition(x, part)?;
        let m = part.segment_count();
        let src = self.value(x).data();
        let mut out = vec![0.0; m * c];
        for (s, members) in part.members().iter().enumerate() {
            let orow = &mut out[s * c..(s + 1) * c];
            for &p in members {
                for (o, v) in orow.iter_mut().zip(&src[p * c..(p + 1) * c]) {
                    *o += v;
                }
            }
        }
        let t = Tensor::matrix(m, c, out)?;
        Ok(self.push(
            t,
            Op::SegmentSum {
                x,
                part: part.clone(),
            },
            &[x],
        ))
    }

    /// Softmax of each column restricted to each superpoint's members.
    pub fn segment_softmax(&mut self, x: Var, part: &Arc<SuperpointPartition>) -> Result<Var> {
        let (n, c) = self.check_partition(x, part)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for members in part.members() {
            for ch in 0..c {
                let max = members
                    .iter()
                    .map(|&p| src[p * c + ch])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for &p in members {
                    let e = (src[p * c + ch] - max).exp();
                    out[p * c + ch] = e;
                    total += e;
                }
                for &p in members {
                    out[p * c + ch] /= total;
                }
            }
        }
        let t = Tensor::matrix(n, c, out)?;
        Ok(self.push(
            t,
            Op::SegmentSoftmax {
                x,
                part: part.clone(),
            },
            &[x],
        ))
    }

    /// L2-normalizes each row; rows with norm below `eps` are divided by `eps`.
    /// Returns the node and the number of guarded rows.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<(Var, usize)> {
        let (n, m) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        let mut guarded = 0;
        for row in out.chunks_mut(m) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < eps {
                guarded += 1;
            }
            let d = norm.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(norm);
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok((self.push(t, Op::NormalizeRows { x, norms, eps }, &[x]), guarded))
    }

    /// Sine-cosine lifting of every scalar of a `[rows, k]` input to `d` channels.
    pub fn sincos(&mut self, x: Var, d: usize, base: f64) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        let out = super::sincos_values(self.value(x).data(), d, base)?;
        let t = Tensor::matrix(n, k * d, out)?;
        Ok(self.push(t, Op::SinCos { x, d, base }, &[x]))
    }

    /// `[n, heads·c] -> [heads, n, c]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (n, w) = self.value(x).dims2()?;
        if heads == 0 || w % heads != 0 {
            return Err(Error::shape(format!("{heads} heads do not divide width {w}")));
        }
        let c = w / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * w];
        for h in 0..heads {
            for i in 0..n {
                out[(h * n + i) * c..(h * n + i + 1) * c]
                    .copy_from_slice(&src[i * w + h * c..i * w + (h + 1) * c]);
            }
        }
        let t = Tensor::new(vec![heads, n, c], out)?;
        Ok(self.push(t, Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[heads, n, c] -> [n, heads·c]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let (heads, n, c) = self.value(x).dims3()?;
        let w = heads * c;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * w];
        for h in 0..heads {
            for i in 0..n {
                out[i * w + h * c..i * w + (h + 1) * c]
                    .copy_from_slice(&src[(h * n + i) * c..(h * n + i + 1) * c]);
            }
        }
        let t = Tensor::matrix(n, w, out)?;
        Ok(self.push(t, Op::MergeHeads(x), &[x]))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [h,n,c]`, `k, v: [h,m,c]`, optional additive `bias: [h,n,m]` and
    /// `mask` (`n·m` flags, `true` = may attend). Masked positions get zero
    /// weight; a row with no allowed position attends everywhere.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (h, n, c) = self.value(q).dims3()?;
        let (hk, m, ck) = self.value(k).dims3()?;
        let (hv, mv, cv) = self.value(v).dims3()?;
        if hk != h || hv != h || ck != c || mv != m {
            return Err(Error::shape(format!(
                "attention q[{h},{n},{c}] k[{hk},{m},{ck}] v[{hv},{mv},{cv}]"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [h, n, m] {
                return Err(Error::shape(format!(
                    "attention bias {:?}, expected [{h},{n},{m}]",
                    self.value(b).shape()
                )));
            }
        }
        if let Some(mk) = mask {
            if mk.len() != n * m {
                return Err(Error::shape("attention mask size"));
            }
        }
        let scale = 1.0 / (c as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let bd = bias.map(|b| self.value(b).data());
        let mut probs = vec![0.0; h * n * m];
        let mut out = vec![0.0; h * n * cv];
        for hh in 0..h {
            let qh = &qd[hh * n * c..(hh + 1) * n * c];
            let kh = &kd[hh * m * c..(hh + 1) * m * c];
            let ph = &mut probs[hh * n * m..(hh + 1) * n * m];
            matmul_nt_into(qh, kh, n, c, m, ph);
            for i in 0..n {
                let row = &mut ph[i * m..(i + 1) * m];
                for (j, s) in row.iter_mut().enumerate() {
                    *s *= scale;
                    if let Some(bd) = bd {
                        *s += bd[(hh * n + i) * m + j];
                    }
                }
                let allowed = mask.map(|mk| &mk[i * m..(i + 1) * m]);
                match allowed {
                    Some(a) if a.iter().any(|&x| x) && !a.iter().all(|&x| x) => {
                        let max = row
                            .iter()
                            .zip(a)
                            .filter(|(_, &ok)| ok)
                            .map(|(s, _)| *s)
                            .fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for (s, &ok) in row.iter_mut().zip(a) {
                            *s = if ok { (*s - max).exp() } else { 0.0 };
                            total += *s;
                        }
                        row.iter_mut().for_each(|s| *s /= total);
                    }
                    _ => softmax_in_place(row),
                }
            }
            let vh = &vd[hh * m * cv..(hh + 1) * m * cv];
            matmul_into(ph, vh, n, m, cv, &mut out[hh * n * cv..(hh + 1) * n * cv]);
        }
        let t = Tensor::new(vec![h, n, cv], out)?;
        let probs = Tensor::new(vec![h, n, m], probs)?;
        let parents: Vec<Var> = [Some(q), Some(k), Some(v), bias].into_iter().flatten().collect();
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
            },
            &parents,
        ))
    }

    /// Clamps column `j` of `x: n×m` into `[lo[j], hi[j]]`.
    pub fn clamp_cols(&mut self, x: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if lo.len() != m || hi.len() != m {
            return Err(Error::shape("clamp bounds length"));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for j in 0..m {
                row[j] = row[j].clamp(lo[j], hi[j]);
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(
            t,
            Op::ClampCols {
                x,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::shape("weighted_sum of nothing"))?;
        let mut acc = Tensor::zeros(self.value(first.0).shape());
        for &(v, w) in terms {
            if self.value(v).shape() != acc.shape() {
                return Err(Error::shape("weighted_sum shape mismatch"));
            }
            for (a, x) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *a += w * x;
            }
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec()), &parents))
    }

    // ---- losses (mean-reduced scalars) ----------------------------------

    /// Binary cross-entropy on probabilities clamped to `[lo, hi]`.
    pub fn bce_prob(&mut self, p: Var, target: Tensor, lo: f64, hi: f64) -> Result<Var> {
        self.bce_prob_weighted(p, target, None, lo, hi)
    }

    /// [`Graph::bce_prob`] with an optional per-entry weight; the mean is
    /// still taken over the entry count.
    pub fn bce_prob_weighted(
        &mut self,
        p: Var,
        target: Tensor,
        weight: Option<Tensor>,
        lo: f64,
        hi: f64,
    ) -> Result<Var> {
        if self.value(p).shape() != target.shape() {
            return Err(Error::shape("bce_prob target shape"));
        }
        if weight.as_ref().is_some_and(|w| w.shape() != target.shape()) {
            return Err(Error::shape("bce_prob weight shape"));
        }
        let n = target.len().max(1) as f64;
        let total: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .enumerate()
            .map(|(i, (&x, &t))| {
                let q = x.clamp(lo, hi);
                let w = weight.as_ref().map_or(1.0, |w| w.data()[i]);
                -w * (t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceProb {
                p,
                target,
                weight,
                lo,
                hi,
            },
            &[p],
        ))
    }

    /// Binary cross-entropy on logits.
    pub fn bce_logits(&mut self, x: Var, target: Tensor) -> Result<Var> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::shape("bce_logits target shape"));
        }
        let n = target.len().max(1) as f64;
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| bce_logit_value(z, t))
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::BceLogits { x, target }, &[x]))
    }

    /// Softmax cross-entropy of each logit row against a class index.
    pub fn cross_entropy(&mut self, x: Var, target: Vec<usize>) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if target.len() != n || target.iter().any(|&t| t >= c) {
            return Err(Error::shape("cross_entropy targets"));
        }
        let src = self.value(x).data();
        let mut total = 0.0;
        for (i, &t) in target.iter().enumerate() {
            total += -log_softmax_at(&src[i * c..(i + 1) * c], t);
        }
        Ok(self.push(
            Tensor::scalar(total / n.max(1) as f64),
            Op::CrossEntropy { x, target },
            &[x],
        ))
    }

    /// Mean over rows of the smoothed soft-dice loss.
    pub fn dice_rows(&mut self, p: Var, target: Tensor) -> Result<Var> {
        let (g, m) = self.value(p).dims2()?;
        if target.shape() != [g, m] {
            return Err(Error::shape("dice target shape"));
        }
        let src = self.value(p).data();
        let total: f64 = (0..g)
            .map(|r| {
                super::dice_value(&src[r * m..(r + 1) * m], &target.data()[r * m..(r + 1) * m])
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / g.max(1) as f64),
            Op::DiceRows { p, target },
            &[p],
        ))
    }

    /// Mean over rows of the L1 distance to `target`.
    pub fn l1_rows(&mut self, x: Var, target: Tensor) -> Result<Var> {
        let (g, _) = self.value(x).dims2()?;
        if self.value(x).shape() != target.shape() {
            return Err(Error::shape("l1 target shape"));
        }
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / g.max(1) as f64),
            Op::L1Rows { x, target },
            &[x],
        ))
    }

    /// Mean squared error.
    pub fn squared_error(&mut self, x: Var, target: Tensor) -> Result<Var> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::shape("squared_error target shape"));
        }
        let n = target.len().max(1) as f64;
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::SquaredError { x, target },
            &[x],
        ))
    }

    /// Records an op whose forward value is computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Arc<CustomBackward>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
    }

    fn backward_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().unwrap();
                let m = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_nt_into(gd, self.value(*b).data(), n, m, k, &mut da);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_tn_into(self.value(*a).data(), gd, n, k, m, &mut db);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = self.value(*a).dims2().unwrap();
                let m = self.value(*b).rows();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_into(gd, self.value(*b).data(), n, m, k, &mut da);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; m * k];
                    matmul_tn_into(gd, self.value(*a).data(), n, m, k, &mut db);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(vb).map(|(g, x)| g * x).collect();
                let db = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, gy.clone());
                if self.requires_grad(*b) {
                    let m = y.cols();
                    let mut db = vec![0.0; m];
                    for row in gd.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::MulRow(x, g) => {
                let m = y.cols();
                let gv = self.value(*g).data();
                let xv = self.value(*x).data();
                if self.requires_grad(*x) {
                    let dx = gd
                        .chunks(m)
                        .flat_map(|row| row.iter().zip(gv).map(|(a, b)| a * b))
                        .collect();
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.requires_grad(*g) {
                    let mut dg = vec![0.0; m];
                    for (grow, xrow) in gd.chunks(m).zip(xv.chunks(m)) {
                        for j in 0..m {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *g, self.like(*g, dg));
                }
            }
            Op::MulCol(x, w) => {
                let m = y.cols();
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                if self.requires_grad(*x) {
                    let dx = gd
                        .chunks(m)
                        .zip(wv)
                        .flat_map(|(row, &ww)| row.iter().map(move |g| g * ww))
                        .collect();
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.requires_grad(*w) {
                    let dw = gd
                        .chunks(m)
                        .zip(xv.chunks(m))
                        .map(|(grow, xrow)| grow.iter().zip(xrow).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
            }
            Op::Affine(x, s) => self.accumulate(grads, *x, gy.map(|g| g * s)),
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = gd
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SoftmaxRows(x) => {
                let m = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((drow, grow), prow) in dx.chunks_mut(m).zip(gd.chunks(m)).zip(y.data().chunks(m)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                    for j in 0..m {
                        drow[j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::LayerNorm { x, inv_std } => {
                let m = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, ((drow, grow), yrow)) in dx
                    .chunks_mut(m)
                    .zip(gd.chunks(m))
                    .zip(y.data().chunks(m))
                    .enumerate()
                {
                    let mean_g = grow.iter().sum::<f64>() / m as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(g, v)| g * v).sum::<f64>() / m as f64;
                    for j in 0..m {
                        drow[j] = inv_std[r] * (grow[j] - mean_g - yrow[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::ConcatCols(xs) => {
                let n = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    if self.requires_grad(x) {
                        let mut dx = Vec::with_capacity(n * w);
                        for r in 0..n {
                            dx.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, x, self.like(x, dx));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, m) = self.value(*x).dims2().unwrap();
                let len = y.cols();
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    dx[r * m + start..r * m + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::GatherRows { x, index } => {
                let c = y.cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += gd[r * c + j];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SegmentMax { x, argmax } => {
                let c = y.cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (idx, &p) in argmax.iter().enumerate() {
                    dx[p * c + idx % c] += gd[idx];
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SegmentMean { x, part } | Op::SegmentSum { x, part } => {
                let mean = matches!(node.op, Op::SegmentMean { .. });
                let c = y.cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (s, members) in part.members().iter().enumerate() {
                    let w = if mean { 1.0 / members.len() as f64 } else { 1.0 };
                    for &p in members {
                        for j in 0..c {
                            dx[p * c + j] = gd[s * c + j] * w;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SegmentSoftmax { x, part } => {
                let c = y.cols();
                let pv = y.data();
                let mut dx = vec![0.0; pv.len()];
                for members in part.members() {
                    for j in 0..c {
                        let dot: f64 = members.iter().map(|&p| gd[p * c + j] * pv[p * c + j]).sum();
                        for &p in members {
                            dx[p * c + j] = pv[p * c + j] * (gd[p * c + j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::NormalizeRows { x, norms, eps } => {
                let m = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, ((drow, grow), yrow)) in dx
                    .chunks_mut(m)
                    .zip(gd.chunks(m))
                    .zip(y.data().chunks(m))
                    .enumerate()
                {
                    if norms[r] < *eps {
                        for j in 0..m {
                            drow[j] = grow[j] / eps;
                        }
                    } else {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, v)| g * v).sum();
                        for j in 0..m {
                            drow[j] = (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SinCos { x, d, base } => {
                let xv = self.value(*x).data();
                let half = d / 2;
                let mut dx = vec![0.0; xv.len()];
                for (idx, &v) in xv.iter().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..half {
                        let inv = 1.0 / base.powf(2.0 * j as f64 / *d as f64);
                        let a = v * inv;
                        let o = idx * d + 2 * j;
                        acc += gd[o] * a.cos() * inv - gd[o + 1] * a.sin() * inv;
                    }
                    dx[idx] = acc;
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SplitHeads { x, heads } => {
                let (n, w) = self.value(*x).dims2().unwrap();
                let c = w / heads;
                let mut dx = vec![0.0; n * w];
                for h in 0..*heads {
                    for r in 0..n {
                        dx[r * w + h * c..r * w + (h + 1) * c]
                            .copy_from_slice(&gd[(h * n + r) * c..(h * n + r + 1) * c]);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::MergeHeads(x) => {
                let (heads, n, c) = self.value(*x).dims3().unwrap();
                let w = heads * c;
                let mut dx = vec![0.0; heads * n * c];
                for h in 0..heads {
                    for r in 0..n {
                        dx[(h * n + r) * c..(h * n + r + 1) * c]
                            .copy_from_slice(&gd[r * w + h * c..r * w + (h + 1) * c]);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
            } => self.attention_backward(gd, *q, *k, *v, *bias, probs, grads),
            Op::ClampCols { x, lo, hi } => {
                let m = y.cols();
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .enumerate()
                    .map(|(idx, (g, &v))| {
                        let j = idx % m;
                        if v >= lo[j] && v <= hi[j] {
                            *g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Sum(x) => {
                let g = gy.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, gy.map(|g| g * w));
                }
            }
            Op::BceProb {
                p,
                target,
                weight,
                lo,
                hi,
            } => {
                let g = gy.item() / target.len().max(1) as f64;
                let dx = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (&x, &t))| {
                        if x < *lo || x > *hi {
                            0.0
                        } else {
                            let w = weight.as_ref().map_or(1.0, |w| w.data()[i]);
                            w * g * (x - t) / (x * (1.0 - x))
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, self.like(*p, dx));
            }
            Op::BceLogits { x, target } => {
                let g = gy.item() / target.len().max(1) as f64;
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &t)| g * (sigmoid(z) - t))
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::CrossEntropy { x, target } => {
                let (n, c) = self.value(*x).dims2().unwrap();
                let g = gy.item() / n.max(1) as f64;
                let mut dx = self.value(*x).data().to_vec();
                for (r, &t) in target.iter().enumerate() {
                    let row = &mut dx[r * c..(r + 1) * c];
                    softmax_in_place(row);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g);
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::DiceRows { p, target } => {
                let (rows, m) = self.value(*p).dims2().unwrap();
                let g = gy.item() / rows.max(1) as f64;
                let pv = self.value(*p).data();
                let tv = target.data();
                let mut dx = vec![0.0; pv.len()];
                for r in 0..rows {
                    let pr = &pv[r * m..(r + 1) * m];
                    let tr = &tv[r * m..(r + 1) * m];
                    let a = 2.0 * pr.iter().zip(tr).map(|(x, t)| x * t).sum::<f64>() + 1.0;
                    let b = pr.iter().sum::<f64>() + tr.iter().sum::<f64>() + 1.0;
                    for j in 0..m {
                        dx[r * m + j] = -g * (2.0 * tr[j] * b - a) / (b * b);
                    }
                }
                self.accumulate(grads, *p, self.like(*p, dx));
            }
            Op::L1Rows { x, target } => {
                let g = gy.item() / self.value(*x).rows().max(1) as f64;
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| {
                        if a > b {
                            g
                        } else if a < b {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SquaredError { x, target } => {
                let g = gy.item() / target.len().max(1) as f64;
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| 2.0 * g * (a - b))
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let dins = rule(&vals, y, gy);
                for (&v, d) in inputs.iter().zip(dins) {
                    self.accumulate(grads, v, d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gd: &[f64],
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        probs: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (h, n, c) = self.value(q).dims3().unwrap();
        let (_, m, cv) = self.value(v).dims3().unwrap();
        let scale = 1.0 / (c as f64).sqrt();
        let (qd, kd, vd, pd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            probs.data(),
        );
        let mut dq = vec![0.0; h * n * c];
        let mut dk = vec![0.0; h * m * c];
        let mut dv = vec![0.0; h * m * cv];
        let mut ds = vec![0.0; h * n * m];
        for hh in 0..h {
            let go = &gd[hh * n * cv..(hh + 1) * n * cv];
            let ph = &pd[hh * n * m..(hh + 1) * n * m];
            let vh = &vd[hh * m * cv..(hh + 1) * m * cv];
            matmul_tn_into(ph, go, n, m, cv, &mut dv[hh * m * cv..(hh + 1) * m * cv]);
            let dsh = &mut ds[hh * n * m..(hh + 1) * n * m];
            // dP = dO · Vᵀ, then the softmax Jacobian.
            matmul_nt_into(go, vh, n, cv, m, dsh);
            for i in 0..n {
                let prow = &ph[i * m..(i + 1) * m];
                let drow = &mut dsh[i * m..(i + 1) * m];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(p, d)| p * d).sum();
                for j in 0..m {
                    drow[j] = prow[j] * (drow[j] - dot);
                }
            }
            let qh = &qd[hh * n * c..(hh + 1) * n * c];
            let kh = &kd[hh * m * c..(hh + 1) * m * c];
            matmul_into(dsh, kh, n, m, c, &mut dq[hh * n * c..(hh + 1) * n * c]);
            matmul_tn_into(dsh, qh, n, m, c, &mut dk[hh * m * c..(hh + 1) * m * c]);
        }
        dq.iter_mut().for_each(|x| *x *= scale);
        dk.iter_mut().for_each(|x| *x *= scale);
        self.accumulate(grads, q, self.like(q, dq));
        self.accumulate(grads, k, self.like(k, dk));
        self.accumulate(grads, v, self.like(v, dv));
        if let Some(b) = bias {
            self.accumulate(grads, b, self.like(b, ds));
        }
    }
}

pub(crate) fn bce_logit_value(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub(crate) fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}
