//! Relation-aware self-attention between instance queries.
//!
//! Each query's current mask is turned into an axis-aligned box. Pairwise
//! box relations (relative offsets scaled by extent, and log extent ratios)
//! are lifted with sine-cosine features and projected to one additive
//! attention bias per head.

use rand::Rng;

use crate::asam::SuperpointPartition;
use crate::error::{Error, Result};
use crate::numerics::nn::{LayerNorm, Linear, Module, Param};
use crate::numerics::{Graph, Tensor, Var, SINCOS_BASE};
use crate::scene::Scene;

/// Minimum box extent along every axis, in meters.
pub const MIN_EXTENT: f64 = 1e-4;
/// Relation channels per query pair.
pub const RELATION_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub center: [f64; 3],
    pub extent: [f64; 3],
}

impl BBox {
    /// Box spanning `lo..hi`, extents clamped to [`MIN_EXTENT`].
    pub fn from_bounds(lo: [f64; 3], hi: [f64; 3]) -> Self {
        Self {
            center: [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a])),
            extent: [0, 1, 2].map(|a| (hi[a] - lo[a]).max(MIN_EXTENT)),
        }
    }

    pub fn point(center: [f64; 3]) -> Self {
        Self {
            center,
            extent: [MIN_EXTENT; 3],
        }
    }
}

/// Bounds of the points in superpoints whose mask probability exceeds
/// `threshold`; an empty selection yields a minimal box at `query_pos`.
pub fn mask_to_bbox(
    mask_prob: &[f64],
    part: &SuperpointPartition,
    scene: &Scene,
    threshold: f64,
    query_pos: [f64; 3],
) -> BBox {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for (s, members) in part.members().iter().enumerate() {
        if mask_prob[s] <= threshold {
            continue;
        }
        any = true;
        for &i in members {
            let p = scene.positions()[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    if any {
        BBox::from_bounds(lo, hi)
    } else {
        BBox::point(query_pos)
    }
}

/// `K×K×6` pairwise relations: three extent-scaled offsets, three log
/// extent ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationTensor {
    values: Tensor,
}

impl RelationTensor {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let k = self.len();
        &self.values.data()[(i * k + j) * RELATION_CHANNELS..(i * k + j + 1) * RELATION_CHANNELS]
    }
}

pub fn relation_tensor(boxes: &[BBox]) -> RelationTensor {
    let k = boxes.len();
    let mut data = Vec::with_capacity(k * k * RELATION_CHANNELS);
    for bi in boxes {
        for bj in boxes {
            for a in 0..3 {
                data.push(((bi.center[a] - bj.center[a]).abs() / bi.extent[a] + 1.0).ln());
            }
            for a in 0..3 {
                data.push((bi.extent[a] / bj.extent[a]).ln());
            }
        }
    }
    RelationTensor {
        values: Tensor::new(vec![k, k, RELATION_CHANNELS], data).expect("sized"),
    }
}

/// Bias projection plus the usual attention projections and output norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RsaParams {
    pub heads: usize,
    pub relation: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: LayerNorm,
}

impl RsaParams {
    /// `d` is the sine-cosine width per relation channel.
    pub fn new<R: Rng>(name: &str, width: usize, heads: usize, d: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Self {
            heads,
            relation: Linear::new(&format!("{name}.relation"), RELATION_CHANNELS * d, heads, rng),
            query: Linear::new(&format!("{name}.query"), width, width, rng),
            key: Linear::new(&format!("{name}.key"), width, width, rng),
            value: Linear::new(&format!("{name}.value"), width, width, rng),
            output: Linear::new(&format!("{name}.output"), width, width, rng),
            norm: LayerNorm::new(&format!("{name}.norm"), width),
        })
    }

    /// Sine-cosine width the relation projection expects.
    pub fn lift_width(&self) -> usize {
        self.relation.in_dim() / RELATION_CHANNELS
    }
}

impl Module for RsaParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.relation.visit(f);
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.relation.visit_mut(f);
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

/// Records the `[H, K, K]` bias for relation tensor `t`.
pub fn relation_bias_graph(g: &mut Graph, t: &RelationTensor, p: &RsaParams) -> Result<Var> {
    let k = t.len();
    let flat = g.constant(t.values.clone().reshape(vec![k * k, RELATION_CHANNELS])?);
    let lifted = g.sincos(flat, p.lift_width(), SINCOS_BASE)?;
    let per_pair = p.relation.forward(g, lifted)?;
    let per_head = g.split_heads(per_pair, p.heads)?;
    g.reshape(per_head, vec![p.heads, k, k])
}

pub fn relation_bias(t: &RelationTensor, p: &RsaParams) -> Result<Tensor> {
    let mut g = Graph::inference();
    let b = relation_bias_graph(&mut g, t, p)?;
    Ok(g.value(b).clone())
}

/// Output of [`rsa_graph`]: updated queries and the attention node, whose
/// saved weights feed attention statistics.
#[derive(Clone, Copy, Debug)]
pub struct RsaOutput {
    pub queries: Var,
    pub attention: Var,
}

/// Records `LN(Q + W_o·MHA(Q; bias))`; without `relation` the bias is omitted.
pub fn rsa_graph(
    g: &mut Graph,
    queries: Var,
    relation: Option<&RelationTensor>,
    p: &RsaParams,
) -> Result<RsaOutput> {
    let k = g.value(queries).rows();
    if let Some(t) = relation {
        if t.len() != k {
            return Err(Error::shape(format!("{} boxes for {k} queries", t.len())));
        }
    }
    let bias = relation.map(|t| relation_bias_graph(g, t, p)).transpose()?;
    let q = p.query.forward(g, queries)?;
    let kk = p.key.forward(g, queries)?;
    let v = p.value.forward(g, queries)?;
    let q = g.split_heads(q, p.heads)?;
    let kk = g.split_heads(kk, p.heads)?;
    let v = g.split_heads(v, p.heads)?;
    let attention = g.attention(q, kk, v, bias, None)?;
    let merged = g.merge_heads(attention)?;
    let projected = p.output.forward(g, merged)?;
    let residual = g.add(queries, projected)?;
    Ok(RsaOutput {
        queries: p.norm.forward(g, residual)?,
        attention,
    })
}

/// Value-level relation-aware self-attention over `q` with boxes `boxes`.
pub fn rsa_forward(q: &Tensor, boxes: &[BBox], p: &RsaParams) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(q.clone());
    let t = relation_tensor(boxes);
    let out = rsa_graph(&mut g, x, Some(&t), p)?;
    Ok(g.value(out.queries).clone())
}
