//! The query decoder: a point-wise encoder, superpoint aggregation, and a
//! stack of layers that alternate masked cross-attention, relation-aware
//! self-attention, a feed-forward block and a query position update.
//! Superpoint features are refined against the queries every
//! `refine_every` layers. Every layer (plus the initial queries) emits a
//! prediction for deep supervision.

mod blocks;
mod checkpoint;
mod config;

pub use blocks::{Attended, CrossAttention, FeedForward};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::DecoderConfig;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asam::{asam_graph, AsamParams, SuperpointPartition};
use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, Mlp, Module, Param};
use crate::numerics::{sigmoid, Graph, PoolMode, Tensor, Var, SINCOS_BASE};
use crate::rsa::{mask_to_bbox, relation_tensor, rsa_graph, BBox, RsaParams};
use crate::scene::Scene;

/// Per-point encoder input: unit-cube position, color, normal.
pub const INPUT_CHANNELS: usize = 9;

/// One decoder layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub cross: CrossAttention,
    /// Sine-cosine query position → width `C`, added to the attention queries.
    pub query_pos: Linear,
    /// Sine-cosine superpoint centroid → width `C`, added to the keys.
    pub key_pos: Linear,
    pub rsa: RsaParams,
    pub ffn: FeedForward,
    /// Query content → world-space position delta.
    pub position: Linear,
}

impl Module for DecoderLayer {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.cross.visit(f);
        self.query_pos.visit(f);
        self.key_pos.visit(f);
        self.rsa.visit(f);
        self.ffn.visit(f);
        self.position.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.cross.visit_mut(f);
        self.query_pos.visit_mut(f);
        self.key_pos.visit_mut(f);
        self.rsa.visit_mut(f);
        self.ffn.visit_mut(f);
        self.position.visit_mut(f);
    }
}

/// Superpoints attend to queries, then a feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineBlock {
    pub attention: CrossAttention,
    pub ffn: FeedForward,
}

impl Module for RefineBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.attention.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.attention.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

/// Prediction heads shared by all layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub class: Linear,
    pub mask: Linear,
    pub score: Linear,
}

impl Module for Heads {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.class.visit(f);
        self.mask.visit(f);
        self.score.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.class.visit_mut(f);
        self.mask.visit_mut(f);
        self.score.visit_mut(f);
    }
}

/// Every parameter of the decoder, plus the configuration that shaped it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: DecoderConfig,
    pub encoder: Mlp,
    pub asam: AsamParams,
    pub query_content: Param,
    /// Query positions in the scene's unit cube.
    pub query_unit: Param,
    pub layers: Vec<DecoderLayer>,
    pub refine: Vec<RefineBlock>,
    pub heads: Heads,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, d) = (config.width, config.heads, config.sincos_width);
        let encoder = Mlp::new("encoder", &[INPUT_CHANNELS, c, c], &mut rng);
        let asam = AsamParams::new("asam", c, &mut rng);
        let query_content = Param::new("query.content", Tensor::uniform(&[config.queries, c], 1.0, &mut rng));
        let unit: Vec<f64> = (0..config.queries * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let query_unit = Param::new("query.unit", Tensor::matrix(config.queries, 3, unit)?);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = format!("layer{l}");
            let mut position = Linear::new(&format!("{name}.position"), c, 3, &mut rng);
            position.zero();
            layers.push(DecoderLayer {
                cross: CrossAttention::new(&format!("{name}.cross"), c, h, &mut rng),
                query_pos: Linear::new(&format!("{name}.query_pos"), 3 * d, c, &mut rng),
                key_pos: Linear::new(&format!("{name}.key_pos"), 3 * d, c, &mut rng),
                rsa: RsaParams::new(&format!("{name}.rsa"), c, h, d, &mut rng)?,
                ffn: FeedForward::new(&format!("{name}.ffn"), c, &mut rng),
                position,
            });
        }
        let stages = config.layers / config.refine_every;
        let refine = (0..stages)
            .map(|s| RefineBlock {
                attention: CrossAttention::new(&format!("refine{s}.attention"), c, h, &mut rng),
                ffn: FeedForward::new(&format!("refine{s}.ffn"), c, &mut rng),
            })
            .collect();
        let heads = Heads {
            class: Linear::new("head.class", c, config.category_count + 1, &mut rng),
            mask: Linear::new("head.mask", c, c, &mut rng),
            score: Linear::new("head.score", c, 1, &mut rng),
        };
        Ok(Self {
            config,
            encoder,
            asam,
            query_content,
            query_unit,
            layers,
            refine,
            heads,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Switches that do not change the parameter set (the three module
    /// toggles) may be flipped on an existing model.
    pub fn with_switches(mut self, use_asam: bool, use_rsa: bool, use_clsr: bool) -> Self {
        self.config.use_asam = use_asam;
        self.config.use_rsa = use_rsa;
        self.config.use_clsr = use_clsr;
        self
    }

    /// Records the full decoder for one scene.
    pub fn forward_graph(&self, g: &mut Graph, input: &SceneInput) -> Result<DecoderVars> {
        let cfg = &self.config;
        if input.scene.category_count() > cfg.category_count {
            return Err(Error::Contract(format!(
                "scene has {} categories, model predicts {}",
                input.scene.category_count(),
                cfg.category_count
            )));
        }
        let part = &input.partition;
        let points = g.constant(input.point_features.clone());
        let encoded = self.encoder.forward(g, points)?;
        let mut features = if cfg.use_asam {
            asam_graph(g, encoded, part, &self.asam)?
        } else {
            g.segment_pool(encoded, part, PoolMode::Mean)?
        };
        let mut taps = Vec::new();
        if cfg.use_clsr {
            taps.push(features);
        }
        let centroid_lift = g.constant(input.centroid_lift.clone());

        let mut queries = g.param(&self.query_content);
        let unit = g.param(&self.query_unit);
        let mut world = self.world_positions(g, unit, input)?;
        let mut predictions = vec![self.predict_graph(g, queries, features, world)?];
        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        let mut refinements = 0;

        for (l, layer) in self.layers.iter().enumerate() {
            let prev = predictions.last().expect("layer 0 exists");
            let probs = g.value(prev.mask_logits).map(sigmoid);
            let allowed: Vec<bool> = probs.data().iter().map(|&p| p > cfg.mask_threshold).collect();

            let lift = g.sincos(world, cfg.sincos_width, SINCOS_BASE)?;
            let qpos = layer.query_pos.forward(g, lift)?;
            let kpos = layer.key_pos.forward(g, centroid_lift)?;
            let crossed = layer.cross.forward(g, queries, Some(qpos), features, Some(kpos), Some(&allowed))?;
            cross_attention.push(crossed.attention);

            let relation = if cfg.use_rsa {
                let boxes = query_boxes(&probs, g.value(world), input, cfg.mask_threshold);
                Some(relation_tensor(&boxes))
            } else {
                None
            };
            let related = rsa_graph(g, crossed.out, relation.as_ref(), &layer.rsa)?;
            self_attention.push(related.attention);
            queries = layer.ffn.forward(g, related.queries)?;

            let delta = layer.position.forward(g, queries)?;
            let moved = g.add(world, delta)?;
            world = g.clamp_cols(moved, &input.lo, &input.hi)?;

            predictions.push(self.predict_graph(g, queries, features, world)?);

            if cfg.use_clsr && (l + 1) % cfg.refine_every == 0 {
                let block = &self.refine[refinements];
                features = refine_graph(g, block, features, queries)?;
                taps.push(features);
                refinements += 1;
            }
        }
        Ok(DecoderVars {
            predictions,
            taps,
            self_attention,
            cross_attention,
            refinements,
        })
    }

    fn world_positions(&self, g: &mut Graph, unit: Var, input: &SceneInput) -> Result<Var> {
        let range: Vec<f64> = (0..3).map(|a| input.hi[a] - input.lo[a]).collect();
        let range = g.constant(Tensor::vector(range));
        let lo = g.constant(Tensor::vector(input.lo.to_vec()));
        let scaled = g.mul_row(unit, range)?;
        let shifted = g.add_row(scaled, lo)?;
        g.clamp_cols(shifted, &input.lo, &input.hi)
    }

    fn predict_graph(&self, g: &mut Graph, queries: Var, features: Var, world: Var) -> Result<PredictionVars> {
        let class_logits = self.heads.class.forward(g, queries)?;
        let embed = self.heads.mask.forward(g, queries)?;
        let mask_logits = g.matmul_nt(embed, features)?;
        let score_logit = self.heads.score.forward(g, queries)?;
        Ok(PredictionVars {
            class_logits,
            mask_logits,
            score: g.sigmoid(score_logit),
            center: world,
        })
    }
}

impl Module for Model {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.asam.visit(f);
        f(&self.query_content);
        f(&self.query_unit);
        self.layers.iter().for_each(|l| l.visit(f));
        self.refine.iter().for_each(|r| r.visit(f));
        self.heads.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.asam.visit_mut(f);
        f(&mut self.query_content);
        f(&mut self.query_unit);
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
        self.refine.iter_mut().for_each(|r| r.visit_mut(f));
        self.heads.visit_mut(f);
    }
}

/// Boxes of every query's thresholded mask; empty masks sit at the query.
fn query_boxes(probs: &Tensor, world: &Tensor, input: &SceneInput, threshold: f64) -> Vec<BBox> {
    (0..probs.rows())
        .map(|k| {
            let w = world.row(k);
            mask_to_bbox(probs.row(k), &input.partition, input.scene, threshold, [w[0], w[1], w[2]])
        })
        .collect()
}

/// Records one superpoint refinement: superpoints query the instance queries.
pub fn refine_graph(g: &mut Graph, block: &RefineBlock, features: Var, queries: Var) -> Result<Var> {
    let attended = block.attention.forward(g, features, None, queries, None, None)?;
    block.ffn.forward(g, attended.out)
}

/// Scene-dependent constants of a forward pass.
#[derive(Clone, Debug)]
pub struct SceneInput<'a> {
    pub scene: &'a Scene,
    pub partition: Arc<SuperpointPartition>,
    /// `N × INPUT_CHANNELS`.
    pub point_features: Tensor,
    /// Sine-cosine lift of superpoint centroids, `M × 3d`.
    pub centroid_lift: Tensor,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl<'a> SceneInput<'a> {
    pub fn new(scene: &'a Scene, config: &DecoderConfig) -> Result<Self> {
        let (lo, hi) = scene.bounds();
        let centroids: Vec<f64> = scene.superpoint_centroids().into_iter().flatten().collect();
        let centroids = Tensor::matrix(scene.superpoint_count(), 3, centroids)?;
        Ok(Self {
            scene,
            partition: Arc::new(SuperpointPartition::from_scene(scene)),
            point_features: point_inputs(scene),
            centroid_lift: crate::numerics::sincos_encode(&centroids, config.sincos_width, SINCOS_BASE)?,
            lo,
            hi,
        })
    }
}

/// Encoder input rows: position scaled into the unit cube (flat axes map to
/// 0), then color and normal, zero when absent.
pub fn point_inputs(scene: &Scene) -> Tensor {
    let (lo, hi) = scene.bounds();
    let mut data = Vec::with_capacity(scene.len() * INPUT_CHANNELS);
    for i in 0..scene.len() {
        let p = scene.positions()[i];
        for a in 0..3 {
            let range = hi[a] - lo[a];
            data.push(if range > 0.0 { (p[a] - lo[a]) / range } else { 0.0 });
        }
        data.extend_from_slice(&scene.colors().map_or([0.0; 3], |c| c[i]));
        data.extend_from_slice(&scene.normals().map_or([0.0; 3], |n| n[i]));
    }
    Tensor::matrix(scene.len(), INPUT_CHANNELS, data).expect("sized")
}

/// Graph handles of one layer's prediction.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `K × (categories + 1)`, last column = no object.
    pub class_logits: Var,
    /// `K × M`.
    pub mask_logits: Var,
    /// `K × 1`, in `[0, 1]`.
    pub score: Var,
    /// `K × 3`, world coordinates.
    pub center: Var,
}

/// Everything [`Model::forward_graph`] records.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    /// Layer 0 (initial queries) through layer `L`.
    pub predictions: Vec<PredictionVars>,
    /// Superpoint features after aggregation and after each refinement.
    pub taps: Vec<Var>,
    /// Relation-aware self-attention node of every layer.
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
    pub refinements: usize,
}

/// One layer's predictions as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrediction {
    pub class_logits: Tensor,
    pub mask_logits: Tensor,
    pub score: Vec<f64>,
    pub center: Vec<[f64; 3]>,
}

impl LayerPrediction {
    pub fn from_vars(g: &Graph, v: &PredictionVars) -> Self {
        let center = g.value(v.center);
        Self {
            class_logits: g.value(v.class_logits).clone(),
            mask_logits: g.value(v.mask_logits).clone(),
            score: g.value(v.score).data().to_vec(),
            center: (0..center.rows())
                .map(|k| [center.get2(k, 0), center.get2(k, 1), center.get2(k, 2)])
                .collect(),
        }
    }

    pub fn query_count(&self) -> usize {
        self.class_logits.rows()
    }

    /// Class probabilities of query `k` (softmax of its logits).
    pub fn class_probs(&self, k: usize) -> Vec<f64> {
        let row = self.class_logits.row(k);
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - top).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn mask_probs(&self, k: usize) -> Vec<f64> {
        self.mask_logits.row(k).iter().map(|&v| sigmoid(v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.class_logits.is_finite()
            && self.mask_logits.is_finite()
            && self.score.iter().all(|v| v.is_finite())
            && self.center.iter().flatten().all(|v| v.is_finite())
    }
}

/// Values of a full forward pass.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub predictions: Vec<LayerPrediction>,
    pub taps: Vec<Tensor>,
    /// `[H, K, K]` relation-aware self-attention weights per layer.
    pub self_attention: Vec<Tensor>,
    pub refinements: usize,
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerPrediction {
        self.predictions.last().expect("at least one prediction")
    }
}

/// Runs the decoder on `scene` without recording gradients.
pub fn decoder_forward(scene: &Scene, model: &Model) -> Result<DecoderOutput> {
    let input = SceneInput::new(scene, model.config())?;
    let mut g = Graph::inference();
    let vars = model.forward_graph(&mut g, &input)?;
    Ok(DecoderOutput {
        predictions: vars.predictions.iter().map(|v| LayerPrediction::from_vars(&g, v)).collect(),
        taps: vars.taps.iter().map(|&t| g.value(t).clone()).collect(),
        self_attention: vars
            .self_attention
            .iter()
            .map(|&a| g.attention_probs(a).expect("attention node").clone())
            .collect(),
        refinements: vars.refinements,
    })
}

/// Per-point features from the encoder alone.
pub fn encode_points(scene: &Scene, encoder: &Mlp) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(point_inputs(scene));
    let y = encoder.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Query contents and positions for a scene with bounds `lo..hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub content: Tensor,
    pub position_unit: Tensor,
    pub position_world: Tensor,
}

pub fn init_queries(model: &Model, lo: [f64; 3], hi: [f64; 3]) -> QuerySet {
    let unit = model.query_unit.value().clone();
    let world = Tensor::matrix(
        unit.rows(),
        3,
        (0..unit.len())
            .map(|i| {
                let a = i % 3;
                (unit.data()[i] * (hi[a] - lo[a]) + lo[a]).clamp(lo[a], hi[a])
            })
            .collect(),
    )
    .expect("sized");
    QuerySet {
        content: model.query_content.value().clone(),
        position_unit: unit,
        position_world: world,
    }
}

/// Masked cross-attention of queries over superpoints: query `k` sees
/// superpoint `s` iff `prev_mask_prob[k][s] > threshold`.
#[allow(clippy::too_many_arguments)]
pub fn mask_attention(
    layer: &DecoderLayer,
    queries: &Tensor,
    world: &Tensor,
    features: &Tensor,
    centroids: &Tensor,
    prev_mask_prob: &Tensor,
    sincos_width: usize,
    threshold: f64,
) -> Result<Tensor> {
    let (k, m) = (queries.rows(), features.rows());
    if prev_mask_prob.shape() != [k, m] {
        return Err(Error::shape(format!(
            "previous mask {:?}, expected [{k}, {m}]",
            prev_mask_prob.shape()
        )));
    }
    let allowed: Vec<bool> = prev_mask_prob.data().iter().map(|&p| p > threshold).collect();
    let mut g = Graph::inference();
    let q = g.constant(queries.clone());
    let w = g.constant(world.clone());
    let f = g.constant(features.clone());
    let c = g.constant(centroids.clone());
    let qlift = g.sincos(w, sincos_width, SINCOS_BASE)?;
    let klift = g.sincos(c, sincos_width, SINCOS_BASE)?;
    let qpos = layer.query_pos.forward(&mut g, qlift)?;
    let kpos = layer.key_pos.forward(&mut g, klift)?;
    let out = layer.cross.forward(&mut g, q, Some(qpos), f, Some(kpos), Some(&allowed))?;
    Ok(g.value(out.out).clone())
}

/// Superpoint features after attending to the queries.
pub fn superpoint_refine(block: &RefineBlock, features: &Tensor, queries: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let f = g.constant(features.clone());
    let q = g.constant(queries.clone());
    let y = refine_graph(&mut g, block, f, q)?;
    Ok(g.value(y).clone())
}

/// Class, mask, score and center predictions for queries at `world`.
pub fn predict_heads(heads: &Heads, queries: &Tensor, features: &Tensor, world: &Tensor) -> Result<LayerPrediction> {
    let mut g = Graph::inference();
    let q = g.constant(queries.clone());
    let f = g.constant(features.clone());
    let w = g.constant(world.clone());
    let class_logits = heads.class.forward(&mut g, q)?;
    let embed = heads.mask.forward(&mut g, q)?;
    let mask_logits = g.matmul_nt(embed, f)?;
    let s = heads.score.forward(&mut g, q)?;
    let score = g.sigmoid(s);
    Ok(LayerPrediction::from_vars(
        &g,
        &PredictionVars {
            class_logits,
            mask_logits,
            score,
            center: w,
        },
    ))
}

#[cfg(test)]
mod tests;
