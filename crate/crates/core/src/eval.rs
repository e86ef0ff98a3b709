//! Post-processing, AP metrics and diagnostics of trained models.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_loss, cosine_similarity_matrix, RelationPrior};
use crate::decoder::{decoder_forward, LayerPrediction, Model};
use crate::numerics::Tensor;
use crate::scene::{instance_summaries, Scene};
use crate::{Error, Result};

/// Histogram bins at or below this weight are dropped from attention statistics.
pub const ATTENTION_FLOOR: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub nms_iou: f64,
    pub min_confidence: f64,
    pub mask_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.75,
            min_confidence: 0.05,
            mask_threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("nms_iou", self.nms_iou),
            ("min_confidence", self.min_confidence),
            ("mask_threshold", self.mask_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(field, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub query: usize,
    pub category: usize,
    pub confidence: f64,
    /// Point-level membership.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub category: usize,
    pub mask: Vec<bool>,
}

/// Point-level ground-truth instances of a scene, ascending by instance id.
pub fn gt_instances(scene: &Scene) -> Vec<GtInstance> {
    instance_summaries(scene)
        .into_iter()
        .map(|s| GtInstance {
            category: s.semantic_label,
            mask: scene.instance_id().iter().map(|&i| i == s.instance_id).collect(),
        })
        .collect()
}

/// Candidate instances of the final layer, before suppression.
pub fn extract_instances(pred: &LayerPrediction, scene: &Scene, cfg: &EvalConfig) -> Vec<InstancePrediction> {
    let no_object = pred.class_logits.cols() - 1;
    let mut out = Vec::new();
    for k in 0..pred.query_count() {
        let probs = pred.class_probs(k);
        let best = argmax(&probs);
        if best == no_object {
            continue;
        }
        let confidence = probs[best] * pred.score[k];
        if confidence < cfg.min_confidence {
            continue;
        }
        let on: Vec<bool> = pred.mask_probs(k).iter().map(|&p| p > cfg.mask_threshold).collect();
        let mask: Vec<bool> = scene.superpoint_id().iter().map(|&s| on[s]).collect();
        if !mask.iter().any(|&b| b) {
            continue;
        }
        out.push(InstancePrediction {
            query: k,
            category: best,
            confidence,
            mask,
        });
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn by_confidence(a: &InstancePrediction, b: &InstancePrediction) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.query.cmp(&b.query))
}

/// Greedy per-category suppression, strongest first.
pub fn nms(insts: &[InstancePrediction], iou_thr: f64) -> Vec<InstancePrediction> {
    let mut order: Vec<&InstancePrediction> = insts.iter().collect();
    order.sort_by(|a, b| by_confidence(a, b));
    let mut kept: Vec<InstancePrediction> = Vec::new();
    for cand in order {
        let clear = kept
            .iter()
            .filter(|k| k.category == cand.category)
            .all(|k| mask_iou(&k.mask, &cand.mask) <= iou_thr);
        if clear {
            kept.push(cand.clone());
        }
    }
    kept
}

/// One ranked prediction of a category with its IoU against every
/// same-category ground truth of its scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub confidence: f64,
    pub scene: usize,
    pub query: usize,
    /// `(ground-truth key, IoU)`; keys are unique across scenes.
    pub overlaps: Vec<(usize, f64)>,
}

/// All-point interpolated AP; `None` without ground truths. Predictions
/// sharing a confidence enter the curve together.
pub fn average_precision(preds: &[Ranked], gt_count: usize, iou_thr: f64) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut order: Vec<&Ranked> = preds.iter().collect();
    order.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.scene.cmp(&b.scene))
            .then(a.query.cmp(&b.query))
    });
    let mut taken = std::collections::BTreeSet::new();
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (i, p) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &(key, iou) in &p.overlaps {
            if iou >= iou_thr && !taken.contains(&key) && best.map_or(true, |(_, b)| iou > b) {
                best = Some((key, iou));
            }
        }
        if let Some((key, _)) = best {
            taken.insert(key);
            tp += 1;
        }
        seen += 1;
        let group_ends = order.get(i + 1).map_or(true, |n| n.confidence != p.confidence);
        if group_ends {
            curve.push((tp as f64 / gt_count as f64, tp as f64 / seen as f64));
        }
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut next_recall = curve.last().map_or(0.0, |c| c.0);
    for &(recall, precision) in curve.iter().rev() {
        ap += (next_recall - recall) * envelope;
        envelope = envelope.max(precision);
        next_recall = recall;
    }
    ap += next_recall * envelope;
    Some(ap)
}

/// IoU thresholds of the mAP average: 0.50, 0.55, …, 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: usize,
    pub ground_truths: usize,
    pub predictions: usize,
    pub ap25: f64,
    /// AP at each of [`map_thresholds`].
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub thresholds: Vec<f64>,
    /// Categories with at least one ground truth, ascending.
    pub categories: Vec<CategoryAp>,
    pub scenes: usize,
    pub predictions: usize,
    pub ground_truths: usize,
}

/// Scores suppressed predictions against the ground truth of each scene.
pub fn evaluate_predictions(scenes: &[Scene], preds: &[Vec<InstancePrediction>]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::validation("scenes", "nothing to evaluate"));
    }
    if scenes.len() != preds.len() {
        return Err(Error::shape("one prediction list per scene"));
    }
    let categories = scenes.iter().map(Scene::category_count).max().unwrap_or(0);
    let mut ranked: Vec<Vec<Ranked>> = vec![Vec::new(); categories];
    let mut gt_counts = vec![0usize; categories];
    let mut key = 0;
    for (s, (scene, list)) in scenes.iter().zip(preds).enumerate() {
        let gts = gt_instances(scene);
        let keys: Vec<usize> = (key..key + gts.len()).collect();
        key += gts.len();
        for gt in &gts {
            gt_counts[gt.category] += 1;
        }
        for p in list {
            if p.category >= categories {
                return Err(Error::validation("category", format!("{} out of range", p.category)));
            }
            let overlaps = gts
                .iter()
                .zip(&keys)
                .filter(|(gt, _)| gt.category == p.category)
                .map(|(gt, &k)| (k, mask_iou(&p.mask, &gt.mask)))
                .collect();
            ranked[p.category].push(Ranked {
                confidence: p.confidence,
                scene: s,
                query: p.query,
                overlaps,
            });
        }
    }
    // Matching never crosses scenes, so ranking ties between scenes cannot
    // change a curve; the scene index only fixes a processing order.
    let thresholds = map_thresholds();
    let mut per_category = Vec::new();
    for (c, list) in ranked.iter().enumerate() {
        let Some(ap25) = average_precision(list, gt_counts[c], 0.25) else {
            continue;
        };
        let ap = thresholds
            .iter()
            .map(|&t| average_precision(list, gt_counts[c], t).unwrap_or(0.0))
            .collect();
        per_category.push(CategoryAp {
            category: c,
            ground_truths: gt_counts[c],
            predictions: list.len(),
            ap25,
            ap,
        });
    }
    let mean = |f: &dyn Fn(&CategoryAp) -> f64| -> f64 {
        if per_category.is_empty() {
            0.0
        } else {
            per_category.iter().map(f).sum::<f64>() / per_category.len() as f64
        }
    };
    Ok(EvalReport {
        map: mean(&|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64),
        ap50: mean(&|c| c.ap[0]),
        ap25: mean(&|c| c.ap25),
        thresholds,
        categories: per_category,
        scenes: scenes.len(),
        predictions: preds.iter().map(Vec::len).sum(),
        ground_truths: gt_counts.iter().sum(),
    })
}

/// Final-layer instances of `scene` after suppression.
pub fn infer_instances(scene: &Scene, model: &Model, cfg: &EvalConfig) -> Result<Vec<InstancePrediction>> {
    let out = decoder_forward(scene, model)?;
    Ok(nms(&extract_instances(out.last(), scene, cfg), cfg.nms_iou))
}

pub fn evaluate(scenes: &[Scene], model: &Model, cfg: &EvalConfig) -> Result<EvalReport> {
    let preds = scenes
        .iter()
        .map(|s| infer_instances(s, model, cfg))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(scenes, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLabels {
    /// Index into `instances` per point, `-1` when unclaimed.
    pub instance: Vec<i64>,
    /// Category per point, `-1` when unclaimed.
    pub category: Vec<i64>,
    pub instances: Vec<InstanceSummaryOut>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummaryOut {
    pub query: usize,
    pub category: usize,
    pub confidence: f64,
    pub points: usize,
}

/// Per-point labels; overlapping instances yield to the more confident one.
pub fn point_labels(point_count: usize, kept: &[InstancePrediction]) -> PointLabels {
    let mut order: Vec<&InstancePrediction> = kept.iter().collect();
    order.sort_by(|a, b| by_confidence(a, b));
    let mut instance = vec![-1i64; point_count];
    let mut category = vec![-1i64; point_count];
    for (id, inst) in order.iter().enumerate() {
        for (i, _) in inst.mask.iter().enumerate().filter(|(_, &m)| m) {
            if instance[i] < 0 {
                instance[i] = id as i64;
                category[i] = inst.category as i64;
            }
        }
    }
    PointLabels {
        instance,
        category,
        instances: order
            .iter()
            .map(|i| InstanceSummaryOut {
                query: i.query,
                category: i.category,
                confidence: i.confidence,
                points: i.mask.iter().filter(|&&m| m).count(),
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHistogram {
    pub layer: usize,
    /// Bin edges over `(ATTENTION_FLOOR, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Weights at or below the floor.
    pub excluded: usize,
    /// Mean of the counted weights.
    pub mean: f64,
}

/// Histograms of self-attention weights per layer.
pub fn attention_histograms(weights: &[Tensor], bins: usize) -> Vec<AttentionHistogram> {
    let bins = bins.max(1);
    let width = (1.0 - ATTENTION_FLOOR) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| ATTENTION_FLOOR + width * i as f64).collect();
    weights
        .iter()
        .enumerate()
        .map(|(layer, w)| {
            let mut counts = vec![0usize; bins];
            let mut excluded = 0;
            let mut sum = 0.0;
            for &v in w.data() {
                if v <= ATTENTION_FLOOR {
                    excluded += 1;
                    continue;
                }
                let b = (((v - ATTENTION_FLOOR) / width).ceil() as usize).clamp(1, bins) - 1;
                counts[b] += 1;
                sum += v;
            }
            let counted: usize = counts.iter().sum();
            AttentionHistogram {
                layer: layer + 1,
                edges: edges.clone(),
                counts,
                excluded,
                mean: if counted == 0 { 0.0 } else { sum / counted as f64 },
            }
        })
        .collect()
}

/// Contrastive loss of each feature tap (post-aggregation first, then every
/// refinement), averaged over scenes.
pub fn stage_contrastive(scenes: &[Scene], model: &Model) -> Result<Vec<f64>> {
    let mut sums: Vec<f64> = Vec::new();
    for scene in scenes {
        let out = decoder_forward(scene, model)?;
        let prior = RelationPrior::from_scene(scene);
        if sums.is_empty() {
            sums = vec![0.0; out.taps.len()];
        }
        for (slot, tap) in sums.iter_mut().zip(&out.taps) {
            let (s, _) = cosine_similarity_matrix(tap)?;
            *slot += contrastive_loss(&s, &prior)?;
        }
    }
    Ok(sums.into_iter().map(|s| s / scenes.len().max(1) as f64).collect())
}

/// Reads an `M × C` feature dump: a JSON array of rows, or one row of
/// whitespace-separated numbers per line.
pub fn parse_feature_dump(text: &str) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("feature dump: {e}")))?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse(format!("feature row {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?
    };
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse("feature dump must be a non-empty rectangular matrix".into()));
    }
    Ok(Tensor::from_rows(&rows))
}
