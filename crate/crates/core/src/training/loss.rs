use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_graph, similarity_graph, PairWeighting, RelationPrior};
use crate::decoder::{LayerPrediction, PredictionVars};
use crate::numerics::{dice_value, Graph, Tensor, Var};
use crate::scene::Scene;
use crate::{Error, Result};

use super::{hungarian, match_cost, GroundTruth, LOSS_WEIGHTS};

/// Layer-averaged loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_center: f64,
    pub l_score: f64,
    pub l_cont: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(terms: [f64; 6]) -> Self {
        let total = terms.iter().zip(LOSS_WEIGHTS).map(|(t, w)| t * w).sum();
        let [l_ce, l_bce, l_dice, l_center, l_score, l_cont] = terms;
        Self {
            l_ce,
            l_bce,
            l_dice,
            l_center,
            l_score,
            l_cont,
            total,
        }
    }

    pub fn terms(&self) -> [f64; 6] {
        [self.l_ce, self.l_bce, self.l_dice, self.l_center, self.l_score, self.l_cont]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Also supervise the prediction made from the initial queries.
    pub supervise_initial: bool,
    pub pair_weighting: PairWeighting,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            supervise_initial: true,
            pair_weighting: PairWeighting::Uniform,
        }
    }
}

pub fn dice_loss(pred_prob: &[f64], gt: &[f64]) -> f64 {
    dice_value(pred_prob, gt)
}

/// Point-weighted IoU of a binarized superpoint mask against a binary one.
pub fn weighted_iou(pred: &[bool], gt: &[f64], sizes: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for ((&p, &t), &w) in pred.iter().zip(gt).zip(sizes) {
        let t = t > 0.5;
        if p && t {
            inter += w;
        }
        if p || t {
            union += w;
        }
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Records the full training objective for one scene.
pub fn loss_graph(
    g: &mut Graph,
    preds: &[PredictionVars],
    taps: &[Var],
    gt: &GroundTruth,
    prior: &RelationPrior,
    opts: &LossOptions,
) -> Result<LossVars> {
    if preds.is_empty() {
        return Err(Error::Contract("loss needs at least one prediction layer".into()));
    }
    let skip = usize::from(!opts.supervise_initial && preds.len() > 1);
    let layers = &preds[skip..];
    let per_layer = 1.0 / layers.len() as f64;
    let mut terms: [Vec<(Var, f64)>; 5] = Default::default();
    for p in layers {
        let values = LayerPrediction::from_vars(g, p);
        if !values.is_finite() {
            return Err(Error::Divergence("non-finite predictions".into()));
        }
        let k = values.query_count();
        let no_object = values.class_logits.cols() - 1;
        let matched = if gt.is_empty() {
            Vec::new()
        } else {
            hungarian(&match_cost(&values, gt)?)?.query_of
        };
        let mut targets = vec![no_object; k];
        for (j, &q) in matched.iter().enumerate() {
            targets[q] = gt.labels[j];
        }
        terms[0].push((g.cross_entropy(p.class_logits, targets)?, per_layer));
        if matched.is_empty() {
            continue;
        }
        let index: Arc<[usize]> = matched.clone().into();
        let logits = g.gather_rows(p.mask_logits, index.clone())?;
        terms[1].push((g.bce_logits(logits, gt.masks.clone())?, per_layer));
        let probs = g.sigmoid(logits);
        terms[2].push((g.dice_rows(probs, gt.masks.clone())?, per_layer));
        let centers = g.gather_rows(p.center, index.clone())?;
        let want: Vec<Vec<f64>> = gt.centers.iter().map(|c| c.to_vec()).collect();
        terms[3].push((g.l1_rows(centers, Tensor::from_rows(&want))?, per_layer));
        let ious: Vec<f64> = matched
            .iter()
            .enumerate()
            .map(|(j, &q)| {
                let binary: Vec<bool> = values.mask_logits.row(q).iter().map(|&z| z > 0.0).collect();
                weighted_iou(&binary, gt.masks.row(j), &gt.sizes)
            })
            .collect();
        let scores = g.gather_rows(p.score, index)?;
        let target = Tensor::matrix(ious.len(), 1, ious)?;
        terms[4].push((g.squared_error(scores, target)?, per_layer));
    }
    let mut vars: Vec<Option<Var>> = Vec::with_capacity(6);
    for t in &terms {
        vars.push(if t.is_empty() { None } else { Some(g.weighted_sum(t)?) });
    }
    let mut cont = Vec::with_capacity(taps.len());
    for &tap in taps {
        let (s, _) = similarity_graph(g, tap)?;
        cont.push((contrastive_graph(g, s, prior, opts.pair_weighting)?, 1.0 / taps.len() as f64));
    }
    vars.push(if cont.is_empty() { None } else { Some(g.weighted_sum(&cont)?) });

    let weighted: Vec<(Var, f64)> = vars
        .iter()
        .zip(LOSS_WEIGHTS)
        .filter_map(|(v, w)| v.map(|v| (v, w)))
        .collect();
    let total = g.weighted_sum(&weighted)?;
    let mut values = [0.0; 6];
    for (slot, v) in values.iter_mut().zip(&vars) {
        if let Some(v) = v {
            *slot = g.value(*v).item();
        }
    }
    let [l_ce, l_bce, l_dice, l_center, l_score, l_cont] = values;
    Ok(LossVars {
        total,
        breakdown: LossBreakdown {
            l_ce,
            l_bce,
            l_dice,
            l_center,
            l_score,
            l_cont,
            total: g.value(total).item(),
        },
    })
}

/// Value-level objective of precomputed predictions and feature taps.
pub fn total_loss(
    preds: &[LayerPrediction],
    taps: &[Tensor],
    scene: &Scene,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let vars: Vec<PredictionVars> = preds
        .iter()
        .map(|p| {
            let center: Vec<Vec<f64>> = p.center.iter().map(|c| c.to_vec()).collect();
            Ok(PredictionVars {
                class_logits: g.constant(p.class_logits.clone()),
                mask_logits: g.constant(p.mask_logits.clone()),
                score: g.constant(Tensor::matrix(p.score.len(), 1, p.score.clone())?),
                center: g.constant(Tensor::from_rows(&center)),
            })
        })
        .collect::<Result<_>>()?;
    let taps: Vec<Var> = taps.iter().map(|t| g.constant(t.clone())).collect();
    let gt = GroundTruth::from_scene(scene);
    let prior = RelationPrior::from_scene(scene);
    Ok(loss_graph(&mut g, &vars, &taps, &gt, &prior, opts)?.breakdown)
}
