//! Set-prediction training.

mod loss;
mod matching;
mod optim;

pub use loss::{dice_loss, loss_graph, total_loss, weighted_iou, LossBreakdown, LossOptions, LossVars};
pub use matching::{hungarian, match_cost, MatchResult};
pub use optim::{poly_lr, AdamW};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{PairWeighting, RelationPrior};
use crate::decoder::{DecoderConfig, Model, SceneInput};
use crate::eval::{evaluate, EvalConfig};
use crate::numerics::{Graph, Tensor};
use crate::scene::{instance_summaries, Scene};
use crate::{Error, Result};

/// Weights of classification, mask BCE, dice, center, score and contrastive
/// terms.
pub const LOSS_WEIGHTS: [f64; 6] = [0.5, 1.0, 1.0, 0.5, 0.5, 1.0];

/// Superpoint-level supervision of one scene. Instances that own no
/// superpoint by majority are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<usize>,
    /// `G × M` binary masks.
    pub masks: Tensor,
    pub centers: Vec<[f64; 3]>,
    /// Points per superpoint.
    pub sizes: Vec<f64>,
}

impl GroundTruth {
    pub fn from_scene(scene: &Scene) -> Self {
        let m = scene.superpoint_count();
        let mut sizes = vec![0.0; m];
        for &s in scene.superpoint_id() {
            sizes[s] += 1.0;
        }
        let mut labels = Vec::new();
        let mut centers = Vec::new();
        let mut masks = Vec::new();
        for inst in instance_summaries(scene) {
            if inst.superpoints.is_empty() {
                continue;
            }
            let mut row = vec![0.0; m];
            inst.superpoints.iter().for_each(|&s| row[s] = 1.0);
            masks.extend(row);
            labels.push(inst.semantic_label);
            centers.push(inst.center);
        }
        let g = labels.len();
        Self {
            labels,
            masks: Tensor::new(vec![g, m], masks).expect("rows of width M"),
            centers,
            sizes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub grad_clip: f64,
    pub supervise_initial: bool,
    pub pair_weighting: PairWeighting,
    /// Train on a random mirror/axis swap of the floor plan at every step.
    pub augment: bool,
    /// Evaluate the validation split every this many epochs (and after the
    /// last); `0` never evaluates.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            base_lr: 2e-4,
            lr_power: 0.9,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            supervise_initial: true,
            pair_weighting: PairWeighting::Uniform,
            augment: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("lr_power", self.lr_power),
            ("adam_eps", self.adam_eps),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::validation(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        for (field, v) in [("weight_decay", self.weight_decay), ("grad_clip", self.grad_clip)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(field, format!("must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            supervise_initial: self.supervise_initial,
            pair_weighting: self.pair_weighting,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        let clip = (self.grad_clip > 0.0).then_some(self.grad_clip);
        AdamW::new(self.beta1, self.beta2, self.adam_eps, self.weight_decay, clip)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate of the epoch's last step.
    pub lr: f64,
    pub l_ce: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_center: f64,
    pub l_score: f64,
    pub l_cont: f64,
    pub total: f64,
    pub ap25: Option<f64>,
    pub ap50: Option<f64>,
    pub map: Option<f64>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Checks that `model` can be trained and evaluated on `scenes`.
pub fn check_dataset(scenes: &[Scene], config: &DecoderConfig) -> Result<()> {
    for (i, scene) in scenes.iter().enumerate() {
        let g = GroundTruth::from_scene(scene).len();
        if g > config.queries {
            return Err(Error::validation(
                "queries",
                format!("scene {i} has {g} instances but only {} queries", config.queries),
            ));
        }
        if scene.category_count() > config.category_count {
            return Err(Error::validation(
                "category_count",
                format!(
                    "scene {i} uses {} categories, model predicts {}",
                    scene.category_count(),
                    config.category_count
                ),
            ));
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one scene.
pub fn scene_gradients(
    model: &Model,
    scene: &Scene,
    opts: &LossOptions,
) -> Result<(LossBreakdown, std::collections::HashMap<String, Tensor>)> {
    let input = SceneInput::new(scene, model.config())?;
    let mut g = Graph::new();
    let vars = model.forward_graph(&mut g, &input)?;
    let gt = GroundTruth::from_scene(scene);
    let prior = RelationPrior::from_scene(scene);
    let loss = loss_graph(&mut g, &vars.predictions, &vars.taps, &gt, &prior, opts)?;
    if !loss.breakdown.total.is_finite() {
        return Ok((loss.breakdown, Default::default()));
    }
    let grads = g.backward(loss.total)?;
    Ok((loss.breakdown, g.param_grads(&grads)))
}

/// One of the eight symmetries of the floor square: bit 0 mirrors x, bit 1
/// mirrors y, bit 2 swaps the axes. Mirrors keep the scene's bounds.
pub fn floor_symmetry(scene: &Scene, which: u8) -> Scene {
    if which == 0 {
        return scene.clone();
    }
    let (lo, hi) = scene.bounds();
    scene.map_positions(|[mut x, mut y, z]| {
        if which & 1 != 0 {
            x = lo[0] + hi[0] - x;
        }
        if which & 2 != 0 {
            y = lo[1] + hi[1] - y;
        }
        if which & 4 != 0 {
            std::mem::swap(&mut x, &mut y);
        }
        [x, y, z]
    })
}

/// Trains a fresh model one scene per step; `val` is scored after epochs
/// selected by `eval_every`. Deterministic in `seed`.
pub fn train(
    train: &[Scene],
    val: &[Scene],
    config: &DecoderConfig,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    config.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::validation("train", "no training scenes"));
    }
    check_dataset(train, config)?;
    check_dataset(val, config)?;
    let mut model = Model::new(config.clone(), seed)?;
    let mut opt = cfg.optimizer();
    let opts = cfg.loss_options();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(seed);
    augment_rng.set_stream(2);
    let max_steps = cfg.epochs * train.len();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 7];
        let mut lr = 0.0;
        for &i in &order {
            let (breakdown, grads) = if cfg.augment {
                let view = floor_symmetry(&train[i], augment_rng.gen_range(0..8));
                scene_gradients(&model, &view, &opts)?
            } else {
                scene_gradients(&model, &train[i], &opts)?
            };
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, step {step} (scene {i})"
                )));
            }
            lr = poly_lr(step, max_steps, cfg.base_lr, cfg.lr_power);
            opt.step(&mut model, &grads, lr);
            step += 1;
            for (s, v) in sums.iter_mut().zip(breakdown.terms().iter().chain([&breakdown.total])) {
                *s += v;
            }
        }
        let n = train.len() as f64;
        let [l_ce, l_bce, l_dice, l_center, l_score, l_cont, total] = sums.map(|s| s / n);
        let due = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let report = if due && !val.is_empty() {
            Some(evaluate(val, &model, eval_cfg)?)
        } else {
            None
        };
        log.push(EpochLog {
            epoch,
            lr,
            l_ce,
            l_bce,
            l_dice,
            l_center,
            l_score,
            l_cont,
            total,
            ap25: report.as_ref().map(|r| r.ap25),
            ap50: report.as_ref().map(|r| r.ap50),
            map: report.as_ref().map(|r| r.map),
        });
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests;
