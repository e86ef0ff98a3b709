//! Finite-difference checks of every differentiable building block.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::asam::{asam_graph, AsamParams, SuperpointPartition};
use crate::contrastive::{contrastive_graph, similarity_graph, PairWeighting, RelationPrior};
use crate::decoder::{decoder_forward, refine_graph, DecoderConfig, Model, SceneInput};
use crate::numerics::nn::{Module, Param};
use crate::numerics::{grad_check, grad_check_module, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::rsa::{relation_tensor, rsa_graph, BBox, RsaParams};
use crate::scene::{synth_scene, SynthConfig};
use crate::Result;

/// Tolerance for single elementwise or row-wise kernels.
pub const ELEMENTWISE_TOL: f64 = 1e-4;
/// Tolerance for composite blocks.
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub check: String,
    pub seed: u64,
    pub tol: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub passed: bool,
    pub entries: Vec<SuiteEntry>,
}

fn opts(tol: f64) -> GradCheckOptions {
    GradCheckOptions {
        tol,
        ..Default::default()
    }
}

/// `Σ w ⊙ x` with a fixed random `w`, so every output entry matters.
fn project(g: &mut Graph, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = Tensor::uniform(g.value(x).shape(), 1.0, rng);
    let wv = g.constant(w);
    let prod = g.mul(x, wv)?;
    Ok(g.sum(prod))
}

fn check_fn(
    name: &str,
    inputs: &[Tensor],
    tol: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check(name, f, inputs, opts(tol))
}

pub fn linear_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [
        Tensor::uniform(&[3, 4], 1.0, &mut rng),
        Tensor::uniform(&[4, 5], 1.0, &mut rng),
        Tensor::uniform(&[5], 1.0, &mut rng),
    ];
    check_fn("linear", &inputs, ELEMENTWISE_TOL, |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        project(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
    })
}

pub fn softmax_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [Tensor::uniform(&[3, 5], 2.0, &mut rng)];
    check_fn("softmax", &inputs, ELEMENTWISE_TOL, |g, v| {
        let y = g.softmax_rows(v[0])?;
        project(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
    })
}

pub fn attention_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [
        Tensor::uniform(&[2, 3, 4], 1.0, &mut rng),
        Tensor::uniform(&[2, 5, 4], 1.0, &mut rng),
        Tensor::uniform(&[2, 5, 4], 1.0, &mut rng),
        Tensor::uniform(&[2, 3, 5], 1.0, &mut rng),
    ];
    check_fn("attention_core", &inputs, COMPOSITE_TOL, |g, v| {
        let y = g.attention(v[0], v[1], v[2], Some(v[3]), None)?;
        project(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
    })
}

pub fn asam_check(seed: u64) -> Result<GradCheckReport> {
    let part = Arc::new(SuperpointPartition::from_ids(&[0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 0, 1], 3)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AsamParams::new("asam", 4, &mut rng);
    let f = Tensor::uniform(&[12, 4], 1.0, &mut rng);
    grad_check_module(
        "asam_forward",
        &p,
        &[f],
        |g, v| {
            let y = asam_graph(g, v[0], &part, &p)?;
            project(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
        },
        opts(COMPOSITE_TOL),
    )
}

pub fn contrastive_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let prior = RelationPrior::from_assignment(vec![0, 0, 1, -1]);
    check_fn("cosine_similarity+contrastive_loss", &[f], ELEMENTWISE_TOL, |g, v| {
        let (s, _) = similarity_graph(g, v[0])?;
        contrastive_graph(g, s, &prior, PairWeighting::Uniform)
    })
}

pub fn rsa_check(seed: u64) -> Result<GradCheckReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = RsaParams::new("rsa", 8, 2, 4, &mut rng)?;
    let boxes: Vec<BBox> = (0..4)
        .map(|_| BBox {
            center: [0; 3].map(|_| rng.gen_range(-2.0..2.0)),
            extent: [0; 3].map(|_| rng.gen_range(0.1..1.5)),
        })
        .collect();
    let t = relation_tensor(&boxes);
    let q = Tensor::uniform(&[4, 8], 1.0, &mut rng);
    grad_check_module(
        "relation_bias+rsa_forward",
        &p,
        &[q],
        |g, v| {
            let out = rsa_graph(g, v[0], Some(&t), &p)?;
            project(g, out.queries, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
        },
        opts(COMPOSITE_TOL),
    )
}

fn toy_config(layers: usize, refine_every: usize) -> DecoderConfig {
    DecoderConfig {
        queries: 4,
        width: 8,
        heads: 2,
        layers,
        refine_every,
        ..DecoderConfig::default()
    }
}

pub fn refine_check(seed: u64) -> Result<GradCheckReport> {
    let model = Model::new(toy_config(1, 1), seed)?;
    let block = &model.refine[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [
        Tensor::uniform(&[6, 8], 1.0, &mut rng),
        Tensor::uniform(&[4, 8], 1.0, &mut rng),
    ];
    grad_check_module(
        "superpoint_refine",
        block,
        &inputs,
        |g, v| {
            let y = refine_graph(g, block, v[0], v[1])?;
            project(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
        },
        opts(COMPOSITE_TOL),
    )
}

pub fn loss_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[3, 5], 2.0, &mut rng);
    let target = Tensor::uniform(&[3, 5], 1.0, &mut rng).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let dice = {
        let target = target.clone();
        check_fn("dice_loss", std::slice::from_ref(&x), ELEMENTWISE_TOL, move |g, v| {
            let p = g.sigmoid(v[0]);
            g.dice_rows(p, target.clone())
        })?
    };
    let bce = check_fn("bce_loss", std::slice::from_ref(&x), ELEMENTWISE_TOL, |g, v| {
        g.bce_logits(v[0], target.clone())
    })?;
    let ce = check_fn("ce_loss", &[x], ELEMENTWISE_TOL, |g, v| {
        g.cross_entropy(v[0], vec![0, 4, 2])
    })?;
    Ok(vec![dice, bce, ce])
}

/// Parameters of a model, filtered by name.
struct Subset<'a> {
    model: &'a Model,
    names: &'a [&'a str],
    keep_listed: bool,
}

impl Module for Subset<'_> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.model.visit(&mut |p| {
            if self.names.contains(&p.name()) == self.keep_listed {
                f(p)
            }
        });
    }

    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {
        unreachable!("read-only view")
    }
}

/// End-to-end check of a 1-layer decoder on a 30-point, 6-superpoint scene.
///
/// Boxes enter the relation bias as constants, and an empty mask puts its box
/// at the query's position; the query positions are therefore checked with
/// the bias off and everything else with the full model. ReLU kinks sit
/// within 1e-5 of some parameters, so the step is 1e-6 with a matching floor.
pub fn decoder_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = SynthConfig {
        boxes_min: 2,
        boxes_max: 2,
        points_per_box_min: 12,
        points_per_box_max: 12,
        superpoints_per_box: 1,
        background_points: 6,
        background_grid: 2,
        ..SynthConfig::default()
    };
    let scene = synth_scene(&cfg, 0)?;
    let full = Model::new(toy_config(1, 1), seed)?;
    let no_bias = full.clone().with_switches(true, false, true);
    let input = SceneInput::new(&scene, full.config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let weights: Vec<Tensor> = {
        let out = decoder_forward(&scene, &full)?;
        let p = out.last();
        vec![
            Tensor::uniform(p.class_logits.shape(), 1.0, &mut rng),
            Tensor::uniform(p.mask_logits.shape(), 1.0, &mut rng),
            Tensor::uniform(&[p.query_count(), 1], 1.0, &mut rng),
            Tensor::uniform(&[p.query_count(), 3], 1.0, &mut rng),
            Tensor::uniform(out.taps[1].shape(), 1.0, &mut rng),
        ]
    };
    let options = GradCheckOptions {
        tol: COMPOSITE_TOL,
        eps: 1e-6,
        floor: 1e-5,
        ..Default::default()
    };
    let mut reports = Vec::new();
    for (name, model, keep_listed) in [("decoder_1layer", &full, false), ("decoder_1layer_positions", &no_bias, true)] {
        let subset = Subset {
            model,
            names: &["query.unit"],
            keep_listed,
        };
        reports.push(grad_check_module(
            name,
            &subset,
            &[],
            |g, _| {
                let vars = model.forward_graph(g, &input)?;
                let p = vars.predictions[1];
                let mut terms = Vec::new();
                for (v, w) in [p.class_logits, p.mask_logits, p.score, p.center, vars.taps[1]]
                    .into_iter()
                    .zip(&weights)
                {
                    let wv = g.constant(w.clone());
                    let prod = g.mul(v, wv)?;
                    terms.push((g.sum(prod), 1.0));
                }
                g.weighted_sum(&terms)
            },
            options,
        )?);
    }
    Ok(reports)
}

/// Every check at seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    for seed in 0..seeds {
        let mut reports = vec![
            linear_check(seed)?,
            softmax_check(seed)?,
            attention_check(seed)?,
            asam_check(seed)?,
            contrastive_check(seed)?,
            rsa_check(seed)?,
            refine_check(seed)?,
        ];
        reports.extend(loss_checks(seed)?);
        reports.extend(decoder_checks(seed)?);
        entries.extend(reports.into_iter().map(|r| SuiteEntry {
            check: r.name,
            seed,
            tol: r.tol,
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        }));
    }
    entries.sort_by(|a, b| a.check.cmp(&b.check).then(a.seed.cmp(&b.seed)));
    Ok(SuiteReport {
        passed: entries.iter().all(|e| e.passed),
        entries,
    })
}
