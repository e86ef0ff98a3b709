use super::*;
use crate::decoder::{decoder_forward, LayerPrediction};
use crate::numerics::nn::Module;
use crate::scene::{synth_dataset, synth_scene, SynthConfig};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::Rng;

fn small_config() -> DecoderConfig {
    DecoderConfig {
        queries: 4,
        width: 8,
        heads: 2,
        layers: 2,
        refine_every: 1,
        sincos_width: 4,
        ..DecoderConfig::default()
    }
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        points_per_box_min: 20,
        points_per_box_max: 30,
        background_points: 20,
        superpoints_per_box: 2,
        ..SynthConfig::default()
    }
}

/// Four points in two superpoints; the first superpoint is instance 0 of
/// category 1.
fn tiny_scene(with_instance: bool) -> Scene {
    let positions = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 2.0, 1.0]];
    let (inst, sem) = if with_instance {
        (vec![0, 0, -1, -1], vec![1, 1, -1, -1])
    } else {
        (vec![-1; 4], vec![-1; 4])
    };
    Scene::new(positions, None, None, vec![0, 0, 1, 1], inst, sem, 2).unwrap()
}

fn prediction(class: &[[f64; 3]], mask: &[[f64; 2]], score: &[f64], center: &[[f64; 3]]) -> LayerPrediction {
    LayerPrediction {
        class_logits: Tensor::from_rows(&class.iter().map(|r| r.to_vec()).collect::<Vec<_>>()),
        mask_logits: Tensor::from_rows(&mask.iter().map(|r| r.to_vec()).collect::<Vec<_>>()),
        score: score.to_vec(),
        center: center.to_vec(),
    }
}

fn log_softmax(row: &[f64], t: usize) -> f64 {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row[t] - z.ln()
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce(z: f64, t: f64) -> f64 {
    -(t * sig(z).ln() + (1.0 - t) * (1.0 - sig(z)).ln())
}

fn dice(p: &[f64], g: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + g.iter().sum::<f64>() + 1.0)
}

#[test]
fn ground_truth_of_tiny_scene() {
    let gt = GroundTruth::from_scene(&tiny_scene(true));
    assert_eq!(gt.labels, vec![1]);
    assert_eq!(gt.masks.data(), &[1.0, 0.0]);
    assert_eq!(gt.centers, vec![[0.5, 0.0, 0.0]]);
    assert_eq!(gt.sizes, vec![2.0, 2.0]);
    assert!(GroundTruth::from_scene(&tiny_scene(false)).is_empty());
}

#[test]
fn dice_examples() {
    assert_eq!(dice_loss(&[1.0; 4], &[1.0; 4]), 0.0);
    assert!((dice_loss(&[0.0; 4], &[1.0; 4]) - 0.8).abs() <= 1e-12);
    assert_eq!(dice_loss(&[0.0; 4], &[0.0; 4]), 0.0);
}

#[test]
fn match_cost_single_pair() {
    let p = prediction(&[[0.0, 1.0, 0.0]], &[[1.0, -1.0]], &[0.5], &[[0.0; 3]]);
    let c = match_cost(&p, &GroundTruth::from_scene(&tiny_scene(true))).unwrap();
    assert_eq!(c.shape(), &[1, 1]);
    assert_eq!(hungarian(&c).unwrap().query_of, vec![0]);
}

#[test]
fn match_cost_perfect_prediction_is_near_minimal() {
    let p = prediction(&[[-40.0, 40.0, -40.0]], &[[40.0, -40.0]], &[1.0], &[[0.5, 0.0, 0.0]]);
    let c = match_cost(&p, &GroundTruth::from_scene(&tiny_scene(true))).unwrap().item();
    // Only the soft-dice smoothing and saturated logits leave a residue.
    assert!(c < 1e-12, "{c}");
}

#[test]
fn match_cost_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scene = synth_scene(
        &SynthConfig {
            boxes_min: 3,
            boxes_max: 3,
            ..small_synth()
        },
        0,
    )
    .unwrap();
    let gt = GroundTruth::from_scene(&scene);
    assert_eq!(gt.len(), 3);
    let m = scene.superpoint_count();
    let p = LayerPrediction {
        class_logits: Tensor::uniform(&[4, 5], 2.0, &mut rng),
        mask_logits: Tensor::uniform(&[4, m], 3.0, &mut rng),
        score: vec![0.5; 4],
        center: (0..4).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
    };
    let c = match_cost(&p, &gt).unwrap();
    assert_eq!(c.shape(), &[4, 3]);
    for q in 0..4 {
        for g in 0..3 {
            let logits = p.mask_logits.row(q);
            let target = gt.masks.row(g);
            let ce = -log_softmax(p.class_logits.row(q), gt.labels[g]);
            let b: f64 = logits.iter().zip(target).map(|(&z, &t)| bce(z, t)).sum::<f64>() / m as f64;
            let probs: Vec<f64> = logits.iter().map(|&z| sig(z)).collect();
            let d = dice(&probs, target);
            let l1: f64 = (0..3).map(|a| (p.center[q][a] - gt.centers[g][a]).abs()).sum();
            let want = 0.5 * ce + b + d + 0.5 * l1;
            assert!((c.get2(q, g) - want).abs() <= 1e-10, "{q} {g}");
        }
    }
}

#[test]
fn zero_instances_push_to_no_object() {
    let scene = tiny_scene(false);
    let p = prediction(&[[0.3; 3], [0.3; 3]], &[[1.0, 2.0], [0.0, -1.0]], &[0.5, 0.5], &[[0.0; 3]; 2]);
    let b = total_loss(&[p], &[], &scene, &LossOptions::default()).unwrap();
    assert!((b.l_ce - 3f64.ln()).abs() <= 1e-12);
    assert_eq!([b.l_bce, b.l_dice, b.l_center, b.l_score, b.l_cont], [0.0; 5]);
    assert!((b.total - 0.5 * 3f64.ln()).abs() <= 1e-12);
}

#[test]
fn perfect_prediction_has_small_losses() {
    let scene = tiny_scene(true);
    let p = prediction(
        &[[-30.0, 30.0, -30.0], [-30.0, -30.0, 30.0]],
        &[[30.0, -30.0], [-30.0, -30.0]],
        &[1.0, 0.0],
        &[[0.5, 0.0, 0.0], [0.0; 3]],
    );
    let b = total_loss(&[p], &[], &scene, &LossOptions::default()).unwrap();
    for v in [b.l_ce, b.l_bce, b.l_dice, b.l_center, b.l_score] {
        assert!(v < 1e-10, "{b:?}");
    }
}

#[test]
fn hand_computed_toy_loss() {
    let scene = tiny_scene(true);
    let class = [[0.2, 1.5, -0.3], [1.0, 0.1, 0.8]];
    let mask = [[2.0, -1.0], [0.5, 0.4]];
    let score = [0.7, 0.4];
    let center = [[0.4, 0.2, 0.0], [0.0, 1.0, 1.0]];
    let p = prediction(&class, &mask, &score, &center);
    let b = total_loss(&[p], &[], &scene, &LossOptions::default()).unwrap();

    let cost = |q: usize| {
        let ce = -log_softmax(&class[q], 1);
        let bc = (bce(mask[q][0], 1.0) + bce(mask[q][1], 0.0)) / 2.0;
        let d = dice(&[sig(mask[q][0]), sig(mask[q][1])], &[1.0, 0.0]);
        let l1 = (center[q][0] - 0.5).abs() + center[q][1].abs() + center[q][2].abs();
        (ce, bc, d, l1, 0.5 * ce + bc + d + 0.5 * l1)
    };
    let (q, other) = if cost(0).4 <= cost(1).4 { (0, 1) } else { (1, 0) };
    let (ce_m, bc, d, l1, _) = cost(q);
    let l_ce = (ce_m + -log_softmax(&class[other], 2)) / 2.0;
    // Query 0's mask binarizes to exactly the instance superpoint.
    let iou = if q == 0 { 1.0 } else { 0.5 };
    let l_score = (score[q] - iou) * (score[q] - iou);
    assert_eq!(q, 0);
    let want = 0.5 * l_ce + bc + d + 0.5 * l1 + 0.5 * l_score;
    assert!((b.l_ce - l_ce).abs() <= 1e-12);
    assert!((b.l_bce - bc).abs() <= 1e-12);
    assert!((b.l_dice - d).abs() <= 1e-12);
    assert!((b.l_center - l1).abs() <= 1e-12);
    assert!((b.l_score - l_score).abs() <= 1e-12);
    assert!((b.total - want).abs() <= 1e-12);
}

#[test]
fn empty_prediction_list_is_rejected() {
    assert!(total_loss(&[], &[], &tiny_scene(true), &LossOptions::default()).is_err());
}

#[test]
fn initial_layer_can_be_excluded() {
    let scene = tiny_scene(true);
    let good = prediction(
        &[[-30.0, 30.0, -30.0], [-30.0, -30.0, 30.0]],
        &[[30.0, -30.0], [-30.0, -30.0]],
        &[1.0, 0.0],
        &[[0.5, 0.0, 0.0], [0.0; 3]],
    );
    let bad = prediction(&[[0.0; 3]; 2], &[[0.0; 2]; 2], &[0.5; 2], &[[3.0; 3]; 2]);
    let preds = [bad.clone(), good.clone()];
    let with = total_loss(&preds, &[], &scene, &LossOptions::default()).unwrap();
    let without = total_loss(
        &preds,
        &[],
        &scene,
        &LossOptions {
            supervise_initial: false,
            ..LossOptions::default()
        },
    )
    .unwrap();
    let good_only = total_loss(&[good], &[], &scene, &LossOptions::default()).unwrap();
    assert_eq!(without, good_only);
    assert!(with.total > without.total);
}

/// Relabels instance ids in reverse, reversing the ground-truth order.
fn reversed_instances(scene: &Scene) -> Scene {
    let top = scene.instance_id().iter().copied().max().unwrap();
    let inst = scene
        .instance_id()
        .iter()
        .map(|&i| if i < 0 { i } else { top - i })
        .collect();
    Scene::new(
        scene.positions().to_vec(),
        scene.colors().map(<[_]>::to_vec),
        None,
        scene.superpoint_id().iter().map(|&s| s as i64).collect(),
        inst,
        scene.semantic_label().to_vec(),
        scene.category_count(),
    )
    .unwrap()
}

#[test]
fn loss_is_invariant_to_instance_order() {
    let cfg = SynthConfig {
        boxes_min: 3,
        boxes_max: 3,
        ..small_synth()
    };
    for seed in 0..3 {
        let scene = synth_scene(&cfg, seed).unwrap();
        let flipped = reversed_instances(&scene);
        assert_ne!(GroundTruth::from_scene(&scene).labels, GroundTruth::from_scene(&flipped).labels);
        let model = Model::new(small_config(), seed).unwrap();
        let out = decoder_forward(&scene, &model).unwrap();
        let a = total_loss(&out.predictions, &out.taps, &scene, &LossOptions::default()).unwrap();
        let b = total_loss(&out.predictions, &out.taps, &flipped, &LossOptions::default()).unwrap();
        for (x, y) in a.terms().iter().zip(b.terms()) {
            assert!((x - y).abs() <= 1e-12, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn decoder_loss_recomputes_from_terms() {
    let scenes = synth_dataset(&SynthConfig {
        scene_count: 3,
        ..small_synth()
    })
    .unwrap();
    for (seed, scene) in scenes.iter().enumerate() {
        let model = Model::new(small_config(), seed as u64).unwrap();
        let (b, grads) = scene_gradients(&model, scene, &LossOptions::default()).unwrap();
        let again = LossBreakdown::from_terms(b.terms());
        assert!((again.total - b.total).abs() <= 1e-12);
        assert!(b.l_cont > 0.0 && b.l_ce > 0.0);
        assert_eq!(grads.len(), model.param_count_tensors());
    }
}

trait Count {
    fn param_count_tensors(&self) -> usize;
}

impl<M: Module> Count for M {
    fn param_count_tensors(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }
}

#[test]
fn tiny_gradient_step_decreases_loss() {
    let scene = synth_scene(&small_synth(), 1).unwrap();
    let opts = LossOptions::default();
    for seed in 0..5 {
        let mut model = Model::new(small_config(), seed).unwrap();
        let (before, grads) = scene_gradients(&model, &scene, &opts).unwrap();
        model.visit_mut(&mut |p| {
            let g = grads[p.name()].clone();
            for (w, d) in p.value_mut().data_mut().iter_mut().zip(g.data()) {
                *w -= 1e-4 * d;
            }
        });
        let (after, _) = scene_gradients(&model, &scene, &opts).unwrap();
        assert!(after.total < before.total, "seed {seed}: {} -> {}", before.total, after.total);
    }
}

#[test]
fn total_recomputes_property() {
    proptest!(ProptestConfig::with_cases(64), |(terms in proptest::array::uniform6(0.0f64..10.0))| {
        let b = LossBreakdown::from_terms(terms);
        let manual = 0.5 * terms[0] + terms[1] + terms[2] + 0.5 * terms[3] + 0.5 * terms[4] + terms[5];
        prop_assert!((b.total - manual).abs() <= 1e-12);
        prop_assert!(b.terms() == terms);
    });
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        base_lr: 1e-3,
        eval_every: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_keep_initialization() {
    let scenes = synth_dataset(&SynthConfig {
        scene_count: 2,
        ..small_synth()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..quick_train()
    };
    let out = train(&scenes, &[], &small_config(), &cfg, &EvalConfig::default(), 5).unwrap();
    assert!(out.log.is_empty());
    let init = Model::new(small_config(), 5).unwrap();
    let mut a = Vec::new();
    let mut b = Vec::new();
    out.model.visit(&mut |p| a.push(p.value().clone()));
    init.visit(&mut |p| b.push(p.value().clone()));
    assert_eq!(a, b);
}

#[test]
fn training_is_deterministic_and_logs_metrics() {
    let scenes = synth_dataset(&SynthConfig {
        scene_count: 3,
        ..small_synth()
    })
    .unwrap();
    let run = || {
        let out = train(&scenes[..2], &scenes[2..], &small_config(), &quick_train(), &EvalConfig::default(), 9)
            .unwrap();
        out.log.iter().map(EpochLog::to_json_line).collect::<Vec<_>>().join("\n")
    };
    let a = run();
    assert_eq!(a, run());
    let first: serde_json::Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    for key in ["epoch", "lr", "l_ce", "l_bce", "l_dice", "l_center", "l_score", "l_cont", "total", "ap25", "ap50", "map"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert!(first["ap25"].is_number());
}

#[test]
fn too_many_instances_for_queries() {
    let scenes = synth_dataset(&SynthConfig {
        scene_count: 1,
        boxes_min: 3,
        boxes_max: 3,
        ..small_synth()
    })
    .unwrap();
    let cfg = DecoderConfig {
        queries: 2,
        ..small_config()
    };
    let err = train(&scenes, &[], &cfg, &quick_train(), &EvalConfig::default(), 0).err().unwrap();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn nan_weights_diverge() {
    let mut model = Model::new(small_config(), 0).unwrap();
    model.visit_mut(&mut |p| p.value_mut().data_mut().iter_mut().for_each(|v| *v = f64::NAN));
    let scene = synth_scene(&small_synth(), 0).unwrap();
    let err = scene_gradients(&model, &scene, &LossOptions::default()).err().unwrap();
    assert_eq!(err.exit_code(), 3);
}
