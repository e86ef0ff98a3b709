//! Trains briefly, then scores the validation rooms and labels the points of
//! one of them. A checkpoint round trip must not change the report.

use relation3d::decoder::{checkpoint_bytes, checkpoint_from_bytes, DecoderConfig};
use relation3d::eval::{evaluate, infer_instances, point_labels, EvalConfig};
use relation3d::scene::{synth_dataset, SynthConfig};
use relation3d::training::{train, TrainConfig};

fn main() -> relation3d::Result<()> {
    let scenes = synth_dataset(&SynthConfig {
        scene_count: 14,
        seed: 5,
        ..SynthConfig::default()
    })?;
    let (train_set, val_set) = scenes.split_at(10);
    let cfg = TrainConfig {
        epochs: 60,
        base_lr: 5e-4,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let eval_cfg = EvalConfig::default();
    let model = train(train_set, &[], &DecoderConfig::default(), &cfg, &eval_cfg, 5)?.model;

    let report = evaluate(val_set, &model, &eval_cfg)?;
    println!(
        "mAP {:.3}  AP@50 {:.3}  AP@25 {:.3}  ({} predictions, {} ground truths)",
        report.map, report.ap50, report.ap25, report.predictions, report.ground_truths
    );
    for c in &report.categories {
        println!("  category {}: {} gt, AP@25 {:?}", c.category, c.ground_truths, c.ap25);
    }

    let restored = checkpoint_from_bytes(&checkpoint_bytes(&model), None)?;
    assert_eq!(evaluate(val_set, &restored, &eval_cfg)?, report);

    let scene = &val_set[0];
    let kept = infer_instances(scene, &model, &eval_cfg)?;
    let labels = point_labels(scene.len(), &kept);
    for inst in &labels.instances {
        println!(
            "query {} -> category {} confidence {:.3} covering {} of {} points",
            inst.query,
            inst.category,
            inst.confidence,
            inst.points,
            scene.len()
        );
    }
    Ok(())
}
