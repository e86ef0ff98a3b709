//! Feature-stage contrastive loss and self-attention statistics of a briefly
//! trained model.

use relation3d::decoder::{decoder_forward, DecoderConfig};
use relation3d::eval::{attention_histograms, stage_contrastive, EvalConfig};
use relation3d::scene::{synth_dataset, SynthConfig};
use relation3d::training::{train, TrainConfig};

fn main() -> relation3d::Result<()> {
    let scenes = synth_dataset(&SynthConfig {
        scene_count: 12,
        seed: 2,
        ..SynthConfig::default()
    })?;
    let (train_set, val_set) = scenes.split_at(9);
    let cfg = TrainConfig {
        epochs: 40,
        base_lr: 5e-4,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let model = train(train_set, &[], &DecoderConfig::default(), &cfg, &EvalConfig::default(), 2)?.model;

    let stages = stage_contrastive(val_set, &model)?;
    let named: Vec<String> = stages.iter().enumerate().map(|(i, l)| format!("stage {}: {l:.4}", i + 1)).collect();
    println!("{}", named.join("  "));

    let out = decoder_forward(&val_set[0], &model)?;
    for h in attention_histograms(&out.self_attention, 10) {
        println!("layer {} mean {:.3} excluded {:>3} counts {:?}", h.layer, h.mean, h.excluded, h.counts);
    }
    Ok(())
}
