//! Trains the full decoder on generated rooms and prints the metrics log.
//!
//! `cargo run --release --example train_desk -- [epochs] [seed]`

use relation3d::decoder::DecoderConfig;
use relation3d::eval::EvalConfig;
use relation3d::scene::{synth_dataset, SynthConfig};
use relation3d::training::{train, TrainConfig};

fn main() -> relation3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(60, |a| a.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));

    let scenes = synth_dataset(&SynthConfig {
        scene_count: 25,
        seed,
        ..SynthConfig::default()
    })?;
    let (train_set, val_set) = scenes.split_at(20);
    let cfg = TrainConfig {
        epochs,
        base_lr: 5e-4,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let outcome = train(train_set, val_set, &DecoderConfig::default(), &cfg, &EvalConfig::default(), seed)?;
    for line in &outcome.log {
        println!("{}", line.to_json_line());
    }
    println!("{epochs} epochs in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
