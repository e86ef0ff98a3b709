//! Runs an untrained decoder over one scene and prints what each layer
//! predicts.

use relation3d::decoder::{decoder_forward, DecoderConfig, Model};
use relation3d::scene::{synth_scene, SynthConfig};

fn main() -> relation3d::Result<()> {
    let scene = synth_scene(&SynthConfig::default(), 3)?;
    let model = Model::new(DecoderConfig::default(), 0)?;
    let out = decoder_forward(&scene, &model)?;
    println!(
        "{} predictions ({} refinements), {} feature taps",
        out.predictions.len(),
        out.refinements,
        out.taps.len()
    );
    for (layer, pred) in out.predictions.iter().enumerate() {
        let selected: Vec<usize> = (0..pred.query_count())
            .map(|k| pred.mask_probs(k).iter().filter(|&&p| p > 0.5).count())
            .collect();
        println!("layer {layer}: superpoints selected per query {selected:?}");
    }
    let last = out.last();
    for k in 0..last.query_count() {
        let probs = last.class_probs(k);
        let best = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap_or(0);
        println!("query {k}: class {best} p={:.3}", probs[best]);
    }
    Ok(())
}
