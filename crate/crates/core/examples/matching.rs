//! Bipartite matching of predictions to ground truth.

use relation3d::decoder::{decoder_forward, DecoderConfig, Model};
use relation3d::numerics::Tensor;
use relation3d::scene::{synth_scene, SynthConfig};
use relation3d::training::{hungarian, match_cost, GroundTruth};

fn main() -> relation3d::Result<()> {
    let cost = Tensor::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]);
    let m = hungarian(&cost)?;
    println!("toy: query of each target {:?}, total {}", m.query_of, m.total);

    let scene = synth_scene(&SynthConfig::default(), 1)?;
    let model = Model::new(DecoderConfig::default(), 0)?;
    let out = decoder_forward(&scene, &model)?;
    let gt = GroundTruth::from_scene(&scene);
    let cost = match_cost(out.last(), &gt)?;
    let m = hungarian(&cost)?;
    println!("scene: {} targets matched to queries {:?}, unmatched {:?}", gt.len(), m.query_of, m.unmatched);
    Ok(())
}
