//! Same-instance prior over superpoint pairs and the contrastive loss of
//! features against it.

use relation3d::contrastive::{contrastive_loss, cosine_similarity_matrix, feature_contrastive_loss, RelationPrior};
use relation3d::numerics::Tensor;
use relation3d::scene::{synth_scene, SynthConfig};

fn main() -> relation3d::Result<()> {
    // Two orthogonal superpoints of different instances.
    let prior = RelationPrior::from_assignment(vec![0, 1]);
    let (s, _) = cosine_similarity_matrix(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]))?;
    println!("orthogonal pair: {:.6}", contrastive_loss(&s, &prior)?);

    let scene = synth_scene(&SynthConfig::default(), 0)?;
    let prior = RelationPrior::from_scene(&scene);
    println!("prior over {} superpoints, assignment {:?}", prior.len(), prior.assignment());

    // One-hot instance features give the ideal similarity pattern.
    let ids = prior.assignment();
    let width = ids.iter().copied().max().unwrap_or(0) as usize + 2;
    let rows: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(s, &id)| {
            let mut r = vec![0.0; width + ids.len()];
            match id {
                -1 => r[width + s] = 1.0,
                id => r[id as usize] = 1.0,
            }
            r
        })
        .collect();
    let (ideal, _) = feature_contrastive_loss(&Tensor::from_rows(&rows), &scene)?;
    let (flat, zero_rows) = feature_contrastive_loss(&Tensor::full(&[ids.len(), 4], 1.0), &scene)?;
    println!("one-hot instance features: {ideal:.4}");
    println!("identical features: {flat:.4} ({zero_rows} zero-norm rows)");
    Ok(())
}
