//! Pools point features into superpoints, by plain max/mean and by the
//! learned within-superpoint weighting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relation3d::asam::{asam_forward, scatter_pool, AsamParams, SuperpointPartition};
use relation3d::numerics::{PoolMode, Tensor};

fn main() -> relation3d::Result<()> {
    let part = SuperpointPartition::from_ids(&[0, 0, 1, 1, 1, 2, 0, 2], 3)?;
    let f = Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![3.0, 1.0],
        vec![-1.0, 2.0],
        vec![0.0, 4.0],
        vec![2.0, 0.0],
        vec![5.0, 5.0],
        vec![2.0, -1.0],
        vec![1.0, 1.0],
    ]);
    println!("members {:?}", part.members());
    for mode in [PoolMode::Max, PoolMode::Mean] {
        let pooled = scatter_pool(&f, &part, mode)?;
        println!("{mode:?}: {:?}", (0..3).map(|s| pooled.row(s).to_vec()).collect::<Vec<_>>());
    }
    let params = AsamParams::new("asam", 2, &mut ChaCha8Rng::seed_from_u64(0));
    let learned = asam_forward(&f, &part, &params)?;
    println!("learned: {:?}", (0..3).map(|s| learned.row(s).to_vec()).collect::<Vec<_>>());
    Ok(())
}
