//! Pairwise box relations and the per-head attention bias they induce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relation3d::numerics::Tensor;
use relation3d::rsa::{relation_bias, relation_tensor, rsa_forward, BBox, RsaParams};

fn main() -> relation3d::Result<()> {
    let boxes = [
        BBox::from_bounds([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]),
        BBox::from_bounds([2.0, 0.0, 0.0], [2.5, 2.0, 0.5]),
        BBox::from_bounds([0.0, 3.0, 0.0], [0.2, 3.2, 2.0]),
    ];
    let t = relation_tensor(&boxes);
    for i in 0..boxes.len() {
        for j in 0..boxes.len() {
            let r: Vec<String> = t.get(i, j).iter().map(|v| format!("{v:+.3}")).collect();
            println!("rel[{i},{j}] = [{}]", r.join(", "));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = RsaParams::new("rsa", 8, 2, 4, &mut rng)?;
    let bias = relation_bias(&t, &p)?;
    println!("bias shape {:?}, head 0 row 0 {:?}", bias.shape(), &bias.data()[..3]);
    let q = Tensor::uniform(&[3, 8], 1.0, &mut rng);
    let out = rsa_forward(&q, &boxes, &p)?;
    println!("updated queries {:?}", out.shape());
    Ok(())
}
