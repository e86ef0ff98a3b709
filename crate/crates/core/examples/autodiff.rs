//! The tape: record a small network, backpropagate, and compare against
//! central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relation3d::numerics::{grad_check, GradCheckOptions, Graph, Tensor};

fn main() -> relation3d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let w = Tensor::uniform(&[3, 2], 1.0, &mut rng);
    let b = Tensor::uniform(&[2], 0.1, &mut rng);

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(x.clone(), false), g.leaf(w.clone(), true), g.leaf(b.clone(), true));
    let h = g.linear(xv, wv, bv)?;
    let p = g.softmax_rows(h)?;
    let loss = g.cross_entropy(h, vec![0, 1, 1, 0])?;
    let grads = g.backward(loss)?;
    println!("probabilities {:?}", g.value(p).data());
    println!("loss {:.6}", g.value(loss).item());
    println!("d loss / d w {:?}", grads.get(wv).expect("w is differentiable").data());

    let report = grad_check(
        "linear+ce",
        |g, v| {
            let h = g.linear(v[0], v[1], v[2])?;
            g.cross_entropy(h, vec![0, 1, 1, 0])
        },
        &[x, w, b],
        GradCheckOptions::default(),
    )?;
    println!("finite differences: max relative error {:.2e}, passed {}", report.max_rel_error, report.passed);
    Ok(())
}
