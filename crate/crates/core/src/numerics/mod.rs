//! Dense `f64` tensors, a recorded operation graph with reverse-mode
//! differentiation, and the shared kernels every other module builds on.

mod gradcheck;
mod graph;
pub mod nn;
mod tensor;

pub use gradcheck::{grad_check, grad_check_module, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{CustomBackward, Gradients, Graph, PoolMode, Var};
pub use tensor::{sigmoid, Tensor};

pub(crate) use graph::{bce_logit_value, log_softmax_at};

use crate::error::{Error, Result};

/// Default base of the sine-cosine lifting.
pub const SINCOS_BASE: f64 = 10_000.0;

/// `x · w + b` evaluated without recording gradients.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(x, w, b)?;
    Ok(g.value(y).clone())
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(x.clone());
    let y = g.softmax_rows(x)?;
    Ok(g.value(y).clone())
}

/// Lifts every scalar `v` to `d` channels
/// `[sin(v/f₀), cos(v/f₀), sin(v/f₁), cos(v/f₁), …]`, `f_j = base^(2j/d)`.
///
/// The last axis grows by a factor of `d`; leading axes are kept.
pub fn sincos_encode(v: &Tensor, d: usize, base: f64) -> Result<Tensor> {
    let data = sincos_values(v.data(), d, base)?;
    let mut shape = v.shape().to_vec();
    match shape.last_mut() {
        Some(last) => *last *= d,
        None => shape.push(d),
    }
    Tensor::new(shape, data)
}

pub(crate) fn sincos_values(v: &[f64], d: usize, base: f64) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "sine-cosine channel count must be even and positive, got {d}"
        )));
    }
    if !(base > 1.0) {
        return Err(Error::Config(format!("sine-cosine base must exceed 1, got {base}")));
    }
    let freqs: Vec<f64> = (0..d / 2)
        .map(|j| 1.0 / base.powf(2.0 * j as f64 / d as f64))
        .collect();
    let mut out = Vec::with_capacity(v.len() * d);
    for &x in v {
        for &f in &freqs {
            let a = x * f;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Ok(out)
}

/// Multi-head attention on plain tensors; see [`Graph::attention`].
pub fn attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let bias = bias.map(|b| g.constant(b.clone()));
    let y = g.attention(q, k, v, bias, mask)?;
    Ok(g.value(y).clone())
}

/// Smoothed soft-dice loss `1 − (2Σpg + 1)/(Σp + Σg + 1)`.
pub fn dice_value(pred: &[f64], gt: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let total: f64 = pred.iter().sum::<f64>() + gt.iter().sum::<f64>();
    1.0 - (2.0 * inter + 1.0) / (total + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_and_closed_form() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let y = linear(&x, &w, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let x = Tensor::from_rows(&[vec![1.0, 1.0]]);
        let w = Tensor::from_rows(&[vec![2.0], vec![3.0]]);
        let y = linear(&x, &w, &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn linear_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let b = Tensor::uniform(&[5], 1.0, &mut rng);
        let y = linear(&x, &w, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = b.data()[j];
                for p in 0..3 {
                    acc += x.get2(i, p) * w.get2(p, j);
                }
                assert_abs_diff_eq!(y.get2(i, j), acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_mismatched_dims() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 1]);
        assert!(matches!(
            linear(&x, &w, &Tensor::zeros(&[1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 3f64.ln()]])).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 1000.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn sincos_examples() {
        let z = sincos_encode(&Tensor::from_rows(&[vec![0.0]]), 4, SINCOS_BASE).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0, 0.0, 1.0]);

        let h = sincos_encode(
            &Tensor::from_rows(&[vec![std::f64::consts::FRAC_PI_2]]),
            2,
            SINCOS_BASE,
        )
        .unwrap();
        assert_abs_diff_eq!(h.data()[0], 1.0, epsilon = 1e-15);
        assert!(h.data()[1].abs() < 1e-16);

        let one = sincos_encode(&Tensor::from_rows(&[vec![1.0]]), 4, SINCOS_BASE).unwrap();
        let expect = [0.8415, 0.5403, 0.0100, 0.9999];
        for (a, b) in one.data().iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
        }
        assert_abs_diff_eq!(one.data()[2], 0.01f64.sin(), epsilon = 1e-15);
    }

    #[test]
    fn sincos_width_and_odd_channels() {
        let v = Tensor::zeros(&[3, 6]);
        assert_eq!(sincos_encode(&v, 16, SINCOS_BASE).unwrap().shape(), &[3, 96]);
        assert!(matches!(
            sincos_encode(&v, 3, SINCOS_BASE),
            Err(Error::Config(_))
        ));
    }

    fn naive_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        bias: Option<&Tensor>,
        mask: Option<&[bool]>,
    ) -> Vec<f64> {
        let (h, n, c) = q.dims3().unwrap();
        let m = k.dims3().unwrap().1;
        let mut out = vec![0.0; h * n * c];
        for hh in 0..h {
            for i in 0..n {
                let any = mask.map_or(true, |mk| (0..m).any(|j| mk[i * m + j]));
                let allowed = |j: usize| !any || mask.map_or(true, |mk| mk[i * m + j]);
                let mut scores = vec![f64::NEG_INFINITY; m];
                for j in 0..m {
                    if !allowed(j) {
                        continue;
                    }
                    let mut s = 0.0;
                    for p in 0..c {
                        s += q.data()[(hh * n + i) * c + p] * k.data()[(hh * m + j) * c + p];
                    }
                    s /= (c as f64).sqrt();
                    if let Some(b) = bias {
                        s += b.data()[(hh * n + i) * m + j];
                    }
                    scores[j] = s;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = w.iter().sum();
                for p in 0..c {
                    out[(hh * n + i) * c + p] = (0..m)
                        .map(|j| w[j] / z * v.data()[(hh * m + j) * c + p])
                        .sum();
                }
            }
        }
        out
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Tensor::new(vec![1, 1, 2], vec![0.3, -0.2]).unwrap();
        let k = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let v = Tensor::new(vec![1, 1, 2], vec![5.0, -7.0]).unwrap();
        let bias = Tensor::zeros(&[1, 1, 1]);
        let y = attention_core(&q, &k, &v, Some(&bias), Some(&[true])).unwrap();
        assert_eq!(y.data(), v.data());
    }

    #[test]
    fn zero_bias_is_bitwise_identical_to_no_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::uniform(&[2, 3, 4], 1.0, &mut rng);
        let k = Tensor::uniform(&[2, 5, 4], 1.0, &mut rng);
        let v = Tensor::uniform(&[2, 5, 4], 1.0, &mut rng);
        let zero = Tensor::zeros(&[2, 3, 5]);
        let full = vec![true; 15];
        let a = attention_core(&q, &k, &v, None, None).unwrap();
        let b = attention_core(&q, &k, &v, Some(&zero), Some(&full)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = Tensor::uniform(&[2, 2, 4], 1.5, &mut rng);
            let k = Tensor::uniform(&[2, 3, 4], 1.5, &mut rng);
            let v = Tensor::uniform(&[2, 3, 4], 1.5, &mut rng);
            let bias = Tensor::uniform(&[2, 2, 3], 1.0, &mut rng);
            let mask: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.6)).collect();
            let y = attention_core(&q, &k, &v, Some(&bias), Some(&mask)).unwrap();
            let oracle = naive_attention(&q, &k, &v, Some(&bias), Some(&mask));
            for (a, b) in y.data().iter().zip(&oracle) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn attention_fully_masked_row_falls_back_to_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = Tensor::uniform(&[1, 2, 3], 1.0, &mut rng);
        let k = Tensor::uniform(&[1, 4, 3], 1.0, &mut rng);
        let v = Tensor::uniform(&[1, 4, 3], 1.0, &mut rng);
        let none = vec![false; 8];
        let a = attention_core(&q, &k, &v, None, Some(&none)).unwrap();
        let b = attention_core(&q, &k, &v, None, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let q = Tensor::zeros(&[2, 2, 4]);
        let k = Tensor::zeros(&[1, 3, 4]);
        assert!(attention_core(&q, &k, &k, None, None).is_err());
    }

    #[test]
    fn dice_closed_forms() {
        assert_eq!(dice_value(&[1.0; 4], &[1.0; 4]), 0.0);
        assert_abs_diff_eq!(dice_value(&[0.0; 4], &[1.0; 4]), 0.8, epsilon = 1e-12);
        assert_eq!(dice_value(&[0.0; 4], &[0.0; 4]), 0.0);
    }
}
