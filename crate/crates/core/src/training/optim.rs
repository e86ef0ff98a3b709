use std::collections::{BTreeMap, HashMap};

use crate::numerics::nn::Module;
use crate::numerics::Tensor;

/// `base_lr · (1 − step/max_steps)^power`.
pub fn poly_lr(step: usize, max_steps: usize, base_lr: f64, power: f64) -> f64 {
    if max_steps == 0 {
        return base_lr;
    }
    let left = 1.0 - step.min(max_steps) as f64 / max_steps as f64;
    base_lr * left.powf(power)
}

/// Adaptive moments with decoupled weight decay and global-norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub clip: Option<f64>,
    steps: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64, clip: Option<f64>) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            clip,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update; parameters without a gradient only decay.
    /// Returns the gradient norm before clipping.
    pub fn step<M: Module>(&mut self, model: &mut M, grads: &HashMap<String, Tensor>, lr: f64) -> f64 {
        let mut sq = 0.0;
        model.visit(&mut |p| {
            if let Some(g) = grads.get(p.name()) {
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        });
        let norm = sq.sqrt();
        let factor = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let fix1 = 1.0 - self.beta1.powi(self.steps);
        let fix2 = 1.0 - self.beta2.powi(self.steps);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        model.visit_mut(&mut |p| {
            let shape = p.value().shape().to_vec();
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let grad = grads.get(p.name());
            let w = p.value_mut().data_mut();
            for i in 0..w.len() {
                let gi = grad.map_or(0.0, |g| g.data()[i] * factor);
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (m.data()[i] / fix1) / ((v.data()[i] / fix2).sqrt() + eps);
                w[i] -= lr * (update + wd * w[i]);
            }
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::Param;

    struct One(Param);

    impl Module for One {
        fn visit(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }

        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(0, 100, 2e-4, 0.9), 2e-4);
        assert_eq!(poly_lr(100, 100, 2e-4, 0.9), 0.0);
        assert_eq!(poly_lr(50, 100, 2e-4, 1.0), 1e-4);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr·sign(g) (up to eps).
        let mut m = One(Param::new("w", Tensor::vector(vec![1.0, -1.0])));
        let grads = HashMap::from([("w".to_string(), Tensor::vector(vec![0.3, -0.02]))]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-12, 0.0, None);
        opt.step(&mut m, &grads, 0.1);
        assert!((m.0.value().data()[0] - 0.9).abs() < 1e-9);
        assert!((m.0.value().data()[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut m = One(Param::new("w", Tensor::vector(vec![2.0])));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.05, Some(1.0));
        opt.step(&mut m, &HashMap::new(), 0.1);
        assert!((m.0.value().data()[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut m = One(Param::new("w", Tensor::vector(vec![0.0, 0.0])));
        let grads = HashMap::from([("w".to_string(), Tensor::vector(vec![30.0, 40.0]))]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0, Some(1.0));
        assert_eq!(opt.step(&mut m, &grads, 0.1), 50.0);
        let m = opt.moments["w"].0.data();
        assert!((m[0] - 0.06).abs() < 1e-15 && (m[1] - 0.08).abs() < 1e-15);
    }
}
