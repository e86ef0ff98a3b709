//! Same-instance relation prior between superpoints, their cosine
//! similarity, and the BCE contrastive loss that pulls the two together.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scene::{InstanceSummary, Scene};

/// Norm floor for zero feature rows.
pub const NORM_EPS: f64 = 1e-12;
/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Binary `M×M` matrix: 1 iff two superpoints share an instance, or on the
/// diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationPrior {
    matrix: Tensor,
    assignment: Vec<i64>,
}

impl RelationPrior {
    /// `assignment[s]` is the instance of superpoint `s`, `-1` for background.
    pub fn from_assignment(assignment: Vec<i64>) -> Self {
        let m = assignment.len();
        let mut data = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                if i == j || (assignment[i] >= 0 && assignment[i] == assignment[j]) {
                    data[i * m + j] = 1.0;
                }
            }
        }
        Self {
            matrix: Tensor::new(vec![m, m], data).expect("square"),
            assignment,
        }
    }

    pub fn from_scene(scene: &Scene) -> Self {
        Self::from_assignment(scene.superpoint_instances())
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn assignment(&self) -> &[i64] {
        &self.assignment
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Prior over `segment_count` superpoints from instance summaries; superpoints
/// listed by no summary are background.
pub fn relation_prior(segment_count: usize, summaries: &[InstanceSummary]) -> Result<RelationPrior> {
    let mut assignment = vec![-1; segment_count];
    for s in summaries {
        for &sp in &s.superpoints {
            let slot = assignment.get_mut(sp).ok_or_else(|| {
                Error::validation("superpoints", format!("superpoint {sp} >= {segment_count}"))
            })?;
            if *slot >= 0 {
                return Err(Error::validation(
                    "superpoints",
                    format!("superpoint {sp} claimed by two instances"),
                ));
            }
            *slot = s.instance_id;
        }
    }
    Ok(RelationPrior::from_assignment(assignment))
}

/// How matrix entries are weighted in the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairWeighting {
    /// Every entry counts once.
    #[default]
    Uniform,
    /// Positive and negative entries each contribute half of the total weight.
    Balanced,
}

impl std::str::FromStr for PairWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "balanced" => Ok(Self::Balanced),
            other => Err(Error::Config(format!("unknown pair weighting `{other}`"))),
        }
    }
}

fn pair_weights(r: &Tensor, weighting: PairWeighting) -> Option<Tensor> {
    match weighting {
        PairWeighting::Uniform => None,
        PairWeighting::Balanced => {
            let total = r.len() as f64;
            let pos = r.data().iter().filter(|&&v| v > 0.5).count() as f64;
            let neg = total - pos;
            if pos == 0.0 || neg == 0.0 {
                return None;
            }
            Some(r.map(|v| if v > 0.5 { total / (2.0 * pos) } else { total / (2.0 * neg) }))
        }
    }
}

/// Records `S = n(F)·n(F)ᵀ` with `n` the row normalization; also returns
/// how many rows hit the norm floor.
pub fn similarity_graph(g: &mut Graph, features: Var) -> Result<(Var, usize)> {
    let (unit, guarded) = g.normalize_rows(features, NORM_EPS)?;
    Ok((g.matmul_nt(unit, unit)?, guarded))
}

/// Records the mean BCE between `(S + 1)/2` and the prior.
pub fn contrastive_graph(
    g: &mut Graph,
    similarity: Var,
    prior: &RelationPrior,
    weighting: PairWeighting,
) -> Result<Var> {
    if g.value(similarity).shape() != prior.matrix.shape() {
        return Err(Error::shape(format!(
            "similarity {:?} vs prior {:?}",
            g.value(similarity).shape(),
            prior.matrix.shape()
        )));
    }
    let prob = g.affine(similarity, 0.5, 0.5);
    let weights = pair_weights(&prior.matrix, weighting);
    g.bce_prob_weighted(prob, prior.matrix.clone(), weights, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Cosine similarity of every pair of rows, plus the count of zero-norm rows.
pub fn cosine_similarity_matrix(fs: &Tensor) -> Result<(Tensor, usize)> {
    let mut g = Graph::inference();
    let x = g.constant(fs.clone());
    let (s, guarded) = similarity_graph(&mut g, x)?;
    Ok((g.value(s).clone(), guarded))
}

pub fn contrastive_loss(s: &Tensor, prior: &RelationPrior) -> Result<f64> {
    let mut g = Graph::inference();
    let x = g.constant(s.clone());
    let l = contrastive_graph(&mut g, x, prior, PairWeighting::Uniform)?;
    Ok(g.value(l).item())
}

/// Loss of raw superpoint features against a scene's prior, plus the number
/// of zero-norm rows.
pub fn feature_contrastive_loss(features: &Tensor, scene: &Scene) -> Result<(f64, usize)> {
    let m = scene.superpoint_count();
    if features.rows() != m {
        return Err(Error::shape(format!("{} feature rows for {m} superpoints", features.rows())));
    }
    let (s, guarded) = cosine_similarity_matrix(features)?;
    Ok((contrastive_loss(&s, &RelationPrior::from_scene(scene))?, guarded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prior_examples() {
        let r = RelationPrior::from_assignment(vec![0, 0, 1]);
        assert_eq!(r.matrix().data(), &[1., 1., 0., 1., 1., 0., 0., 0., 1.]);
        let bg = RelationPrior::from_assignment(vec![-1; 3]);
        assert_eq!(bg.matrix().data(), &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }

    #[test]
    fn prior_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a: Vec<i64> = (0..6).map(|_| rng.gen_range(-1..3)).collect();
            let r = RelationPrior::from_assignment(a.clone());
            for i in 0..6 {
                for j in 0..6 {
                    let same = i == j || (a[i] == a[j] && a[i] != -1);
                    assert_eq!(r.matrix().get2(i, j), if same { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn prior_from_summaries() {
        let sum = |id, sps: Vec<usize>| InstanceSummary {
            instance_id: id,
            semantic_label: 0,
            center: [0.0; 3],
            superpoints: sps,
        };
        let r = relation_prior(4, &[sum(3, vec![0, 2]), sum(5, vec![1])]).unwrap();
        assert_eq!(r.assignment(), &[3, 5, 3, -1]);
        assert!(relation_prior(2, &[sum(0, vec![2])]).is_err());
    }

    #[test]
    fn similarity_examples() {
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (s, guarded) = cosine_similarity_matrix(&f).unwrap();
        assert_eq!(guarded, 0);
        assert_eq!(s.data(), &[1., 1., 0., 1., 1., 0., 0., 0., 1.]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::uniform(&[5, 8], 1.0, &mut rng);
        let mut scaled = f.clone();
        scaled.data_mut()[8..16].iter_mut().for_each(|v| *v *= 5.0);
        let (a, _) = cosine_similarity_matrix(&f).unwrap();
        let (b, _) = cosine_similarity_matrix(&scaled).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);

        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..8).map(|c| f.get2(i, c) * f.get2(j, c)).sum();
                let ni: f64 = (0..8).map(|c| f.get2(i, c).powi(2)).sum::<f64>().sqrt();
                let nj: f64 = (0..8).map(|c| f.get2(j, c).powi(2)).sum::<f64>().sqrt();
                assert!((a.get2(i, j) - dot / (ni * nj)).abs() <= 1e-12);
            }
            assert!((a.get2(i, i) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_rows_are_guarded() {
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let (s, guarded) = cosine_similarity_matrix(&f).unwrap();
        assert_eq!(guarded, 1);
        assert!(s.is_finite());
        assert_eq!(s.get2(0, 1), 0.0);
    }

    #[test]
    fn closed_form_losses() {
        let s = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = RelationPrior::from_assignment(vec![0, 1]);
        let l = contrastive_loss(&s, &r).unwrap();
        assert!((l - 0.346574).abs() <= 1e-6, "{l}");
        assert!((l - 0.5 * 2f64.ln()).abs() <= 1e-6);

        let r = RelationPrior::from_assignment(vec![0, 0, 1, -1]);
        let perfect = r.matrix().map(|v| 2.0 * v - 1.0);
        assert!(contrastive_loss(&perfect, &r).unwrap() <= 1e-6);
    }

    #[test]
    fn balanced_weighting_equalizes_classes() {
        let r = RelationPrior::from_assignment(vec![0, 1, 2, 3]);
        let w = pair_weights(r.matrix(), PairWeighting::Balanced).unwrap();
        let pos: f64 = w.data().iter().zip(r.matrix().data()).filter(|(_, &t)| t > 0.5).map(|(w, _)| w).sum();
        let neg: f64 = w.data().iter().zip(r.matrix().data()).filter(|(_, &t)| t < 0.5).map(|(w, _)| w).sum();
        assert!((pos - neg).abs() < 1e-12);
        assert!((pos + neg - 16.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_through_similarity_and_loss() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::uniform(&[4, 3], 1.0, &mut rng);
            let r = RelationPrior::from_assignment(vec![0, 0, 1, -1]);
            let report = grad_check(
                "contrastive",
                |g, v| {
                    let (s, _) = similarity_graph(g, v[0])?;
                    contrastive_graph(g, s, &r, PairWeighting::Uniform)
                },
                &[f],
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    fn random_case(seed: u64) -> (Tensor, RelationPrior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(2..7);
        let f = Tensor::uniform(&[m, 4], 1.0, &mut rng);
        let a: Vec<i64> = (0..m).map(|_| rng.gen_range(-1..3)).collect();
        (cosine_similarity_matrix(&f).unwrap().0, RelationPrior::from_assignment(a))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loss_is_nonnegative(seed in 0u64..100_000) {
            let (s, r) = random_case(seed);
            prop_assert!(contrastive_loss(&s, &r).unwrap() >= 0.0);
        }

        #[test]
        fn loss_is_permutation_invariant(seed in 0u64..100_000) {
            let (s, r) = random_case(seed);
            let m = r.len();
            let perm: Vec<usize> = (0..m).rev().collect();
            let sp: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| s.get2(i, j)).collect()).collect();
            let rp = RelationPrior::from_assignment(perm.iter().map(|&i| r.assignment()[i]).collect());
            let a = contrastive_loss(&s, &r).unwrap();
            let b = contrastive_loss(&Tensor::from_rows(&sp), &rp).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn pulling_same_instance_pair_together_never_hurts(seed in 0u64..100_000, t in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = RelationPrior::from_assignment(vec![0, 0]);
            let pair = |b: &[f64]| {
                let (s, _) = cosine_similarity_matrix(&Tensor::from_rows(&[a.clone(), b.to_vec()])).unwrap();
                contrastive_loss(&s, &r).unwrap()
            };
            let moved: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
            prop_assert!(pair(&moved) <= pair(&b) + 1e-12);
        }
    }
}
