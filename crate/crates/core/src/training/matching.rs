//! Minimum-cost assignment of ground-truth instances to queries.

use crate::decoder::LayerPrediction;
use crate::numerics::{bce_logit_value, dice_value, log_softmax_at, sigmoid, Tensor};
use crate::{Error, Result};

use super::{GroundTruth, LOSS_WEIGHTS};

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Matched query of every ground-truth instance.
    pub query_of: Vec<usize>,
    /// Queries without an instance, ascending.
    pub unmatched: Vec<usize>,
    /// Sum of the matched costs in ground-truth order.
    pub total: f64,
}

/// `K × G` matching cost of every query against every instance.
pub fn match_cost(pred: &LayerPrediction, gt: &GroundTruth) -> Result<Tensor> {
    let k = pred.query_count();
    let m = pred.mask_logits.cols();
    if gt.masks.cols() != m && !gt.is_empty() {
        return Err(Error::shape(format!(
            "prediction covers {m} superpoints, ground truth {}",
            gt.masks.cols()
        )));
    }
    let classes = pred.class_logits.cols();
    if let Some(&bad) = gt.labels.iter().find(|&&l| l + 1 >= classes) {
        return Err(Error::shape(format!("label {bad} outside {} categories", classes - 1)));
    }
    let [w_ce, w_bce, w_dice, w_center, ..] = LOSS_WEIGHTS;
    let mut out = Vec::with_capacity(k * gt.len());
    for q in 0..k {
        let logits = pred.mask_logits.row(q);
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        for g in 0..gt.len() {
            let target = gt.masks.row(g);
            let ce = -log_softmax_at(pred.class_logits.row(q), gt.labels[g]);
            let bce = logits
                .iter()
                .zip(target)
                .map(|(&z, &t)| bce_logit_value(z, t))
                .sum::<f64>()
                / m.max(1) as f64;
            let dice = dice_value(&probs, target);
            let center: f64 = (0..3).map(|a| (pred.center[q][a] - gt.centers[g][a]).abs()).sum();
            out.push(w_ce * ce + w_bce * bce + w_dice * dice + w_center * center);
        }
    }
    Tensor::matrix(k, gt.len(), out)
}

/// Optimal assignment of the columns (instances) of a `K × G` cost matrix to
/// distinct rows (queries). Among optimal assignments the lexicographically
/// smallest `(g, q)` sequence wins.
pub fn hungarian(cost: &Tensor) -> Result<MatchResult> {
    let (k, g) = cost.dims2()?;
    if k < g {
        return Err(Error::Contract(format!(
            "{g} instances cannot be matched to {k} queries"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::Contract("non-finite matching cost".into()));
    }
    let c: Vec<Vec<f64>> = (0..g).map(|j| (0..k).map(|q| cost.get2(q, j)).collect()).collect();
    let all: Vec<usize> = (0..k).collect();
    let best = optimum(&c, 0, &all);
    let tol = 1e-10 * (1.0 + best.abs());

    let mut free = all;
    let mut fixed = 0.0;
    let mut query_of = Vec::with_capacity(g);
    for (row, costs) in c.iter().enumerate() {
        let pick = free
            .iter()
            .position(|&q| {
                let rest: Vec<usize> = free.iter().copied().filter(|&o| o != q).collect();
                fixed + costs[q] + optimum(&c, row + 1, &rest) <= best + tol
            })
            .expect("an optimal completion always exists");
        let q = free.remove(pick);
        fixed += costs[q];
        query_of.push(q);
    }
    let total = query_of.iter().enumerate().map(|(j, &q)| c[j][q]).sum();
    Ok(MatchResult {
        query_of,
        unmatched: free,
        total,
    })
}

/// Minimum cost of assigning rows `from..` of `c` to distinct `cols`.
fn optimum(c: &[Vec<f64>], from: usize, cols: &[usize]) -> f64 {
    let rows = &c[from..];
    let assign = solve(rows, cols);
    assign.iter().enumerate().map(|(r, &q)| rows[r][q]).sum()
}

/// Shortest augmenting path assignment with potentials; `rows.len() ≤
/// cols.len()`. Returns the chosen column of every row.
fn solve(rows: &[Vec<f64>], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return Vec::new();
    }
    let at = |i: usize, j: usize| rows[i - 1][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = cols[j - 1];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Lexicographically first optimal assignment by enumerating every
    /// injective map.
    fn brute_force(cost: &Tensor) -> (Vec<usize>, f64) {
        let (k, g) = cost.dims2().unwrap();
        fn rec(cost: &Tensor, g: usize, k: usize, cur: &mut Vec<usize>, best: &mut Option<(Vec<usize>, f64)>) {
            if cur.len() == g {
                let total: f64 = cur.iter().enumerate().map(|(j, &q)| cost.get2(q, j)).sum();
                if best.as_ref().map_or(true, |b| total < b.1) {
                    *best = Some((cur.clone(), total));
                }
                return;
            }
            for q in 0..k {
                if !cur.contains(&q) {
                    cur.push(q);
                    rec(cost, g, k, cur, best);
                    cur.pop();
                }
            }
        }
        let mut best = None;
        rec(cost, g, k, &mut Vec::new(), &mut best);
        best.unwrap()
    }

    #[test]
    fn two_by_two() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let m = hungarian(&c).unwrap();
        assert_eq!(m.query_of, vec![0, 1]);
        assert_eq!(m.total, 2.0);
        assert!(m.unmatched.is_empty());
    }

    #[test]
    fn known_three_by_three() {
        let c = Tensor::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]);
        let m = hungarian(&c).unwrap();
        let (q, total) = brute_force(&c);
        assert_eq!(m.query_of, q);
        assert_eq!(m.total, total);
        assert_eq!(total, 5.0);
    }

    #[test]
    fn equal_costs_take_the_diagonal() {
        let m = hungarian(&Tensor::full(&[5, 3], 0.7)).unwrap();
        assert_eq!(m.query_of, vec![0, 1, 2]);
        assert_eq!(m.unmatched, vec![3, 4]);
    }

    #[test]
    fn too_few_queries() {
        assert!(matches!(hungarian(&Tensor::zeros(&[2, 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_ground_truth() {
        let m = hungarian(&Tensor::zeros(&[3, 0])).unwrap();
        assert!(m.query_of.is_empty());
        assert_eq!(m.unmatched, vec![0, 1, 2]);
        assert_eq!(m.total, 0.0);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let g = rng.gen_range(1..=7);
            let k = rng.gen_range(g..=7);
            let mut data: Vec<f64> = (0..k * g).map(|_| rng.gen_range(0.0..10.0)).collect();
            // Coarse values create many ties.
            if rng.gen_bool(0.3) {
                data.iter_mut().for_each(|v| *v = v.floor());
            }
            let c = Tensor::matrix(k, g, data).unwrap();
            let m = hungarian(&c).unwrap();
            let (q, total) = brute_force(&c);
            assert_eq!(m.total, total);
            assert_eq!(m.query_of, q);
        }
    }
}
