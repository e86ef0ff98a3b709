use std::collections::{BTreeMap, HashMap};

use super::Scene;
use crate::error::{Error, Result};

fn majority(values: impl Iterator<Item = i64>) -> i64 {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best = (0, 0usize);
    for (v, n) in counts {
        if n > best.1 {
            best = (v, n);
        }
    }
    best.0
}

/// Keeps one representative point per occupied voxel of edge `size`.
///
/// The representative sits at the members' centroid (clamped into their
/// bounding box so it stays in the same voxel), carries the averaged color
/// and normal, and the majority superpoint and instance. Its semantic label
/// is the one of the chosen instance, or the majority label for background.
/// Output order follows first occurrence of each voxel.
pub fn voxelize(scene: &Scene, size: f64) -> Result<Scene> {
    if !(size > 0.0) {
        return Err(Error::Config(format!("voxel size must be positive, got {size}")));
    }
    let mut order: Vec<[i64; 3]> = Vec::new();
    let mut groups: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in scene.positions().iter().enumerate() {
        let key = [
            (p[0] / size).floor() as i64,
            (p[1] / size).floor() as i64,
            (p[2] / size).floor() as i64,
        ];
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }

    let n = order.len();
    let mut positions = Vec::with_capacity(n);
    let mut colors = scene.colors().map(|_| Vec::with_capacity(n));
    let mut normals = scene.normals().map(|_| Vec::with_capacity(n));
    let mut superpoints = Vec::with_capacity(n);
    let mut instances = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);

    let mean3 = |src: &[[f64; 3]], members: &[usize]| {
        let mut m = [0.0; 3];
        for &i in members {
            for a in 0..3 {
                m[a] += src[i][a];
            }
        }
        m.map(|v| v / members.len() as f64)
    };

    for key in &order {
        let members = &groups[key];
        let pos = scene.positions();
        let mut c = mean3(pos, members);
        for a in 0..3 {
            let lo = members.iter().map(|&i| pos[i][a]).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|&i| pos[i][a]).fold(f64::NEG_INFINITY, f64::max);
            c[a] = c[a].clamp(lo, hi);
        }
        positions.push(c);
        if let (Some(out), Some(src)) = (colors.as_mut(), scene.colors()) {
            out.push(mean3(src, members).map(|v: f64| v.clamp(0.0, 1.0)));
        }
        if let (Some(out), Some(src)) = (normals.as_mut(), scene.normals()) {
            let m = mean3(src, members);
            let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            out.push(if len > 1e-9 {
                m.map(|v| v / len)
            } else {
                src[members[0]]
            });
        }
        superpoints.push(majority(members.iter().map(|&i| scene.superpoint_id()[i] as i64)));
        let inst = majority(members.iter().map(|&i| scene.instance_id()[i]));
        instances.push(inst);
        let label = if inst >= 0 {
            let first = members
                .iter()
                .find(|&&i| scene.instance_id()[i] == inst)
                .expect("majority instance has a member");
            scene.semantic_label()[*first]
        } else {
            majority(
                members
                    .iter()
                    .filter(|&&i| scene.instance_id()[i] < 0)
                    .map(|&i| scene.semantic_label()[i]),
            )
        };
        labels.push(label);
    }

    Scene::new(
        positions,
        colors,
        normals,
        superpoints,
        instances,
        labels,
        scene.category_count(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<[f64; 3]>) -> Scene {
        let n = points.len();
        Scene::new(points, None, None, vec![0; n], vec![-1; n], vec![-1; n], 1).unwrap()
    }

    #[test]
    fn distant_points_survive() {
        let s = cloud(vec![[0.001; 3], [1.001, 0.001, 0.001]]);
        assert_eq!(voxelize(&s, 0.02).unwrap().len(), 2);
    }

    #[test]
    fn close_points_merge() {
        let s = cloud(vec![[0.005; 3], [0.006, 0.005, 0.005]]);
        let v = voxelize(&s, 0.02).unwrap();
        assert_eq!(v.len(), 1);
        assert!((v.positions()[0][0] - 0.0055).abs() < 1e-12);
    }

    #[test]
    fn one_cube_collapses_to_one_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = [20.0 * 0.02, 10.0 * 0.02, 30.0 * 0.02];
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| base.map(|b| b + rng.gen_range(0.0005..0.0195)))
            .collect();
        let keys: std::collections::HashSet<[i64; 3]> = pts
            .iter()
            .map(|p| p.map(|v| (v / 0.02).floor() as i64))
            .collect();
        assert_eq!(keys.len(), 1);
        assert_eq!(voxelize(&cloud(pts), 0.02).unwrap().len(), 1);
    }

    #[test]
    fn labels_follow_the_majority_instance() {
        let s = Scene::new(
            vec![[0.001; 3], [0.002; 3], [0.003; 3]],
            None,
            None,
            vec![0, 1, 1],
            vec![2, 2, 5],
            vec![1, 1, 0],
            2,
        )
        .unwrap();
        let v = voxelize(&s, 0.02).unwrap();
        assert_eq!(v.instance_id(), &[2]);
        assert_eq!(v.semantic_label(), &[1]);
        assert_eq!(v.superpoint_count(), 1);
    }

    #[test]
    fn rejects_non_positive_size() {
        let s = cloud(vec![[0.0; 3]]);
        assert!(voxelize(&s, 0.0).is_err());
    }
}
