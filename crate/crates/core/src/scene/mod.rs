//! Point-cloud scenes: validated data model, file formats, voxelization,
//! synthetic generation and per-instance annotation summaries.

mod io;
mod synth;
mod voxel;

pub use io::{load_dataset, load_scene, save_dataset, save_scene, scene_from_bytes, scene_to_bytes, SceneFormat, SCENE_FORMAT_VERSION};
pub use synth::{synth_dataset, synth_scene, synth_scene_with_boxes, SynthBox, SynthConfig};
pub use voxel::voxelize;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One annotated point cloud.
///
/// Superpoint ids are dense in `[0, M)`; instance and semantic ids use `-1`
/// for background.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f64; 3]>>,
    normals: Option<Vec<[f64; 3]>>,
    superpoint_id: Vec<usize>,
    instance_id: Vec<i64>,
    semantic_label: Vec<i64>,
    category_count: usize,
    superpoint_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSummary {
    pub instance_id: i64,
    pub semantic_label: usize,
    /// Mean of member point positions.
    pub center: [f64; 3],
    /// Superpoints whose majority label is this instance, ascending.
    pub superpoints: Vec<usize>,
}

impl Scene {
    /// Validates the arrays and re-indexes superpoint ids to dense `[0, M)`
    /// (preserving their sorted order).
    pub fn new(
        positions: Vec<[f64; 3]>,
        colors: Option<Vec<[f64; 3]>>,
        normals: Option<Vec<[f64; 3]>>,
        superpoint_id: Vec<i64>,
        instance_id: Vec<i64>,
        semantic_label: Vec<i64>,
        category_count: usize,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::validation("positions", "scene has no points"));
        }
        let check_len = |field: &str, len: usize| -> Result<()> {
            if len != n {
                return Err(Error::validation(field, format!("expected {n} entries, got {len}")));
            }
            Ok(())
        };
        check_len("superpoint_id", superpoint_id.len())?;
        check_len("instance_id", instance_id.len())?;
        check_len("semantic_label", semantic_label.len())?;
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("positions", "non-finite coordinate"));
        }
        if let Some(c) = &colors {
            check_len("colors", c.len())?;
            if c.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::validation("colors", "component outside [0, 1]"));
            }
        }
        if let Some(nm) = &normals {
            check_len("normals", nm.len())?;
            for v in nm {
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if !((len - 1.0).abs() <= 1e-4) {
                    return Err(Error::validation("normals", format!("norm {len} is not unit")));
                }
            }
        }
        if superpoint_id.iter().any(|&s| s < 0) {
            return Err(Error::validation("superpoint_id", "negative superpoint id"));
        }
        if instance_id.iter().any(|&i| i < -1) {
            return Err(Error::validation("instance_id", "ids below -1 are not allowed"));
        }
        let cats = category_count as i64;
        if let Some(bad) = semantic_label.iter().find(|&&s| s < -1 || s >= cats) {
            return Err(Error::validation(
                "semantic_label",
                format!("label {bad} outside [-1, {category_count})"),
            ));
        }
        let mut label_of: BTreeMap<i64, i64> = BTreeMap::new();
        for (&inst, &lab) in instance_id.iter().zip(&semantic_label) {
            if inst < 0 {
                continue;
            }
            if lab < 0 {
                return Err(Error::validation(
                    "semantic_label",
                    format!("instance {inst} has a background label"),
                ));
            }
            match label_of.get(&inst) {
                Some(&prev) if prev != lab => {
                    return Err(Error::validation(
                        "semantic_label",
                        format!("instance {inst} carries labels {prev} and {lab}"),
                    ))
                }
                _ => {
                    label_of.insert(inst, lab);
                }
            }
        }

        let mut ids: Vec<i64> = superpoint_id.clone();
        ids.sort_unstable();
        ids.dedup();
        let dense: BTreeMap<i64, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let superpoint_id: Vec<usize> = superpoint_id.iter().map(|s| dense[s]).collect();

        Ok(Self {
            positions,
            colors,
            normals,
            superpoint_id,
            instance_id,
            semantic_label,
            category_count,
            superpoint_count: ids.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    pub fn normals(&self) -> Option<&[[f64; 3]]> {
        self.normals.as_deref()
    }

    pub fn superpoint_id(&self) -> &[usize] {
        &self.superpoint_id
    }

    pub fn instance_id(&self) -> &[i64] {
        &self.instance_id
    }

    pub fn semantic_label(&self) -> &[i64] {
        &self.semantic_label
    }

    pub fn category_count(&self) -> usize {
        self.category_count
    }

    pub fn superpoint_count(&self) -> usize {
        self.superpoint_count
    }

    /// Axis-aligned `(min, max)` corners of all points.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Majority instance id of every superpoint (`-1` = background).
    /// Ties go to the lower id.
    pub fn superpoint_instances(&self) -> Vec<i64> {
        let mut counts: Vec<BTreeMap<i64, usize>> = vec![BTreeMap::new(); self.superpoint_count];
        for (&s, &inst) in self.superpoint_id.iter().zip(&self.instance_id) {
            *counts[s].entry(inst).or_default() += 1;
        }
        counts
            .iter()
            .map(|c| {
                // BTreeMap iterates ascending, so keeping strictly larger counts
                // leaves the lowest id among ties.
                let mut best = (-1, 0usize);
                for (&id, &n) in c {
                    if n > best.1 {
                        best = (id, n);
                    }
                }
                best.0
            })
            .collect()
    }

    /// The same scene with every position mapped through `f`.
    pub fn map_positions(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Scene {
        Scene {
            positions: self.positions.iter().map(|&p| f(p)).collect(),
            ..self.clone()
        }
    }

    /// Mean position of each superpoint's member points.
    pub fn superpoint_centroids(&self) -> Vec<[f64; 3]> {
        let mut sums = vec![[0.0; 3]; self.superpoint_count];
        let mut counts = vec![0usize; self.superpoint_count];
        for (p, &s) in self.positions.iter().zip(&self.superpoint_id) {
            for a in 0..3 {
                sums[s][a] += p[a];
            }
            counts[s] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64])
            .collect()
    }
}

/// One summary per distinct instance id `>= 0`, ascending by id.
pub fn instance_summaries(scene: &Scene) -> Vec<InstanceSummary> {
    let mut acc: BTreeMap<i64, ([f64; 3], usize, i64)> = BTreeMap::new();
    for ((p, &inst), &lab) in scene
        .positions
        .iter()
        .zip(&scene.instance_id)
        .zip(&scene.semantic_label)
    {
        if inst < 0 {
            continue;
        }
        let e = acc.entry(inst).or_insert(([0.0; 3], 0, lab));
        for a in 0..3 {
            e.0[a] += p[a];
        }
        e.1 += 1;
    }
    let owners = scene.superpoint_instances();
    acc.into_iter()
        .map(|(id, (sum, count, lab))| InstanceSummary {
            instance_id: id,
            semantic_label: lab as usize,
            center: [
                sum[0] / count as f64,
                sum[1] / count as f64,
                sum[2] / count as f64,
            ],
            superpoints: owners
                .iter()
                .enumerate()
                .filter(|(_, &o)| o == id)
                .map(|(s, _)| s)
                .collect(),
        })
        .collect()
}
