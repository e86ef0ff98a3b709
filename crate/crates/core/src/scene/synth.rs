//! Synthetic rooms of axis-aligned boxes on a floor.
//!
//! Every box is one instance of a category unique within its scene. Box
//! colors are drawn around a per-category palette entry; the floor is gray.
//! Each box is cut into `superpoints_per_box` slabs along its longest axis
//! and the floor into a `background_grid × background_grid` raster; points
//! are stratified over those cells so no superpoint is empty.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scene_count: usize,
    pub boxes_min: usize,
    pub boxes_max: usize,
    pub points_per_box_min: usize,
    pub points_per_box_max: usize,
    pub extent_min: f64,
    pub extent_max: f64,
    pub background_points: usize,
    pub category_count: usize,
    pub superpoints_per_box: usize,
    pub background_grid: usize,
    pub room_size: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene_count: 20,
            boxes_min: 1,
            boxes_max: 3,
            points_per_box_min: 100,
            points_per_box_max: 150,
            extent_min: 0.4,
            extent_max: 1.2,
            background_points: 120,
            category_count: 4,
            superpoints_per_box: 4,
            background_grid: 2,
            room_size: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::validation(field, why.to_string()));
        if self.boxes_min == 0 || self.boxes_min > self.boxes_max {
            return bad("boxes_min", "need 1 <= boxes_min <= boxes_max");
        }
        if self.boxes_max > self.category_count {
            return bad("boxes_max", "boxes carry distinct categories, so boxes_max <= category_count");
        }
        if self.superpoints_per_box == 0 {
            return bad("superpoints_per_box", "must be positive");
        }
        if self.points_per_box_min < self.superpoints_per_box
            || self.points_per_box_min > self.points_per_box_max
        {
            return bad(
                "points_per_box_min",
                "need superpoints_per_box <= points_per_box_min <= points_per_box_max",
            );
        }
        if !(self.extent_min > 0.0 && self.extent_min <= self.extent_max) {
            return bad("extent_min", "need 0 < extent_min <= extent_max");
        }
        if self.background_grid == 0 {
            return bad("background_grid", "must be positive");
        }
        if self.background_points > 0 && self.background_points < self.background_grid.pow(2) {
            return bad("background_points", "need at least one point per background cell");
        }
        if !(self.room_size > self.extent_max) {
            return bad("room_size", "room must be larger than the largest box");
        }
        if self.scene_count == 0 {
            return bad("scene_count", "must be positive");
        }
        Ok(())
    }
}

/// Ground-truth box of one generated instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub category: usize,
}

#[derive(Clone, Copy)]
struct Box3 {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Box3 {
    fn footprint_overlaps(&self, other: &Box3, gap: f64) -> bool {
        (0..2).all(|a| self.lo[a] - gap < other.hi[a] && other.lo[a] - gap < self.hi[a])
    }

    fn covers_xy(&self, x: f64, y: f64, margin: f64) -> bool {
        x > self.lo[0] - margin && x < self.hi[0] + margin && y > self.lo[1] - margin && y < self.hi[1] + margin
    }
}

fn palette(category: usize, count: usize) -> [f64; 3] {
    // Evenly spaced hues at fixed saturation/value.
    let h = category as f64 / count as f64 * 6.0;
    let (s, v) = (0.8, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn jitter<R: Rng>(base: [f64; 3], amount: f64, rng: &mut R) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Generates scene `index` of the stream defined by `cfg.seed`.
pub fn synth_scene(cfg: &SynthConfig, index: u64) -> Result<Scene> {
    synth_scene_with_boxes(cfg, index).map(|(s, _)| s)
}

/// [`synth_scene`] plus the box of every instance, indexed by instance id.
pub fn synth_scene_with_boxes(cfg: &SynthConfig, index: u64) -> Result<(Scene, Vec<SynthBox>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let wanted = rng.gen_range(cfg.boxes_min..=cfg.boxes_max);
    let mut categories: Vec<usize> = (0..cfg.category_count).collect();
    categories.shuffle(&mut rng);

    let gap = 0.1;
    let mut boxes: Vec<Box3> = Vec::new();
    let mut tries = 0;
    while boxes.len() < wanted && tries < 10_000 {
        tries += 1;
        let ext = [
            rng.gen_range(cfg.extent_min..=cfg.extent_max),
            rng.gen_range(cfg.extent_min..=cfg.extent_max),
            rng.gen_range(cfg.extent_min..=cfg.extent_max),
        ];
        let x0 = rng.gen_range(0.0..=cfg.room_size - ext[0]);
        let y0 = rng.gen_range(0.0..=cfg.room_size - ext[1]);
        let b = Box3 {
            lo: [x0, y0, 0.0],
            hi: [x0 + ext[0], y0 + ext[1], ext[2]],
        };
        if boxes.iter().all(|o| !o.footprint_overlaps(&b, gap)) {
            boxes.push(b);
        }
    }

    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut superpoints = Vec::new();
    let mut instances = Vec::new();
    let mut labels = Vec::new();
    let s = cfg.superpoints_per_box;

    for (inst, b) in boxes.iter().enumerate() {
        let cat = categories[inst];
        let base = palette(cat, cfg.category_count);
        let count = rng.gen_range(cfg.points_per_box_min..=cfg.points_per_box_max);
        let ext = [0, 1, 2].map(|a| b.hi[a] - b.lo[a]);
        let axis = (0..3)
            .max_by(|&a, &c| ext[a].partial_cmp(&ext[c]).unwrap().then(c.cmp(&a)))
            .unwrap();
        for slab in 0..s {
            let share = count / s + usize::from(slab < count % s);
            let lo = b.lo[axis] + ext[axis] * slab as f64 / s as f64;
            let hi = b.lo[axis] + ext[axis] * (slab + 1) as f64 / s as f64;
            for _ in 0..share {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        rng.gen_range(lo..hi)
                    } else {
                        rng.gen_range(b.lo[a]..b.hi[a])
                    };
                }
                positions.push(p);
                colors.push(jitter(base, 0.05, &mut rng));
                superpoints.push((inst * s + slab) as i64);
                instances.push(inst as i64);
                labels.push(cat as i64);
            }
        }
    }

    let grid = cfg.background_grid;
    let cells = grid * grid;
    let first_bg = (boxes.len() * s) as i64;
    let cell = cfg.room_size / grid as f64;
    if cfg.background_points > 0 {
        for c in 0..cells {
            let (cx, cy) = ((c % grid) as f64 * cell, (c / grid) as f64 * cell);
            let share = cfg.background_points / cells + usize::from(c < cfg.background_points % cells);
            let mut placed = 0;
            let mut attempts = 0;
            while placed < share && attempts < share * 200 {
                attempts += 1;
                let x = rng.gen_range(cx..cx + cell);
                let y = rng.gen_range(cy..cy + cell);
                if boxes.iter().any(|b| b.covers_xy(x, y, 0.02)) {
                    continue;
                }
                positions.push([x, y, rng.gen_range(-0.005..0.005)]);
                colors.push(jitter([0.5; 3], 0.05, &mut rng));
                superpoints.push(first_bg + c as i64);
                instances.push(-1);
                labels.push(-1);
                placed += 1;
            }
        }
    }

    let scene = Scene::new(
        positions,
        Some(colors),
        None,
        superpoints,
        instances,
        labels,
        cfg.category_count,
    )?;
    let annotated = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| SynthBox {
            lo: b.lo,
            hi: b.hi,
            category: categories[i],
        })
        .collect();
    Ok((scene, annotated))
}

/// Scenes `0..cfg.scene_count` of the stream.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    (0..cfg.scene_count as u64).map(|i| synth_scene(cfg, i)).collect()
}
