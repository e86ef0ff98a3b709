//! Adaptive superpoint aggregation: point features are pooled into
//! superpoint features with learned, per-superpoint softmax weights.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, Mlp, Module, Param};
use crate::numerics::{Graph, PoolMode, Tensor, Var};
use crate::scene::Scene;

/// Point→superpoint assignment together with the member lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpointPartition {
    assignment: Arc<[usize]>,
    members: Vec<Vec<usize>>,
}

impl SuperpointPartition {
    /// `ids[i]` is the superpoint of point `i`; every id in `[0, count)` must
    /// own at least one point.
    pub fn from_ids(ids: &[usize], count: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); count];
        for (i, &s) in ids.iter().enumerate() {
            if s >= count {
                return Err(Error::validation("superpoint_id", format!("{s} >= {count}")));
            }
            members[s].push(i);
        }
        if let Some(s) = members.iter().position(Vec::is_empty) {
            return Err(Error::validation("superpoint_id", format!("superpoint {s} is empty")));
        }
        Ok(Self {
            assignment: ids.into(),
            members,
        })
    }

    pub fn from_scene(scene: &Scene) -> Self {
        Self::from_ids(scene.superpoint_id(), scene.superpoint_count())
            .expect("scene superpoints are dense")
    }

    pub fn point_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn segment_count(&self) -> usize {
        self.members.len()
    }

    pub fn assignment(&self) -> &Arc<[usize]> {
        &self.assignment
    }

    /// Member points of each superpoint, ascending.
    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }
}

/// Channel-wise max or mean of each superpoint's rows.
pub fn scatter_pool(f: &Tensor, part: &SuperpointPartition, mode: PoolMode) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(f.clone());
    let y = g.segment_pool(x, &Arc::new(part.clone()), mode)?;
    Ok(g.value(y).clone())
}

/// Copies each superpoint row back to its member points.
pub fn broadcast(fs: &Tensor, part: &SuperpointPartition) -> Result<Tensor> {
    if fs.rows() != part.segment_count() {
        return Err(Error::shape(format!(
            "{} superpoint rows for a partition of {}",
            fs.rows(),
            part.segment_count()
        )));
    }
    let mut g = Graph::inference();
    let x = g.constant(fs.clone());
    let y = g.gather_rows(x, part.assignment().clone())?;
    Ok(g.value(y).clone())
}

/// Softmax of an `N×1` score column within each superpoint.
pub fn superpoint_softmax(w: &Tensor, part: &SuperpointPartition) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(w.clone());
    let y = g.segment_softmax(x, &Arc::new(part.clone()))?;
    Ok(g.value(y).clone())
}

/// Two scoring MLPs (`C→C→1`) and the `2C→C` fuse layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AsamParams {
    pub score_max: Mlp,
    pub score_mean: Mlp,
    pub fuse: Linear,
}

impl AsamParams {
    pub fn new<R: Rng>(name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            score_max: Mlp::new(&format!("{name}.score_max"), &[width, width, 1], rng),
            score_mean: Mlp::new(&format!("{name}.score_mean"), &[width, width, 1], rng),
            fuse: Linear::new(&format!("{name}.fuse"), 2 * width, width, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.fuse.out_dim()
    }
}

impl Module for AsamParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.score_max.visit(f);
        self.score_mean.visit(f);
        self.fuse.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.score_max.visit_mut(f);
        self.score_mean.visit_mut(f);
        self.fuse.visit_mut(f);
    }
}

/// Records the aggregation of `features: N×C` into `M×C` on `g`.
pub fn asam_graph(
    g: &mut Graph,
    features: Var,
    part: &Arc<SuperpointPartition>,
    p: &AsamParams,
) -> Result<Var> {
    let c = g.value(features).cols();
    if c != p.width() {
        return Err(Error::shape(format!("ASAM width {} applied to {c} channels", p.width())));
    }
    let branch = |g: &mut Graph, mode: PoolMode, mlp: &Mlp| -> Result<Var> {
        let pooled = g.segment_pool(features, part, mode)?;
        let spread = g.gather_rows(pooled, part.assignment().clone())?;
        let diff = g.sub(spread, features)?;
        let score = mlp.forward(g, diff)?;
        let weight = g.segment_softmax(score, part)?;
        let weighted = g.mul_col(features, weight)?;
        g.segment_sum(weighted, part)
    };
    let from_max = branch(g, PoolMode::Max, &p.score_max)?;
    let from_mean = branch(g, PoolMode::Mean, &p.score_mean)?;
    let both = g.concat_cols(&[from_max, from_mean])?;
    p.fuse.forward(g, both)
}

/// Value-level aggregation; see [`asam_graph`].
pub fn asam_forward(f: &Tensor, part: &SuperpointPartition, p: &AsamParams) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(f.clone());
    let y = asam_graph(&mut g, x, &Arc::new(part.clone()), p)?;
    Ok(g.value(y).clone())
}
