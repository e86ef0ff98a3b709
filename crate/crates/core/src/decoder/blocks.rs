use rand::Rng;

use crate::error::Result;
use crate::numerics::nn::{LayerNorm, Linear, Module, Param};
use crate::numerics::{Graph, Var};

/// Multi-head cross-attention with residual and layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: LayerNorm,
}

/// Result of one attention block: new rows and the attention node.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub attention: Var,
}

impl CrossAttention {
    pub fn new<R: Rng>(name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            heads,
            query: Linear::new(&format!("{name}.query"), width, width, rng),
            key: Linear::new(&format!("{name}.key"), width, width, rng),
            value: Linear::new(&format!("{name}.value"), width, width, rng),
            output: Linear::new(&format!("{name}.output"), width, width, rng),
            norm: LayerNorm::new(&format!("{name}.norm"), width),
        }
    }

    /// `LN(x + W_o·MHA(W_q(x + x_pos), W_k(ctx + ctx_pos), W_v ctx))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        x_pos: Option<Var>,
        ctx: Var,
        ctx_pos: Option<Var>,
        mask: Option<&[bool]>,
    ) -> Result<Attended> {
        let qin = match x_pos {
            Some(p) => g.add(x, p)?,
            None => x,
        };
        let kin = match ctx_pos {
            Some(p) => g.add(ctx, p)?,
            None => ctx,
        };
        let q = self.query.forward(g, qin)?;
        let k = self.key.forward(g, kin)?;
        let v = self.value.forward(g, ctx)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let attention = g.attention(q, k, v, None, mask)?;
        let merged = g.merge_heads(attention)?;
        let projected = self.output.forward(g, merged)?;
        let residual = g.add(x, projected)?;
        Ok(Attended {
            out: self.norm.forward(g, residual)?,
            attention,
        })
    }
}

impl Module for CrossAttention {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

/// `LN(x + W₂·relu(W₁x))` with hidden width `4C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new<R: Rng>(name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(&format!("{name}.up"), width, 4 * width, rng),
            down: Linear::new(&format!("{name}.down"), 4 * width, width, rng),
            norm: LayerNorm::new(&format!("{name}.norm"), width),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        let h = self.down.forward(g, h)?;
        let r = g.add(x, h)?;
        self.norm.forward(g, r)
    }
}

impl Module for FeedForward {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.up.visit(f);
        self.down.visit(f);
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.up.visit_mut(f);
        self.down.visit_mut(f);
        self.norm.visit_mut(f);
    }
}
