//! Named parameters and the small layers built from them.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor with a stable, unique name.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn set(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().len());
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform `±1/√c_in` weights, zero bias.
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        Self::with_bound(name, c_in, c_out, bound, rng)
    }

    pub fn with_bound<R: Rng>(name: &str, c_in: usize, c_out: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::uniform(&[c_in, c_out], bound, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.linear(x, w, b)
    }

    pub fn zero(&mut self) {
        self.weight.value_mut().data_mut().fill(0.0);
        self.bias.value_mut().data_mut().fill(0.0);
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Stack of linear layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// ReLU between layers, identity after the last one.
    pub fn new<R: Rng>(name: &str, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                (Linear::new(&format!("{name}.{i}"), w[0], w[1], rng), act)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (lin, act) in &self.layers {
            x = lin.forward(g, x)?;
            if *act == Activation::Relu {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn zero(&mut self) {
        self.layers.iter_mut().for_each(|(l, _)| l.zero());
    }
}

impl Module for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.iter().for_each(|(l, _)| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|(l, _)| l.visit_mut(f));
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row normalization with learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub shift: Param,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            gain: Param::new(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            shift: Param::new(format!("{name}.shift"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS)?;
        let gain = g.param(&self.gain);
        let shift = g.param(&self.shift);
        let y = g.mul_row(y, gain)?;
        g.add_row(y, shift)
    }
}

impl Module for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gain);
        f(&self.shift);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}
