//! Parameter-holding layers shared by the encoder and the ASR model.
//!
//! Layers only store parameter names; values live in a [`ParameterSet`] and
//! are bound to a [`Graph`] at forward time.

use rand::Rng as _;

use crate::error::Result;
use crate::rng;
use crate::tensor::{Activation, Graph, ParameterSet, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Registers freshly initialised parameters. Every tensor draws from its own
/// sub-stream keyed by name, so two models sharing parameter names start
/// from identical values regardless of what else they contain.
pub struct Init<'a> {
    pub params: &'a mut ParameterSet,
    pub seed: u64,
}

impl<'a> Init<'a> {
    pub fn new(params: &'a mut ParameterSet, seed: u64) -> Self {
        Self { params, seed }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<String> {
        let mut r = rng::substream(self.seed, name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(-bound..=bound)).collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data)?)?;
        Ok(name.to_string())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<String> {
        self.params.insert(name, Tensor::filled(shape, value))?;
        Ok(name.to_string())
    }

    pub fn linear(&mut self, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Ok(Linear {
            w: self.uniform(&format!("{prefix}.w"), &[in_dim, out_dim], bound)?,
            b: Some(self.constant(&format!("{prefix}.b"), &[out_dim], 0.0)?),
            in_dim,
            out_dim,
        })
    }

    pub fn linear_no_bias(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Ok(Linear {
            w: self.uniform(&format!("{name}.w"), &[in_dim, out_dim], bound)?,
            b: None,
            in_dim,
            out_dim,
        })
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.constant(&format!("{prefix}.gamma"), &[dim], 1.0)?,
            beta: self.constant(&format!("{prefix}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> Result<String> {
        self.uniform(name, &[rows, dim], 0.1)
    }

    pub fn attention(&mut self, prefix: &str, dim: usize, heads: usize) -> Result<MultiHeadAttention> {
        Ok(MultiHeadAttention {
            q: self.linear(&format!("{prefix}.q"), dim, dim)?,
            k: self.linear(&format!("{prefix}.k"), dim, dim)?,
            v: self.linear(&format!("{prefix}.v"), dim, dim)?,
            o: self.linear(&format!("{prefix}.o"), dim, dim)?,
            heads,
        })
    }

    pub fn feed_forward(&mut self, prefix: &str, dim: usize, hidden: usize, act: Activation) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{prefix}.up"), dim, hidden)?,
            down: self.linear(&format!("{prefix}.down"), hidden, dim)?,
            act,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, p: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(p, &self.w)?;
        let y = g.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let b = g.param(p, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: String,
    pub beta: String,
}

impl Norm {
    pub fn layer(&self, g: &mut Graph, p: &ParameterSet, x: Var) -> Result<Var> {
        let gamma = g.param(p, &self.gamma)?;
        let beta = g.param(p, &self.beta)?;
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }

    /// Instance norm of a length×channels sequence (statistics per channel over time).
    pub fn instance_over_time(&self, g: &mut Graph, p: &ParameterSet, x: Var) -> Result<Var> {
        let gamma = g.param(p, &self.gamma)?;
        let beta = g.param(p, &self.beta)?;
        let xt = g.transpose(x)?;
        let y = g.instance_norm(xt, gamma, beta, NORM_EPS)?;
        g.transpose(y)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Queries from `x`, keys and values from `context`.
    pub fn forward(&self, g: &mut Graph, p: &ParameterSet, x: Var, context: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, x, context)?.0)
    }

    pub fn forward_with_weights(&self, g: &mut Graph, p: &ParameterSet, x: Var, context: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, context)?;
        let v = self.v.forward(g, p, context)?;
        let (a, w) = g.attention_with_weights(q, k, v, self.heads)?;
        Ok((self.o.forward(g, p, a)?, w))
    }

    pub fn param_count(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.o].iter().map(|l| l.param_count()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, p: &ParameterSet, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.activation(h, self.act)?;
        self.down.forward(g, p, h)
    }

    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.down.param_count()
    }
}
