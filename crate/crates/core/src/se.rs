//! Squeeze-and-excitation with an additive skip connection.
//!
//! `out[·,·,c] = x[·,·,c] · s[c] + x[·,·,c]` where the gate
//! `s = σ(W2ᵀ relu(W1ᵀ z + b1) + b2)` is computed from the channel means `z`.
//! With the skip disabled the block reduces to the standard `x · s`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const MIN_BOTTLENECK: usize = 4;

pub fn bottleneck_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(MIN_BOTTLENECK)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SEParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ratio: usize,
}

impl SEParams {
    pub fn init(channels: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels == 0 || ratio == 0 {
            return Err(Error::invalid("SE block needs positive channels and ratio"));
        }
        let b = bottleneck_width(channels, ratio);
        Ok(Self {
            w1: glorot_uniform(rng, &[channels, b], channels, b)?,
            b1: Tensor::zeros(&[b])?,
            w2: glorot_uniform(rng, &[b, channels], b, channels)?,
            b2: Tensor::zeros(&[channels])?,
            ratio,
        })
    }

    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        let b = bottleneck_width(channels, ratio);
        Ok(Self {
            w1: Tensor::zeros(&[channels, b])?,
            b1: Tensor::zeros(&[b])?,
            w2: Tensor::zeros(&[b, channels])?,
            b2: Tensor::zeros(&[channels])?,
            ratio,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn insert_into(self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.w1"), self.w1)?;
        store.insert(format!("{prefix}.b1"), self.b1)?;
        store.insert(format!("{prefix}.w2"), self.w2)?;
        store.insert(format!("{prefix}.b2"), self.b2)
    }

    pub fn bind(&self, tape: &mut Tape) -> SEVars {
        SEVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SEVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl SEVars {
    pub fn lookup(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: bound.var(&format!("{prefix}.w1"))?,
            b1: bound.var(&format!("{prefix}.b1"))?,
            w2: bound.var(&format!("{prefix}.w2"))?,
            b2: bound.var(&format!("{prefix}.b2"))?,
        })
    }
}

/// Channel gate `s ∈ (0,1)^C` of an `H×W×C` map.
pub fn se_gate(tape: &mut Tape, x: Var, p: &SEVars) -> Result<Var> {
    let c = *tape.shape(x).last().expect("non-empty shape");
    if tape.shape(p.w1)[0] != c {
        return Err(Error::ShapeMismatch {
            op: "se_forward channels",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(p.w1).to_vec(),
        });
    }
    let z = tape.global_average_pool(x)?;
    let z = tape.reshape(z, vec![1, c])?;
    let hidden = tape.affine(z, p.w1, p.b1)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.affine(hidden, p.w2, p.b2)?;
    tape.sigmoid(logits)
}

pub fn se_forward(tape: &mut Tape, x: Var, p: &SEVars, skip: bool) -> Result<Var> {
    let gate = se_gate(tape, x, p)?;
    tape.channel_scale(x, gate, skip)
}
