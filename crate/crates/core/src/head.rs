//! Region attention head.
//!
//! Given one feature vector per region plus the whole image (`F`, last row is
//! the image), the head computes
//!
//! ```text
//! h[r,r'] = tanh(f_r·Wh + f_r'·Wh2 + bh)       g[r,r'] = h[r,r']·Wg + bg
//! alpha   = exp(g) normalized over r != r'      l_r     = Σ_{r'≠r} alpha[r,r'] f_r'
//! c_r     = l_r·Wc + bc     a = softmax(c)      Ca      = Σ_r a_r l_r
//! probs   = softmax(Ca·Wout + bout)
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{PairNorm, Tape, Var};
use crate::container::{self, DType};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, BoundParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wh: Tensor,
    pub wh2: Tensor,
    pub bh: Tensor,
    pub wg: Tensor,
    pub bg: Tensor,
    pub wc: Tensor,
    pub bc: Tensor,
}

const ATTENTION_NAMES: [&str; 7] = ["wh", "wh2", "bh", "wg", "bg", "wc", "bc"];

impl AttentionParams {
    pub fn init(feature_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, h) = (feature_dim, hidden_dim);
        Ok(Self {
            wh: glorot_uniform(rng, &[d, h], d, h)?,
            wh2: glorot_uniform(rng, &[d, h], d, h)?,
            bh: Tensor::zeros(&[h])?,
            wg: glorot_uniform(rng, &[h, 1], h, 1)?,
            bg: Tensor::zeros(&[1])?,
            wc: glorot_uniform(rng, &[d, 1], d, 1)?,
            bc: Tensor::zeros(&[1])?,
        })
    }

    pub fn zeros(feature_dim: usize, hidden_dim: usize) -> Result<Self> {
        let (d, h) = (feature_dim, hidden_dim);
        Ok(Self {
            wh: Tensor::zeros(&[d, h])?,
            wh2: Tensor::zeros(&[d, h])?,
            bh: Tensor::zeros(&[h])?,
            wg: Tensor::zeros(&[h, 1])?,
            bg: Tensor::zeros(&[1])?,
            wc: Tensor::zeros(&[d, 1])?,
            bc: Tensor::zeros(&[1])?,
        })
    }

    pub fn insert_into(self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let tensors = [self.wh, self.wh2, self.bh, self.wg, self.bg, self.wc, self.bc];
        for (name, t) in ATTENTION_NAMES.iter().zip(tensors) {
            store.insert(format!("{prefix}.{name}"), t)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            wh: tape.param(self.wh.clone()),
            wh2: tape.param(self.wh2.clone()),
            bh: tape.param(self.bh.clone()),
            wg: tape.param(self.wg.clone()),
            bg: tape.param(self.bg.clone()),
            wc: tape.param(self.wc.clone()),
            bc: tape.param(self.bc.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wh: Var,
    pub wh2: Var,
    pub bh: Var,
    pub wg: Var,
    pub bg: Var,
    pub wc: Var,
    pub bc: Var,
}

impl AttentionVars {
    pub fn lookup(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let v = |n: &str| bound.var(&format!("{prefix}.{n}"));
        Ok(Self {
            wh: v("wh")?,
            wh2: v("wh2")?,
            bh: v("bh")?,
            wg: v("wg")?,
            bg: v("bg")?,
            wc: v("wc")?,
            bc: v("bc")?,
        })
    }
}

/// Softmax classifier weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Classifier {
    pub fn init(feature_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("classifier needs at least 2 classes"));
        }
        Ok(Self {
            weight: glorot_uniform(rng, &[feature_dim, classes], feature_dim, classes)?,
            bias: Tensor::zeros(&[classes])?,
        })
    }

    pub fn insert_into(self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.weight"), self.weight)?;
        store.insert(format!("{prefix}.bias"), self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
}

impl ClassifierVars {
    pub fn lookup(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: bound.var(&format!("{prefix}.weight"))?,
            bias: bound.var(&format!("{prefix}.bias"))?,
        })
    }
}

/// Pairwise self-attention over the bank. Returns `(alpha[N×N], L[N×d])`.
pub fn self_attention(tape: &mut Tape, bank: &[Var], p: &AttentionVars, norm: PairNorm) -> Result<(Var, Var)> {
    if bank.len() < 2 {
        return Err(Error::invalid(format!(
            "self-attention needs at least 2 feature vectors, got {}",
            bank.len()
        )));
    }
    let f = tape.stack(bank)?;
    let u = tape.matmul(f, p.wh)?;
    let v = tape.affine(f, p.wh2, p.bh)?;
    let pairs = tape.pairwise_add(u, v)?;
    let h = tape.tanh(pairs)?;
    let scores = tape.affine(h, p.wg, p.bg)?;
    let alpha = tape.pair_softmax(scores, norm)?;
    let l = tape.matmul(alpha, f)?;
    Ok((alpha, l))
}

/// Attention over the attended activations. Returns `(a[N], Ca[1×d])`.
pub fn co_attention(tape: &mut Tape, l: Var, p: &AttentionVars) -> Result<(Var, Var)> {
    let n = tape.shape(l)[0];
    let c = tape.affine(l, p.wc, p.bc)?;
    let c = tape.reshape(c, vec![n])?;
    let a = tape.softmax(c)?;
    let row = tape.reshape(a, vec![1, n])?;
    let ca = tape.matmul(row, l)?;
    Ok((a, ca))
}

/// Class probabilities `softmax(x·W + b)` for each row of `x`.
pub fn classify(tape: &mut Tape, x: Var, p: &ClassifierVars) -> Result<Var> {
    let logits = classifier_logits(tape, x, p)?;
    tape.softmax(logits)
}

pub fn classifier_logits(tape: &mut Tape, x: Var, p: &ClassifierVars) -> Result<Var> {
    tape.affine(x, p.weight, p.bias)
}

/// Mean negative log-probability of the true labels over the batch.
pub fn batch_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(probs, labels)
}

/// Attention values captured from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub alpha: Tensor,
    pub l: Tensor,
    pub a: Tensor,
    pub ca: Tensor,
}

impl AttentionTrace {
    pub fn capture(tape: &Tape, alpha: Var, l: Var, a: Var, ca: Var) -> Self {
        Self {
            alpha: tape.value(alpha).clone(),
            l: tape.value(l).clone(),
            a: tape.value(a).clone(),
            ca: tape.value(ca).clone(),
        }
    }

    /// Writes `alpha.rant`, `l.rant`, `a.rant` and `ca.rant` (64-bit) into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in [("alpha", &self.alpha), ("l", &self.l), ("a", &self.a), ("ca", &self.ca)] {
            container::write_file(&dir.join(format!("{name}.rant")), t, DType::F64)?;
        }
        Ok(())
    }
}
