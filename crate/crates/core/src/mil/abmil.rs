use super::bag::Bag;
use crate::error::{Error, Result};
use crate::nncore::params::fan_in_uniform;
use crate::nncore::{Bound, ParamSet, Tape, Var};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbmilConfig {
    /// F, the per-patch feature length.
    pub feature_dim: usize,
    /// L, the attention hidden size.
    pub hidden: usize,
    /// C
    pub classes: usize,
}

impl AbmilConfig {
    /// L = 128 at full feature sizes, 16 at toy sizes.
    pub fn new(feature_dim: usize, classes: usize) -> Self {
        AbmilConfig {
            feature_dim,
            hidden: if feature_dim >= 1024 { 128 } else { 16 },
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 {
            return Err(Error::validation("abmil", "feature_dim and hidden must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::validation("abmil.classes", "need at least two classes"));
        }
        Ok(())
    }
}

/// Attention pooling `a = softmax(w · tanh(V h))` followed by a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Abmil<T> {
    pub config: AbmilConfig,
    /// `attn.V [L, F]`, `attn.w [1, L]`, `cls.weight [C, F]`, `cls.bias [C]`.
    pub params: ParamSet<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbmilOutput<T> {
    pub probs: Vec<T>,
    pub attention: Vec<T>,
    pub pooled: Vec<T>,
}

/// Graph handles of one forward pass.
pub struct AbmilGraph {
    pub logits: Var,
    pub attention: Var,
    pub pooled: Var,
}

impl<T: Scalar> Abmil<T> {
    pub fn init(config: AbmilConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, l, c) = (config.feature_dim, config.hidden, config.classes);
        let mut params = ParamSet::new();
        params.insert("attn.V", fan_in_uniform(&mut rng, &[l, f], f));
        params.insert("attn.w", fan_in_uniform(&mut rng, &[1, l], l));
        params.insert("cls.weight", fan_in_uniform(&mut rng, &[c, f], f));
        params.insert("cls.bias", fan_in_uniform(&mut rng, &[c], f));
        Ok(Abmil { config, params })
    }

    pub fn from_params(config: AbmilConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (f, l, c) = (config.feature_dim, config.hidden, config.classes);
        for (name, shape) in [
            ("attn.V", vec![l, f]),
            ("attn.w", vec![1, l]),
            ("cls.weight", vec![c, f]),
            ("cls.bias", vec![c]),
        ] {
            let p = params.get(name)?;
            if p.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "abmil params",
                    left: p.shape().to_vec(),
                    right: shape,
                });
            }
        }
        Ok(Abmil { config, params })
    }

    pub fn forward(&self, bag: &Bag<T>) -> Result<AbmilOutput<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let h = tape.constant(bag.features.clone());
        let g = abmil_graph(&mut tape, &p, h)?;
        let probs = tape.softmax(g.logits);
        Ok(AbmilOutput {
            probs: tape.value(probs).data().to_vec(),
            attention: tape.value(g.attention).data().to_vec(),
            pooled: tape.value(g.pooled).data().to_vec(),
        })
    }

    /// Cross-entropy of one bag.
    pub fn loss(&self, bag: &Bag<T>) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let h = tape.constant(bag.features.clone());
        let loss = ce_graph(&mut tape, &p, h, bag.label)?;
        Ok(tape.value(loss).item())
    }
}

/// Forward graph for features `h [n, F]`; logits `[1, C]`, attention `[1, n]`, pooled `[1, F]`.
pub fn abmil_graph<T: Scalar>(tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<AbmilGraph> {
    let sh = tape.value(h).shape().to_vec();
    let v = p.get("attn.V")?;
    let sv = tape.value(v).shape().to_vec();
    if sh.len() != 2 || sh[1] != sv[1] {
        return Err(Error::Shape {
            op: "abmil",
            left: sh,
            right: sv,
        });
    }
    let n = sh[0];
    let hidden = tape.matmul_t(h, v)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul_t(hidden, p.get("attn.w")?)?;
    let scores = tape.reshape(scores, &[1, n])?;
    let attention = tape.softmax(scores);
    let ht = tape.permute(h, &[1, 0])?;
    let pooled = tape.matmul_t(attention, ht)?;
    let logits = tape.matmul_t(pooled, p.get("cls.weight")?)?;
    let logits = tape.add_bcast(logits, p.get("cls.bias")?)?;
    Ok(AbmilGraph {
        logits,
        attention,
        pooled,
    })
}

/// `-log softmax(logits)[label]`.
pub fn ce_graph<T: Scalar>(tape: &mut Tape<T>, p: &Bound, h: Var, label: u32) -> Result<Var> {
    let g = abmil_graph(tape, p, h)?;
    let c = tape.value(g.logits).shape()[1];
    if label as usize >= c {
        return Err(Error::InvalidArgument(format!("label {label} outside [0, {c})")));
    }
    let logp = tape.log_softmax(g.logits);
    let picked = tape.slice(logp, 1, label as usize, 1)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -T::one()))
}
