use super::abmil::{ce_graph, Abmil, AbmilConfig};
use super::bag::Bag;
use crate::error::{Error, Result};
use crate::nncore::{AdamW, AdamWConfig, Tape};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Attention hidden size; `None` picks from the feature size.
    pub hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 1e-5,
            patience: 10,
            max_epochs: 200,
            seed: 0,
            hidden: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch of the returned snapshot; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Tracks the best validation loss and counts epochs without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a loss; returns true when it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

pub fn mean_loss<T: Scalar>(model: &Abmil<T>, bags: &[Bag<T>]) -> Result<f64> {
    let mut total = 0.0;
    for b in bags {
        total += model.loss(b)?.as_f64();
    }
    Ok(total / bags.len() as f64)
}

fn check_bags<T: Scalar>(name: &str, bags: &[Bag<T>], cfg: &AbmilConfig) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::validation(name, "no bags"));
    }
    for b in bags {
        if b.label as usize >= cfg.classes {
            return Err(Error::validation(
                format!("bag {}", b.bag_id),
                format!("label {} outside [0, {})", b.label, cfg.classes),
            ));
        }
        if b.dim() != cfg.feature_dim {
            return Err(Error::Shape {
                op: "train_abmil",
                left: b.features.shape().to_vec(),
                right: vec![cfg.feature_dim],
            });
        }
    }
    Ok(())
}

/// One bag per step, epoch order shuffled from `cfg.seed`; returns the
/// snapshot with the lowest validation loss.
pub fn train_abmil<T: Scalar>(
    train: &[Bag<T>],
    val: &[Bag<T>],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(Abmil<T>, TrainLog)> {
    let dim = train.first().map(|b| b.dim()).unwrap_or(0);
    let mut mcfg = AbmilConfig::new(dim, classes);
    if let Some(h) = cfg.hidden {
        mcfg.hidden = h;
    }
    check_bags("train", train, &mcfg)?;
    check_bags("val", val, &mcfg)?;
    let mut model = Abmil::init(mcfg, cfg.seed)?;
    let mut best = model.clone();
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: None,
        stopped_early: false,
    };
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for &i in &order {
            let bag = &train[i];
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, true);
            let h = tape.constant(bag.features.clone());
            let loss = ce_graph(&mut tape, &p, h, bag.label)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                    location: format!("epoch {epoch}, bag {}", bag.bag_id),
                });
            }
            train_total += value.as_f64();
            let mut grads = tape.backward(loss)?;
            let by_name: BTreeMap<String, _> = p
                .iter()
                .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
                .collect();
            opt.step(&mut model.params, &by_name)?;
        }
        let val_loss = mean_loss(&model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "validation loss".into(),
                location: format!("epoch {epoch}"),
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: train_total / train.len() as f64,
            val_loss,
        });
        if stopper.observe(val_loss) {
            best = model.clone();
            log.best_epoch = epoch;
        }
        if stopper.should_stop() {
            log.stopped_early = true;
            break;
        }
    }
    log.best_val_loss = stopper.best();
    Ok((best, log))
}
