//! Self-distillation pretraining of the adapters and projection head.
//!
//! Per step: forward both views through student and teacher, backward the
//! symmetrised loss, AdamW on the student, EMA of the teacher, then the
//! centre update. The backbone stays frozen throughout.

use super::augment::{augment, stack, AugmentConfig};
use super::dino::{dino_loss_graph, head_graph, teacher_probs, DinoConfig, DinoState};
use super::optim::{AdamW, AdamWConfig};
use super::params::ParamSet;
use super::tape::Tape;
use super::tensor::Tensor;
use super::vit::{cls_graph, vit_graph, Encoder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub dino: DinoConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch: 16,
            optimizer: AdamWConfig {
                lr: 5e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.04,
            },
            dino: DinoConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    /// Encoder with the student's adapters.
    pub encoder: Encoder<T>,
    /// Student projection head.
    pub head: ParamSet<T>,
    pub state: DinoState<T>,
    /// Training loss of each step.
    pub losses: Vec<T>,
    pub probe_loss_initial: T,
    pub probe_loss_final: T,
}

const PROBE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Splits a trainable set into (adapters, head).
fn split_trainable<T: Scalar>(p: &ParamSet<T>) -> (ParamSet<T>, ParamSet<T>) {
    (p.filter_prefix("blocks."), p.filter_prefix("head."))
}

fn logits<T: Scalar>(
    encoder: &Encoder<T>,
    trainable: &ParamSet<T>,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let base = encoder.base.bind(&mut tape, false);
    let tr = trainable.bind(&mut tape, false);
    let scale = T::of(encoder.lora.scale());
    let tokens = vit_graph(&mut tape, &encoder.config, &base, Some((&tr, scale)), images)?;
    let cls = cls_graph(&mut tape, tokens)?;
    let out = head_graph(&mut tape, &tr, cls)?;
    Ok(tape.value(out).clone())
}

/// Symmetrised loss of the current state on a fixed `[2B, 3, n, n]` batch.
pub fn probe_loss<T: Scalar>(encoder: &Encoder<T>, state: &DinoState<T>, views: &Tensor<T>) -> Result<T> {
    let t_logits = logits(encoder, &state.teacher, views)?;
    let targets = teacher_probs(&t_logits, &state.center, state.config.tau_teacher)?;
    let mut tape = Tape::new();
    let s_logits = tape.constant(logits(encoder, &state.student, views)?);
    let loss = dino_loss_graph(&mut tape, s_logits, &targets, state.config.tau_student)?;
    Ok(tape.value(loss).item())
}

fn two_views<T: Scalar, R: Rng>(
    images: &[&Tensor<T>],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut a = Vec::with_capacity(images.len());
    let mut b = Vec::with_capacity(images.len());
    for img in images {
        a.push(augment(img, cfg, rng)?);
        b.push(augment(img, cfg, rng)?);
    }
    a.extend(b);
    stack(&a)
}

/// Runs `cfg.steps` optimisation steps on patches from `stream` (each
/// `[3, net_px, net_px]`). `observer(k, state)` sees the state after `k`
/// steps, for `k` in `0..=steps`.
pub fn pretrain<T: Scalar>(
    encoder: &Encoder<T>,
    stream: &[Tensor<T>],
    cfg: &PretrainConfig,
    observer: &mut dyn FnMut(usize, &DinoState<T>),
) -> Result<PretrainOutcome<T>> {
    if stream.is_empty() {
        return Err(Error::InvalidArgument("pretraining stream is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::validation("batch", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut student = encoder.adapters.clone();
    student.extend(cfg.dino.init_head(encoder.config.embed_dim, cfg.seed ^ 0x4ead));
    let mut state = DinoState::new(cfg.dino.clone(), student)?;
    let mut opt = AdamW::new(cfg.optimizer);

    let probe_imgs: Vec<&Tensor<T>> = stream.iter().take(cfg.batch).collect();
    let probe_views = two_views(
        &probe_imgs,
        &cfg.augment,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_SEED_SALT),
    )?;
    let probe_loss_initial = probe_loss(encoder, &state, &probe_views)?;
    observer(0, &state);

    let scale = T::of(encoder.lora.scale());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&Tensor<T>> = (0..cfg.batch)
            .map(|_| &stream[rng.random_range(0..stream.len())])
            .collect();
        let views = two_views(&batch, &cfg.augment, &mut rng)?;

        let t_logits = logits(encoder, &state.teacher, &views)?;
        let targets = teacher_probs(&t_logits, &state.center, state.config.tau_teacher)?;

        let mut tape = Tape::new();
        let base = encoder.base.bind(&mut tape, false);
        let tr = state.student.bind(&mut tape, true);
        let tokens = vit_graph(&mut tape, &encoder.config, &base, Some((&tr, scale)), &views)?;
        let cls = cls_graph(&mut tape, tokens)?;
        let s_logits = head_graph(&mut tape, &tr, cls)?;
        let loss = dino_loss_graph(&mut tape, s_logits, &targets, state.config.tau_student)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                what: "pretraining loss".into(),
                location: format!("step {step}"),
            });
        }
        let mut grads = tape.backward(loss)?;
        let mut by_name = BTreeMap::new();
        for (name, &var) in tr.iter() {
            if let Some(g) = grads.take(var) {
                by_name.insert(name.clone(), g);
            }
        }

        opt.step(&mut state.student, &by_name)?;
        state.ema_update()?;
        state.update_center(&t_logits)?;
        losses.push(loss_value);
        observer(step + 1, &state);
    }

    let probe_loss_final = probe_loss(encoder, &state, &probe_views)?;
    let (adapters, head) = split_trainable(&state.student);
    let mut trained = encoder.clone();
    trained.adapters = adapters;
    Ok(PretrainOutcome {
        encoder: trained,
        head,
        state,
        losses,
        probe_loss_initial,
        probe_loss_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::vit::{LoraConfig, VitConfig};

    fn stream(n: usize, px: usize) -> Vec<Tensor<f32>> {
        (0..n)
            .map(|k| {
                Tensor::from_fn(&[3, px, px], |i| {
                    let x = (i % px) as f32 / px as f32;
                    ((k as f32 * 0.37 + x * 3.0).sin() * 0.5 + 0.5).clamp(0.0, 1.0)
                })
            })
            .collect()
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let enc = Encoder::<f32>::init(VitConfig::default(), LoraConfig::default(), 1).unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            batch: 2,
            ..Default::default()
        };
        let out = pretrain(&enc, &stream(4, 32), &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(out.encoder, enc);
        assert_eq!(out.state.teacher, out.state.student);
        assert!(out.losses.is_empty());
        assert_eq!(out.probe_loss_initial, out.probe_loss_final);
    }

    #[test]
    fn backbone_frozen_and_adapters_move() {
        let enc = Encoder::<f32>::init(VitConfig::default(), LoraConfig::default(), 1).unwrap();
        let before = enc.base.checksum();
        let cfg = PretrainConfig {
            steps: 3,
            batch: 2,
            ..Default::default()
        };
        let out = pretrain(&enc, &stream(6, 32), &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(out.encoder.base.checksum(), before);
        assert_ne!(out.encoder.adapters, enc.adapters);
        assert_eq!(out.losses.len(), 3);
    }

    #[test]
    fn empty_stream_rejected() {
        let enc = Encoder::<f32>::init(VitConfig::default(), LoraConfig::default(), 1).unwrap();
        assert!(pretrain(&enc, &[], &PretrainConfig::default(), &mut |_, _| {}).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let enc = Encoder::<f32>::init(VitConfig::default(), LoraConfig::default(), 2).unwrap();
        let cfg = PretrainConfig {
            steps: 2,
            batch: 2,
            seed: 9,
            ..Default::default()
        };
        let s = stream(5, 32);
        let a = pretrain(&enc, &s, &cfg, &mut |_, _| {}).unwrap();
        let b = pretrain(&enc, &s, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(a.state.teacher, b.state.teacher);
        assert_eq!(a.losses, b.losses);
    }
}
