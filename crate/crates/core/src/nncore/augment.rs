//! Two-view augmentation for self-distillation: random resized crop,
//! horizontal flip and per-channel gain jitter.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image, sampled uniformly.
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub flip_prob: f64,
    /// Gains are drawn from `1 ± gain_jitter` per channel.
    pub gain_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_min: 0.4,
            crop_scale_max: 1.0,
            flip_prob: 0.5,
            gain_jitter: 0.1,
        }
    }
}

/// One augmented view of a `[3, n, n]` image, same shape as the input.
pub fn augment<T: Scalar, R: Rng>(image: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(Error::Shape {
            op: "augment",
            left: s.to_vec(),
            right: vec![3, 0, 0],
        });
    }
    let n = s[1];
    let scale = rng.random_range(cfg.crop_scale_min..=cfg.crop_scale_max);
    let side = ((n as f64) * scale.sqrt()).round().clamp(1.0, n as f64) as usize;
    let x0 = rng.random_range(0..=n - side);
    let y0 = rng.random_range(0..=n - side);
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let gains: Vec<f64> = (0..3)
        .map(|_| 1.0 + rng.random_range(-cfg.gain_jitter..=cfg.gain_jitter))
        .collect();

    let src = image.data();
    let ratio = side as f64 / n as f64;
    let mut out = Vec::with_capacity(3 * n * n);
    for (c, &gain) in gains.iter().enumerate() {
        let plane = &src[c * n * n..(c + 1) * n * n];
        for oy in 0..n {
            let sy = y0 as f64 + ((oy as f64 + 0.5) * ratio - 0.5).clamp(0.0, side as f64 - 1.0);
            let (yi, fy) = (sy.floor() as usize, sy - sy.floor());
            let yj = (yi + 1).min(n - 1);
            for ox in 0..n {
                let ox = if flip { n - 1 - ox } else { ox };
                let sx = x0 as f64 + ((ox as f64 + 0.5) * ratio - 0.5).clamp(0.0, side as f64 - 1.0);
                let (xi, fx) = (sx.floor() as usize, sx - sx.floor());
                let xj = (xi + 1).min(n - 1);
                let p = |y: usize, x: usize| plane[y * n + x].as_f64();
                let top = p(yi, xi) * (1.0 - fx) + p(yi, xj) * fx;
                let bottom = p(yj, xi) * (1.0 - fx) + p(yj, xj) * fx;
                out.push(T::of((top * (1.0 - fy) + bottom * fy) * gain));
            }
        }
    }
    Tensor::new(vec![3, n, n], out)
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Shape {
                op: "stack",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}
