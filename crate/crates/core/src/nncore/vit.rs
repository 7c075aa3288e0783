//! A small pre-norm vision transformer with low-rank adapters on the
//! attention query and value projections.
//!
//! Linear weights are stored `[out, in]`. An adapted projection computes
//! `W·x + b + (alpha / r)·B·(A·x)` with `A: [r, in]` and `B: [out, r]`; `B`
//! starts at zero so a fresh adapter leaves the base model untouched.

use super::params::{fan_in_uniform, uniform, Bound, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub net_px: usize,
    pub patch_embed_px: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for VitConfig {
    /// Desk-scale geometry.
    fn default() -> Self {
        VitConfig {
            net_px: 32,
            patch_embed_px: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 6,
            ln_eps: 1e-6,
        }
    }
}

impl VitConfig {
    /// ViT-H/14-like geometry of the production backbone (never instantiated in tests).
    pub fn full_scale() -> Self {
        VitConfig {
            net_px: 224,
            patch_embed_px: 14,
            embed_dim: 1280,
            depth: 32,
            heads: 16,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_embed_px == 0 || self.net_px % self.patch_embed_px != 0 {
            return Err(Error::validation(
                "patch_embed_px",
                format!("net_px {} not divisible by {}", self.net_px, self.patch_embed_px),
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::validation(
                "heads",
                format!("embed_dim {} not divisible by {}", self.embed_dim, self.heads),
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::validation("depth", "depth and mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Patch tokens per image (excluding [CLS]).
    pub fn tokens(&self) -> usize {
        let g = self.net_px / self.patch_embed_px;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_embed_px * self.patch_embed_px
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.embed_dim
    }

    fn hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Names and shapes of the frozen backbone parameters.
    pub fn base_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.hidden();
        let mut out = vec![
            ("patch_embed.weight".into(), vec![d, self.patch_dim()]),
            ("patch_embed.bias".into(), vec![d]),
            ("cls_token".into(), vec![1, d]),
            ("pos_embed".into(), vec![1 + self.tokens(), d]),
            ("norm.weight".into(), vec![d]),
            ("norm.bias".into(), vec![d]),
        ];
        for i in 0..self.depth {
            let p = format!("blocks.{i}");
            for n in ["norm1", "norm2"] {
                out.push((format!("{p}.{n}.weight"), vec![d]));
                out.push((format!("{p}.{n}.bias"), vec![d]));
            }
            for n in ["q", "k", "v", "proj"] {
                out.push((format!("{p}.attn.{n}.weight"), vec![d, d]));
                out.push((format!("{p}.attn.{n}.bias"), vec![d]));
            }
            out.push((format!("{p}.mlp.fc1.weight"), vec![h, d]));
            out.push((format!("{p}.mlp.fc1.bias"), vec![h]));
            out.push((format!("{p}.mlp.fc2.weight"), vec![d, h]));
            out.push((format!("{p}.mlp.fc2.bias"), vec![d]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    QProj,
    VProj,
}

impl LoraTarget {
    fn proj(self) -> &'static str {
        match self {
            LoraTarget::QProj => "q",
            LoraTarget::VProj => "v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: vec![LoraTarget::QProj, LoraTarget::VProj],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn shapes(&self, vit: &VitConfig) -> Vec<(String, Vec<usize>)> {
        let d = vit.embed_dim;
        let mut out = Vec::new();
        for i in 0..vit.depth {
            for t in &self.targets {
                let p = format!("blocks.{i}.attn.{}", t.proj());
                out.push((format!("{p}.lora_a"), vec![self.rank, d]));
                out.push((format!("{p}.lora_b"), vec![d, self.rank]));
            }
        }
        out
    }
}

/// Parameter counts reported for a configured encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub base_params: usize,
    pub adapter_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
}

impl ModelSummary {
    pub fn for_config(vit: &VitConfig, lora: &LoraConfig) -> Self {
        let count = |s: Vec<(String, Vec<usize>)>| -> usize {
            s.iter().map(|(_, sh)| sh.iter().product::<usize>()).sum()
        };
        let base = count(vit.base_shapes());
        let adapters = count(lora.shapes(vit));
        let total = base + adapters;
        ModelSummary {
            base_params: base,
            adapter_params: adapters,
            total_params: total,
            trainable_fraction: adapters as f64 / total as f64,
        }
    }
}

/// Frozen backbone plus its adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub config: VitConfig,
    pub lora: LoraConfig,
    pub base: ParamSet<T>,
    pub adapters: ParamSet<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Random backbone and fresh adapters (`B = 0`).
    pub fn init(config: VitConfig, lora: LoraConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if lora.rank == 0 {
            return Err(Error::validation("lora.rank", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = ParamSet::new();
        for (name, shape) in config.base_shapes() {
            let t = if name.ends_with("norm.weight") || name.ends_with("norm1.weight") || name.ends_with("norm2.weight") {
                Tensor::full(&shape, T::one())
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name == "cls_token" || name == "pos_embed" {
                uniform(&mut rng, &shape, 0.04)
            } else {
                fan_in_uniform(&mut rng, &shape, shape[1])
            };
            base.insert(name, t);
        }
        let mut enc = Encoder {
            config,
            lora,
            base,
            adapters: ParamSet::new(),
        };
        enc.adapters = enc.fresh_adapters(seed ^ 0x10_7a);
        Ok(enc)
    }

    /// `A` random, `B` zero.
    pub fn fresh_adapters(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = ParamSet::new();
        for (name, shape) in self.lora.shapes(&self.config) {
            let t = if name.ends_with("lora_b") {
                Tensor::zeros(&shape)
            } else {
                fan_in_uniform(&mut rng, &shape, shape[1])
            };
            out.insert(name, t);
        }
        out
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary::for_config(&self.config, &self.lora)
    }

    /// Tokens `[B, 1 + T, D]` for images `[B, 3, net_px, net_px]`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let base = self.base.bind(&mut tape, false);
        let ad = self.adapters.bind(&mut tape, false);
        let scale = T::of(self.lora.scale());
        let out = vit_graph(&mut tape, &self.config, &base, Some((&ad, scale)), images)?;
        Ok(tape.value(out).clone())
    }

    /// Same backbone with the adapter branch removed entirely.
    pub fn forward_without_adapters(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let base = self.base.bind(&mut tape, false);
        let out = vit_graph(&mut tape, &self.config, &base, None, images)?;
        Ok(tape.value(out).clone())
    }

    /// Per-image features `[B, 2D]`: [CLS] then the mean of the patch tokens.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let base = self.base.bind(&mut tape, false);
        let ad = self.adapters.bind(&mut tape, false);
        let scale = T::of(self.lora.scale());
        let tokens = vit_graph(&mut tape, &self.config, &base, Some((&ad, scale)), images)?;
        let f = feature_graph(&mut tape, tokens)?;
        Ok(tape.value(f).clone())
    }
}

/// `[B, 3, P, P]` images to `[B, T, 3·p·p]` token inputs, row-major over the
/// patch grid, channel-major inside a patch.
pub fn patchify<T: Scalar>(images: &Tensor<T>, config: &VitConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    let n = config.net_px;
    if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
        return Err(Error::Shape {
            op: "patchify",
            left: s.to_vec(),
            right: vec![0, 3, n, n],
        });
    }
    let b = s[0];
    let p = config.patch_embed_px;
    let g = n / p;
    let pd = config.patch_dim();
    let src = images.data();
    let mut out = Vec::with_capacity(b * g * g * pd);
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for py in 0..p {
                        let row = ((bi * 3 + c) * n + gy * p + py) * n + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, g * g, pd], out)
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul_t(x, w)?;
    tape.add_bcast(y, b)
}

/// `W·x + b + scale·B·(A·x)`.
pub fn lora_linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    lora_a: Var,
    lora_b: Var,
    scale: T,
) -> Result<Var> {
    let base = linear(tape, x, w, b)?;
    let ax = tape.matmul_t(x, lora_a)?;
    let bax = tape.matmul_t(ax, lora_b)?;
    let delta = tape.scale(bax, scale);
    tape.add(base, delta)
}

fn affine_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &Bound, prefix: &str, eps: T) -> Result<Var> {
    let n = tape.layer_norm(x, eps);
    let g = tape.mul_bcast(n, params.get(&format!("{prefix}.weight"))?)?;
    tape.add_bcast(g, params.get(&format!("{prefix}.bias"))?)
}

fn projection<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    base: &Bound,
    adapters: Option<(&Bound, T)>,
    prefix: &str,
) -> Result<Var> {
    let w = base.get(&format!("{prefix}.weight"))?;
    let b = base.get(&format!("{prefix}.bias"))?;
    if let Some((ad, scale)) = adapters {
        if let (Ok(a), Ok(bb)) = (ad.get(&format!("{prefix}.lora_a")), ad.get(&format!("{prefix}.lora_b"))) {
            return lora_linear(tape, x, w, b, a, bb, scale);
        }
    }
    linear(tape, x, w, b)
}

/// Multi-head self-attention on `x: [B, N, D]`.
fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &VitConfig,
    base: &Bound,
    adapters: Option<(&Bound, T)>,
    prefix: &str,
) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let h = cfg.heads;
    let dh = d / h;
    let q = projection(tape, x, base, adapters, &format!("{prefix}.q"))?;
    let k = projection(tape, x, base, adapters, &format!("{prefix}.k"))?;
    let v = projection(tape, x, base, adapters, &format!("{prefix}.v"))?;

    let split = |tape: &mut Tape<T>, t: Var, perm: &[usize], shape: &[usize]| -> Result<Var> {
        let r = tape.reshape(t, &[b, n, h, dh])?;
        let p = tape.permute(r, perm)?;
        tape.reshape(p, shape)
    };
    let q = split(tape, q, &[0, 2, 1, 3], &[b * h, n, dh])?;
    let kt = split(tape, k, &[0, 2, 3, 1], &[b * h, dh, n])?;
    let v = split(tape, v, &[0, 2, 1, 3], &[b * h, n, dh])?;

    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let attn = tape.softmax(scores);
    let ctx = tape.bmm(attn, v)?;
    let ctx = tape.reshape(ctx, &[b, h, n, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, n, d])?;
    linear(
        tape,
        ctx,
        base.get(&format!("{prefix}.proj.weight"))?,
        base.get(&format!("{prefix}.proj.bias"))?,
    )
}

/// Builds the encoder graph and returns the final normalised tokens
/// `[B, 1 + T, D]`, token 0 being [CLS].
pub fn vit_graph<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &VitConfig,
    base: &Bound,
    adapters: Option<(&Bound, T)>,
    images: &Tensor<T>,
) -> Result<Var> {
    let patches = patchify(images, cfg)?;
    let b = patches.shape()[0];
    let d = cfg.embed_dim;
    let eps = T::of(cfg.ln_eps);
    let x = tape.constant(patches);
    let x = linear(tape, x, base.get("patch_embed.weight")?, base.get("patch_embed.bias")?)?;
    let zeros = tape.constant(Tensor::zeros(&[b, 1, d]));
    let cls = tape.add_bcast(zeros, base.get("cls_token")?)?;
    let x = tape.concat(&[cls, x], 1)?;
    let mut x = tape.add_bcast(x, base.get("pos_embed")?)?;

    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        let h = affine_norm(tape, x, base, &format!("{p}.norm1"), eps)?;
        let a = attention(tape, h, cfg, base, adapters, &format!("{p}.attn"))?;
        x = tape.add(x, a)?;
        let h = affine_norm(tape, x, base, &format!("{p}.norm2"), eps)?;
        let h = linear(tape, h, base.get(&format!("{p}.mlp.fc1.weight"))?, base.get(&format!("{p}.mlp.fc1.bias"))?)?;
        let h = tape.gelu(h);
        let h = linear(tape, h, base.get(&format!("{p}.mlp.fc2.weight"))?, base.get(&format!("{p}.mlp.fc2.bias"))?)?;
        x = tape.add(x, h)?;
    }
    affine_norm(tape, x, base, "norm", eps)
}

/// The [CLS] row of `[B, 1 + T, D]` tokens, as `[B, D]`.
pub fn cls_graph<T: Scalar>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    let s = tape.value(tokens).shape().to_vec();
    let cls = tape.slice(tokens, 1, 0, 1)?;
    tape.reshape(cls, &[s[0], s[2]])
}

/// `concat(CLS, mean of patch tokens)`, `[B, 2D]`.
pub fn feature_graph<T: Scalar>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    let s = tape.value(tokens).shape().to_vec();
    if s.len() != 3 || s[1] < 2 {
        return Err(Error::Shape {
            op: "feature",
            left: s,
            right: vec![0, 2, 0],
        });
    }
    let cls = cls_graph(tape, tokens)?;
    let patch = tape.slice(tokens, 1, 1, s[1] - 1)?;
    let mean = tape.mean(patch, 1)?;
    tape.concat(&[cls, mean], 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_hand_example() {
        // W = I, A = [[1, 0]], B = [[0], [2]], alpha = 2, r = 1, x = (1, 0).
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let bb = tape.constant(Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap());
        let scale = 2.0 / 1.0;
        let q = lora_linear(&mut tape, x, w, b, a, bb, scale).unwrap();
        assert_eq!(tape.value(q).data(), &[1.0, 4.0]);
    }

    #[test]
    fn feature_hand_example() {
        // CLS = (1, 0), t1 = (0, 2), t2 = (0, 4).
        let mut tape = Tape::<f64>::new();
        let tokens = tape.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, 0.0, 2.0, 0.0, 4.0]).unwrap());
        let f = feature_graph(&mut tape, tokens).unwrap();
        assert_eq!(tape.value(f).data(), &[1.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn identical_tokens_give_doubled_vector() {
        let v = [0.5, -1.0, 2.0];
        let data: Vec<f64> = (0..4).flat_map(|_| v).collect();
        let mut tape = Tape::<f64>::new();
        let tokens = tape.constant(Tensor::new(vec![1, 4, 3], data).unwrap());
        let f = feature_graph(&mut tape, tokens).unwrap();
        assert_eq!(tape.value(f).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn toy_feature_length_is_twice_embed_dim() {
        let cfg = VitConfig {
            embed_dim: 4,
            heads: 2,
            ..Default::default()
        };
        let enc = Encoder::<f32>::init(cfg.clone(), LoraConfig::default(), 1).unwrap();
        let img = Tensor::zeros(&[2, 3, cfg.net_px, cfg.net_px]);
        let f = enc.features(&img).unwrap();
        assert_eq!(f.shape(), &[2, 8]);
        assert_eq!(VitConfig::full_scale().embed_dim * 2, 2560);
    }

    #[test]
    fn fresh_adapters_are_identity() {
        let cfg = VitConfig::default();
        let enc = Encoder::<f32>::init(cfg.clone(), LoraConfig::default(), 3).unwrap();
        let img = Tensor::from_fn(&[2, 3, cfg.net_px, cfg.net_px], |i| ((i * 37 % 101) as f32) / 101.0);
        let with = enc.forward(&img).unwrap();
        let without = enc.forward_without_adapters(&img).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&with), bits(&without));
        assert_eq!(with.shape(), &[2, 1 + cfg.tokens(), cfg.embed_dim]);
    }

    #[test]
    fn trained_adapters_change_output() {
        let cfg = VitConfig::default();
        let mut enc = Encoder::<f32>::init(cfg.clone(), LoraConfig::default(), 3).unwrap();
        for (name, t) in enc.adapters.iter_mut() {
            if name.ends_with("lora_b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.01);
            }
        }
        let img = Tensor::from_fn(&[1, 3, cfg.net_px, cfg.net_px], |i| (i % 7) as f32 / 7.0);
        assert_ne!(enc.forward(&img).unwrap(), enc.forward_without_adapters(&img).unwrap());
    }

    #[test]
    fn batch_shape_mismatch_reports_shapes() {
        let enc = Encoder::<f32>::init(VitConfig::default(), LoraConfig::default(), 0).unwrap();
        let err = enc.forward(&Tensor::zeros(&[1, 3, 16, 16])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 16, 16]") && msg.contains("32"), "{msg}");
    }

    #[test]
    fn config_validation() {
        let bad = VitConfig {
            net_px: 30,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = VitConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toy_trainable_fraction_below_five_percent() {
        let s = ModelSummary::for_config(&VitConfig::default(), &LoraConfig::default());
        assert!(s.trainable_fraction < 0.05, "{s:?}");
        let full = ModelSummary::for_config(&VitConfig::full_scale(), &LoraConfig::default());
        // Reported, not pinned: same order as the production backbone's figure.
        assert!(full.trainable_fraction < 0.01, "{full:?}");
    }

    #[test]
    fn scale_is_alpha_over_rank() {
        assert_eq!(LoraConfig::default().scale(), 2.0);
    }
}
