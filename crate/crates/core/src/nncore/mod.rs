//! Dense tensors with reverse-mode gradients, the patch encoder with its
//! low-rank adapters, and self-distillation pretraining.

pub mod augment;
pub mod checkpoint;
pub mod dino;
pub mod features;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use augment::{augment, stack, AugmentConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dino::{dino_cross_entropy, dino_loss, DinoConfig, DinoState};
pub use features::FeatureMatrix;
pub use gradcheck::grad_check;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamSet};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use vit::{Encoder, LoraConfig, LoraTarget, ModelSummary, VitConfig};
