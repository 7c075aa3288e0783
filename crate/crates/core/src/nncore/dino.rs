//! Teacher–student self-distillation: projection head, the centred and
//! sharpened cross-entropy, and the EMA teacher.

use super::params::{fan_in_uniform, Bound, ParamSet};
use super::tape::{log_sum_exp, softmax_rows, Tape, Var};
use super::tensor::Tensor;
use super::vit::linear;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DinoConfig {
    /// Projection-head output size K.
    pub out_dim: usize,
    pub head_hidden: usize,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig {
            out_dim: 64,
            head_hidden: 64,
            tau_student: 0.1,
            tau_teacher: 0.04,
            center_momentum: 0.9,
            ema_momentum: 0.9995,
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_student > 0.0) || !(self.tau_teacher > 0.0) {
            return Err(Error::validation("tau", "temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) || !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1]"));
        }
        if self.out_dim == 0 || self.head_hidden == 0 {
            return Err(Error::validation("out_dim", "head sizes must be positive"));
        }
        Ok(())
    }

    /// Three linear layers with GELU between them, `D -> hidden -> hidden -> K`.
    pub fn head_shapes(&self, embed_dim: usize) -> Vec<(String, Vec<usize>)> {
        let h = self.head_hidden;
        vec![
            ("head.0.weight".into(), vec![h, embed_dim]),
            ("head.0.bias".into(), vec![h]),
            ("head.1.weight".into(), vec![h, h]),
            ("head.1.bias".into(), vec![h]),
            ("head.2.weight".into(), vec![self.out_dim, h]),
            ("head.2.bias".into(), vec![self.out_dim]),
        ]
    }

    pub fn init_head<T: Scalar>(&self, embed_dim: usize, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = ParamSet::new();
        for (name, shape) in self.head_shapes(embed_dim) {
            let fan_in = if shape.len() == 2 { shape[1] } else { shape[0] };
            out.insert(name, fan_in_uniform(&mut rng, &shape, fan_in));
        }
        out
    }
}

/// Logits `[B, K]` from `[B, D]` inputs.
pub fn head_graph<T: Scalar>(tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
    let h = linear(tape, x, params.get("head.0.weight")?, params.get("head.0.bias")?)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, params.get("head.1.weight")?, params.get("head.1.bias")?)?;
    let h = tape.gelu(h);
    linear(tape, h, params.get("head.2.weight")?, params.get("head.2.bias")?)
}

/// Teacher targets `softmax((logits - center) / tau_t)`, row-wise.
pub fn teacher_probs<T: Scalar>(logits: &Tensor<T>, center: &[T], tau_t: f64) -> Result<Tensor<T>> {
    if tau_t <= 0.0 {
        return Err(Error::InvalidArgument("teacher temperature must be positive".into()));
    }
    let k = center.len();
    if logits.shape().last() != Some(&k) {
        return Err(Error::Shape {
            op: "teacher_probs",
            left: logits.shape().to_vec(),
            right: vec![k],
        });
    }
    let inv = T::one() / T::of(tau_t);
    let shifted = Tensor::from_fn(logits.shape(), |i| (logits.data()[i] - center[i % k]) * inv);
    Ok(softmax_rows(&shifted))
}

/// `-Σ_k P_t(k) log P_s(k)` for one student/teacher pairing.
pub fn dino_cross_entropy<T: Scalar>(
    config: &DinoConfig,
    student: &[T],
    teacher: &[T],
    center: &[T],
) -> Result<T> {
    if config.tau_student <= 0.0 || config.tau_teacher <= 0.0 {
        return Err(Error::InvalidArgument("temperatures must be positive".into()));
    }
    if student.len() != teacher.len() || teacher.len() != center.len() {
        return Err(Error::Shape {
            op: "dino_loss",
            left: vec![student.len()],
            right: vec![teacher.len()],
        });
    }
    let pt = teacher_probs(&Tensor::from_vec(teacher.to_vec()), center, config.tau_teacher)?;
    let inv_s = T::one() / T::of(config.tau_student);
    let scaled: Vec<T> = student.iter().map(|&v| v * inv_s).collect();
    let lse = log_sum_exp(&scaled);
    let mut loss = T::zero();
    for (&p, &s) in pt.data().iter().zip(&scaled) {
        loss -= p * (s - lse);
    }
    Ok(loss)
}

/// Average of the two cross-view pairings (student a vs teacher b, student b vs teacher a).
pub fn dino_loss<T: Scalar>(
    config: &DinoConfig,
    center: &[T],
    student_a: &[T],
    student_b: &[T],
    teacher_a: &[T],
    teacher_b: &[T],
) -> Result<T> {
    let l1 = dino_cross_entropy(config, student_a, teacher_b, center)?;
    let l2 = dino_cross_entropy(config, student_b, teacher_a, center)?;
    Ok((l1 + l2) / T::of(2.0))
}

/// Symmetrised loss on the tape.
///
/// `student_logits` is `[2B, K]` with view a in the first B rows and view b in
/// the rest; `teacher_targets` is laid out the same way and is treated as a
/// constant. Row `i` of the student is paired with the other view's teacher
/// row, and the result is the mean over all `2B` pairings.
pub fn dino_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_targets: &Tensor<T>,
    tau_s: f64,
) -> Result<Var> {
    if tau_s <= 0.0 {
        return Err(Error::InvalidArgument("student temperature must be positive".into()));
    }
    let shape = tape.value(student_logits).shape().to_vec();
    if shape != teacher_targets.shape() || shape.len() != 2 || shape[0] % 2 != 0 {
        return Err(Error::Shape {
            op: "dino_loss",
            left: shape,
            right: teacher_targets.shape().to_vec(),
        });
    }
    let (rows, k) = (shape[0], shape[1]);
    let half = rows / 2;
    let t = teacher_targets.data();
    let swapped = Tensor::from_fn(&shape, |i| {
        let (r, c) = (i / k, i % k);
        t[((r + half) % rows) * k + c]
    });
    let scaled = tape.scale(student_logits, T::one() / T::of(tau_s));
    let logp = tape.log_softmax(scaled);
    let target = tape.constant(swapped);
    let prod = tape.mul(logp, target)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -T::one() / T::of(rows as f64)))
}

/// Student and teacher copies of the trainable parameters plus the centre.
#[derive(Clone, Debug)]
pub struct DinoState<T> {
    pub config: DinoConfig,
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub center: Vec<T>,
}

impl<T: Scalar> DinoState<T> {
    /// Teacher starts as an exact copy of the student; centre at zero.
    pub fn new(config: DinoConfig, student: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let k = config.out_dim;
        Ok(DinoState {
            teacher: student.clone(),
            student,
            center: vec![T::zero(); k],
            config,
        })
    }

    /// `θ_t ← m·θ_t + (1 − m)·θ_s` for every teacher parameter.
    pub fn ema_update(&mut self) -> Result<()> {
        let m = T::of(self.config.ema_momentum);
        let one_minus = T::one() - m;
        for (name, t) in self.teacher.iter_mut() {
            let s = self.student.get(name)?;
            if s.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "ema_update",
                    left: t.shape().to_vec(),
                    right: s.shape().to_vec(),
                });
            }
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = ema(m, one_minus, *tv, sv);
            }
        }
        Ok(())
    }

    /// `c ← cm·c + (1 − cm)·mean_rows(teacher_logits)`.
    pub fn update_center(&mut self, teacher_logits: &Tensor<T>) -> Result<()> {
        let k = self.center.len();
        if teacher_logits.shape().last() != Some(&k) {
            return Err(Error::Shape {
                op: "update_center",
                left: teacher_logits.shape().to_vec(),
                right: vec![k],
            });
        }
        let rows = teacher_logits.len() / k;
        let mut mean = vec![T::zero(); k];
        for row in teacher_logits.data().chunks(k) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let cm = T::of(self.config.center_momentum);
        let inv = T::one() / T::of(rows as f64);
        for (c, m) in self.center.iter_mut().zip(mean) {
            *c = cm * *c + (T::one() - cm) * (m * inv);
        }
        Ok(())
    }
}

/// One EMA step; kept as a named function so trajectory replays use the
/// identical expression.
#[inline]
pub fn ema<T: Scalar>(m: T, one_minus_m: T, teacher: T, student: T) -> T {
    m * teacher + one_minus_m * student
}
