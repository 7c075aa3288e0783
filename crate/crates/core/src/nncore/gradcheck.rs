//! Finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Compares tape gradients of the scalar `f` with central differences,
/// element by element over every tensor in `params`.
///
/// Returns `max |g_ad - g_fd| / (|g_fd| + 1e-8)`.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let two_eps = eps + eps;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (i, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let fd = ((plus - minus) / two_eps).as_f64();
            let ad = grads.get(vars[i]).map_or(0.0, |g| g.data()[j].as_f64());
            let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
