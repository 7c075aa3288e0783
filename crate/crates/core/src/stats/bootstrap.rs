use crate::error::{Error, Result};
use crate::synthwsi::noise::splitmix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Random stream of bootstrap iteration `i`.
pub fn iteration_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(i as u64)))
}

/// Type-7 quantile of sorted values.
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Percentile bootstrap over item indices `0..n`.
///
/// Iteration `i` draws `n` indices with replacement from its own stream;
/// when `metric` is undefined on the draw, the same stream draws again.
/// More than `10 * iters` draws in total is an error. The interval is
/// widened to contain the point estimate when necessary.
pub fn bootstrap_ci<F>(metric: F, n: usize, iters: usize, level: f64, seed: u64) -> Result<Interval>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if iters == 0 {
        return Err(Error::validation("iters", "must be at least 1"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation("level", "must lie in (0, 1)"));
    }
    if n == 0 {
        return Err(Error::undefined("bootstrap", "no items"));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all)?;
    let cap = 10 * iters;
    let mut attempts = 0usize;
    let mut values = Vec::with_capacity(iters);
    let mut draw = vec![0usize; n];
    for i in 0..iters {
        let mut rng = iteration_rng(seed, i);
        loop {
            attempts += 1;
            if attempts > cap {
                return Err(Error::undefined(
                    "bootstrap",
                    format!("metric undefined on too many resamples ({cap} attempts for {iters} iterations)"),
                ));
            }
            for d in draw.iter_mut() {
                *d = rng.random_range(0..n);
            }
            match metric(&draw) {
                Ok(v) => {
                    values.push(v);
                    break;
                }
                Err(Error::Undefined { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval {
        point,
        ci_low: quantile_sorted(&values, alpha).min(point),
        ci_high: quantile_sorted(&values, 1.0 - alpha).max(point),
    })
}
