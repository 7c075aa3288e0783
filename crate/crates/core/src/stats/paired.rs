use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, Discrete, DiscreteCDF, Normal};

/// Exact null distribution up to this many non-zero differences.
pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 6;

/// Average ranks (1-based) of `v`.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired Wilcoxon signed-rank p-value for `x - y`.
///
/// Zero differences are dropped and tied magnitudes share average ranks.
/// Up to [`EXACT_MAX_N`] differences the null distribution of the positive
/// rank sum is computed exactly (counting over doubled ranks, which are
/// integers); above that a normal approximation with tie correction is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("{} vs {} paired values", x.len(), y.len())));
    }
    if x.len() < MIN_PAIRS {
        return Err(Error::validation(
            "pairs",
            format!("Wilcoxon test needs at least {MIN_PAIRS} paired observations, got {}", x.len()),
        ));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Ok(1.0);
    }
    let n = d.len();
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    if n <= EXACT_MAX_N {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let w: usize = doubled.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        // |2W - total| in doubled units
        let dev = |s: usize| (2 * s).abs_diff(total);
        let observed = dev(w);
        let extreme: f64 = (0..=total).filter(|&s| dev(s) >= observed).map(|s| counts[s]).sum();
        Ok((extreme / 2f64.powi(n as i32)).min(1.0))
    } else {
        let nf = n as f64;
        let w: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            ties += t * t * t - t;
            i = j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        if var <= 0.0 {
            return Ok(1.0);
        }
        let z = (w - mean) / var.sqrt();
        let normal = Normal::standard();
        Ok((2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0))
    }
}

/// Holm step-down adjustment, returned in input order.
pub fn holm(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (j, &i) in idx.iter().enumerate() {
        running = running.max((m - j) as f64 * p[i]);
        out[i] = running.min(1.0);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub model_a: String,
    pub model_b: String,
    pub raw_p: f64,
    pub adjusted_p: f64,
}

/// All model pairs compared by paired Wilcoxon over tasks, Holm-adjusted
/// across the pairs. `table[m]` holds model `m`'s metric per task.
pub fn paired_wilcoxon_holm(models: &[String], table: &[Vec<f64>]) -> Result<Vec<PairTest>> {
    if models.len() != table.len() {
        return Err(Error::InvalidArgument(format!("{} model names for {} rows", models.len(), table.len())));
    }
    let mut pairs = Vec::new();
    for a in 0..models.len() {
        for b in a + 1..models.len() {
            pairs.push((a, b, wilcoxon_signed_rank(&table[a], &table[b])?));
        }
    }
    let adj = holm(&pairs.iter().map(|p| p.2).collect::<Vec<_>>());
    Ok(pairs
        .into_iter()
        .zip(adj)
        .map(|((a, b, raw_p), adjusted_p)| PairTest {
            model_a: models[a].clone(),
            model_b: models[b].clone(),
            raw_p,
            adjusted_p,
        })
        .collect())
}

/// Two-sided mid-p McNemar test on discordant counts `b` and `c`.
pub fn mcnemar_midp(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    let bin = Binomial::new(0.5, n).expect("valid binomial");
    let p = 2.0 * bin.cdf(k) - bin.pmf(k);
    p.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_positive_differences() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [0.0; 6];
        assert!((wilcoxon_signed_rank(&x, &y).unwrap() - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn identical_columns_give_one() {
        let x = [0.3; 8];
        assert_eq!(wilcoxon_signed_rank(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn too_few_pairs_refused() {
        assert!(wilcoxon_signed_rank(&[1.0; 5], &[0.0; 5]).is_err());
    }

    #[test]
    fn holm_hand_example() {
        let adj = holm(&[0.01, 0.04, 0.03]);
        let expect = [0.03, 0.06, 0.06];
        for (a, e) in adj.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn mcnemar_edges() {
        assert_eq!(mcnemar_midp(0, 0), 1.0);
        // b=0, c=2: 2*P(X<=0) - P(X=0) = 0.25
        assert!((mcnemar_midp(0, 2) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn normal_branch_symmetric() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { i as f64 + 0.5 } else { i as f64 - 0.5 }).collect();
        let p = wilcoxon_signed_rank(&x, &y).unwrap();
        assert!(p > 0.5 && p <= 1.0);
    }
}
