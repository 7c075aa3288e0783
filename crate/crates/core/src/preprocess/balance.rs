use crate::synthwsi::noise::{hash_str, splitmix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Median of the per-center counts (lower median for an even number of centers).
pub fn median_cap(counts: &[usize]) -> usize {
    if counts.is_empty() {
        return 1;
    }
    let mut c = counts.to_vec();
    c.sort_unstable();
    c[(c.len() - 1) / 2].max(1)
}

/// Positions kept per center: all of them when at most `cap`, otherwise a
/// seeded uniform subset without replacement, in original order. Each
/// center draws from its own stream so centers do not influence each other.
pub fn balance_indices(groups: &BTreeMap<String, usize>, cap: usize, seed: u64) -> BTreeMap<String, Vec<usize>> {
    let cap = cap.max(1);
    groups
        .iter()
        .map(|(center, &n)| {
            let keep = if n <= cap {
                (0..n).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ hash_str(center)));
                let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
                idx.sort_unstable();
                idx
            };
            (center.clone(), keep)
        })
        .collect()
}

/// Subsamples `items` so no center contributes more than `cap` (default:
/// the median per-center count). Survivors keep their input order.
pub fn balance_centers<T: Clone>(
    items: &[T],
    center_of: impl Fn(&T) -> String,
    cap: Option<usize>,
    seed: u64,
) -> Vec<T> {
    let mut positions: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        positions.entry(center_of(item)).or_default().push(i);
    }
    let counts: BTreeMap<String, usize> = positions.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let cap = cap.unwrap_or_else(|| median_cap(&counts.values().copied().collect::<Vec<_>>()));
    let mut keep = vec![false; items.len()];
    for (center, idx) in balance_indices(&counts, cap, seed) {
        for j in idx {
            keep[positions[&center][j]] = true;
        }
    }
    items.iter().zip(keep).filter(|(_, k)| *k).map(|(t, _)| t.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(spec: &[(&str, usize)]) -> Vec<(String, usize)> {
        spec.iter()
            .flat_map(|(c, n)| (0..*n).map(move |i| (c.to_string(), i)))
            .collect()
    }

    #[test]
    fn caps_each_center() {
        let v = items(&[("A", 100), ("B", 10)]);
        let out = balance_centers(&v, |t| t.0.clone(), Some(10), 1);
        assert_eq!(out.iter().filter(|t| t.0 == "A").count(), 10);
        assert_eq!(out.iter().filter(|t| t.0 == "B").count(), 10);
        assert!(out.windows(2).all(|w| w[0].0 != w[1].0 || w[0].1 < w[1].1));
    }

    #[test]
    fn large_cap_is_identity() {
        let v = items(&[("A", 5), ("B", 3)]);
        assert_eq!(balance_centers(&v, |t| t.0.clone(), Some(5), 1), v);
        assert!(balance_centers(&[] as &[(String, usize)], |t| t.0.clone(), None, 1).is_empty());
    }

    #[test]
    fn median_default() {
        assert_eq!(median_cap(&[100, 10, 30]), 30);
        assert_eq!(median_cap(&[4, 8]), 4);
    }
}
