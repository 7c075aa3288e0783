use frostmil_core::synthwsi::{generate_cohort, CohortSpec, Split};
use frostmil_core::triage::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::{BTreeMap, BTreeSet};

/// Prospective cohort with logistic scores from N(+/-4, 1.5) logits.
fn prospective(seed: u64, n: usize) -> Vec<ScoredCase> {
    let spec = CohortSpec {
        n_cases: n,
        split_policy: BTreeMap::from([(Split::Prospective, 1.0)]),
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(seed, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.5).unwrap();
    cohort
        .cases
        .iter()
        .map(|(id, c)| {
            let positive = c.label == 1;
            let logit = if positive { 4.0 } else { -4.0 } + noise.sample(&mut rng);
            ScoredCase {
                case_id: id.clone(),
                score: 1.0 / (1.0 + (-logit as f64).exp()),
                positive,
                pathologist_positive: Some(c.pathologist_positive),
                needs_ihc: c.needs_ihc,
            }
        })
        .collect()
}

#[test]
fn partition_is_complete_and_disjoint() {
    let cases = prospective(1, 400);
    let out = apply_policy(&TriagePolicy::default(), &cases).unwrap();
    let auto: BTreeSet<&String> = out.auto.iter().collect();
    let residual: BTreeSet<&String> = out.residual.iter().collect();
    assert!(auto.is_disjoint(&residual));
    assert_eq!(auto.len() + residual.len(), cases.len());
    assert!(out.workload_reduction > 0.0 && out.workload_reduction < 1.0);
    assert!((0.0..=1.0).contains(&out.positive_capture));
}

#[test]
fn combined_sensitivity_stays_near_pathologist_baseline() {
    let cases = prospective(2, 400);
    let policy = TriagePolicy::default();
    let out = apply_policy(&policy, &cases).unwrap();
    assert_eq!(out.auto_errors, 0);
    let w = combined_workflow_eval(&policy, &cases).unwrap();
    assert!((w.after.sensitivity - w.before.sensitivity).abs() <= 0.02, "{w:?}");
    // an error-free auto set can only fix pathologist errors
    assert!(w.after.sensitivity >= w.before.sensitivity);
    assert!(w.after.specificity >= w.before.specificity);
    assert_eq!(w.discordant_positive.0, 0);
}

#[test]
fn empty_auto_set_leaves_workflow_unchanged() {
    let cases: Vec<ScoredCase> = prospective(3, 100)
        .into_iter()
        .map(|mut c| {
            c.score = c.score.clamp(0.01, 0.99);
            c
        })
        .collect();
    let w = combined_workflow_eval(&TriagePolicy::default(), &cases).unwrap();
    assert_eq!(w.before, w.after);
    assert_eq!(w.p_sensitivity, 1.0);
}

#[test]
fn ihc_screen_equals_threshold_scan() {
    let cases = prospective(4, 400);
    let sub: Vec<&ScoredCase> = cases.iter().filter(|c| c.needs_ihc).collect();
    let np = sub.iter().filter(|c| c.positive).count();
    let nn = sub.len() - np;
    let mut best = 0.0f64;
    for t in sub.iter().map(|c| c.score).chain([f64::INFINITY]) {
        let tp = sub.iter().filter(|c| c.positive && c.score >= t).count();
        let tn = sub.iter().filter(|c| !c.positive && c.score < t).count();
        if tp as f64 / np as f64 >= 0.95 {
            best = best.max(tn as f64 / nn as f64);
        }
    }
    let s = ihc_screen(&cases, 0.95).unwrap();
    assert_eq!(s.identified_negative_fraction, best);
    assert_eq!(s.true_positive + s.false_negative, np);
    assert_eq!(s.true_negative + s.false_positive, nn);
}

#[test]
fn waterfall_sorted_with_tags() {
    let cases = prospective(5, 60);
    let policy = TriagePolicy::default();
    let rows = waterfall(&policy, &cases);
    assert_eq!(rows.len(), cases.len());
    assert!(rows.windows(2).all(|w| w[0].score >= w[1].score));
    let auto = rows.iter().filter(|r| r.route == Route::Auto).count();
    assert_eq!(auto, apply_policy(&policy, &cases).unwrap().auto.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("waterfall.csv");
    write_waterfall_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("rank,case_id,score,label,route\n1,"));
    assert_eq!(text.lines().count(), cases.len() + 1);
}

#[test]
fn invalid_policies_rejected() {
    for (hi, lo) in [(0.3, 0.5), (0.5, 0.5), (1.2, 0.0), (0.9, -0.1)] {
        let p = TriagePolicy {
            theta_hi: hi,
            theta_lo: lo,
        };
        assert!(apply_policy(&p, &[]).is_err());
    }
}

proptest! {
    #[test]
    fn narrowing_the_residual_band_never_lowers_reduction(
        scores in prop::collection::vec(0.0f64..=1.0, 1..40),
        lo in 0.0f64..0.5, hi in 0.5f64..=1.0, dl in 0.0f64..0.2, dh in 0.0f64..0.2,
    ) {
        prop_assume!(lo < hi);
        let cases: Vec<ScoredCase> = scores.iter().enumerate().map(|(i, &s)| ScoredCase {
            case_id: format!("c{i}"),
            score: s,
            positive: i % 2 == 0,
            pathologist_positive: Some(i % 2 == 0),
            needs_ihc: false,
        }).collect();
        let wide = TriagePolicy { theta_hi: hi, theta_lo: lo };
        let inner_hi = (hi - dh).max(0.5);
        let inner_lo = (lo + dl).min(0.5);
        prop_assume!(inner_lo < inner_hi);
        let narrow = TriagePolicy { theta_hi: inner_hi, theta_lo: inner_lo };
        let a = apply_policy(&wide, &cases).unwrap();
        let b = apply_policy(&narrow, &cases).unwrap();
        prop_assert!(b.workload_reduction >= a.workload_reduction);
        prop_assert_eq!(a.auto.len() + a.residual.len(), cases.len());
    }
}
