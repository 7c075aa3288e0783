//! Score-threshold triage: which cases the model handles alone, what that
//! does to reader workload and to combined sensitivity and specificity.

use crate::error::{Error, Result};
use crate::stats::{mcnemar_midp, spec_at_sens};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriagePolicy {
    pub theta_hi: f64,
    pub theta_lo: f64,
}

impl Default for TriagePolicy {
    fn default() -> Self {
        TriagePolicy {
            theta_hi: 0.9956,
            theta_lo: 0.0044,
        }
    }
}

impl TriagePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.theta_lo && self.theta_lo < self.theta_hi && self.theta_hi <= 1.0) {
            return Err(Error::validation(
                "triage thresholds",
                format!("need 0 <= theta_lo < theta_hi <= 1, got {} and {}", self.theta_lo, self.theta_hi),
            ));
        }
        Ok(())
    }

    /// Strict inequalities: a score equal to either threshold is residual.
    pub fn route(&self, score: f64) -> Route {
        if score > self.theta_hi || score < self.theta_lo {
            Route::Auto
        } else {
            Route::Residual
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Auto,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub case_id: String,
    /// Positive-class probability.
    pub score: f64,
    /// Reference standard.
    pub positive: bool,
    pub pathologist_positive: Option<bool>,
    pub needs_ihc: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriageOutcome {
    pub policy: TriagePolicy,
    pub auto: Vec<String>,
    pub residual: Vec<String>,
    pub n_cases: usize,
    pub workload_reduction: f64,
    /// Share of reference positives auto-called positive (score above theta_hi).
    pub positive_capture: f64,
    /// Auto-handled cases whose model call disagrees with the reference.
    pub auto_errors: usize,
}

/// Partitions cases by the policy; ids keep input order.
pub fn apply_policy(policy: &TriagePolicy, cases: &[ScoredCase]) -> Result<TriageOutcome> {
    policy.validate()?;
    let (mut auto, mut residual) = (Vec::new(), Vec::new());
    let (mut captured, mut positives, mut auto_errors) = (0usize, 0usize, 0usize);
    for c in cases {
        if !(0.0..=1.0).contains(&c.score) {
            return Err(Error::validation(format!("case {}", c.case_id), format!("score {} outside [0, 1]", c.score)));
        }
        positives += c.positive as usize;
        match policy.route(c.score) {
            Route::Auto => {
                let call = c.score > policy.theta_hi;
                captured += (call && c.positive) as usize;
                auto_errors += (call != c.positive) as usize;
                auto.push(c.case_id.clone());
            }
            Route::Residual => residual.push(c.case_id.clone()),
        }
    }
    let n = cases.len();
    Ok(TriageOutcome {
        policy: *policy,
        workload_reduction: if n == 0 { 0.0 } else { auto.len() as f64 / n as f64 },
        positive_capture: if positives == 0 { 0.0 } else { captured as f64 / positives as f64 },
        auto,
        residual,
        n_cases: n,
        auto_errors,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensSpec {
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowComparison {
    /// Pathologist alone on every case.
    pub before: SensSpec,
    /// Model call on auto cases, pathologist on residual cases.
    pub after: SensSpec,
    pub p_sensitivity: f64,
    pub p_specificity: f64,
    /// Discordant pairs among positives: (before right / after wrong, before wrong / after right).
    pub discordant_positive: (u64, u64),
    pub discordant_negative: (u64, u64),
}

pub fn combined_workflow_eval(policy: &TriagePolicy, cases: &[ScoredCase]) -> Result<WorkflowComparison> {
    policy.validate()?;
    let (mut pos, mut neg) = (0u64, 0u64);
    let (mut tp_before, mut tp_after, mut tn_before, mut tn_after) = (0u64, 0u64, 0u64, 0u64);
    let (mut dp, mut dn) = ((0u64, 0u64), (0u64, 0u64));
    for c in cases {
        let path = c.pathologist_positive.ok_or_else(|| {
            Error::validation(format!("case {}", c.case_id), "missing pathologist call")
        })?;
        let after = match policy.route(c.score) {
            Route::Auto => c.score > policy.theta_hi,
            Route::Residual => path,
        };
        let right_before = path == c.positive;
        let right_after = after == c.positive;
        let (count, tally_b, tally_a, disc) = if c.positive {
            (&mut pos, &mut tp_before, &mut tp_after, &mut dp)
        } else {
            (&mut neg, &mut tn_before, &mut tn_after, &mut dn)
        };
        *count += 1;
        *tally_b += right_before as u64;
        *tally_a += right_after as u64;
        match (right_before, right_after) {
            (true, false) => disc.0 += 1,
            (false, true) => disc.1 += 1,
            _ => {}
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::undefined("workflow sensitivity/specificity", "needs both classes present"));
    }
    let ss = |tp: u64, tn: u64| SensSpec {
        sensitivity: tp as f64 / pos as f64,
        specificity: tn as f64 / neg as f64,
    };
    Ok(WorkflowComparison {
        before: ss(tp_before, tn_before),
        after: ss(tp_after, tn_after),
        p_sensitivity: mcnemar_midp(dp.0, dp.1),
        p_specificity: mcnemar_midp(dn.0, dn.1),
        discordant_positive: dp,
        discordant_negative: dn,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IhcScreen {
    pub target_sensitivity: f64,
    /// Predict positive iff score >= threshold; `None` stands for an infinite threshold.
    pub threshold: Option<f64>,
    /// IHC-negative cases below the threshold, as a share of all IHC-negative cases.
    pub identified_negative_fraction: f64,
    pub true_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub false_positive: usize,
}

/// Screens the `needs_ihc` subgroup at the operating point reaching `target_sens`.
pub fn ihc_screen(cases: &[ScoredCase], target_sens: f64) -> Result<IhcScreen> {
    let sub: Vec<&ScoredCase> = cases.iter().filter(|c| c.needs_ihc).collect();
    if sub.is_empty() {
        return Err(Error::undefined("IHC screen", "no cases need IHC"));
    }
    let scores: Vec<f64> = sub.iter().map(|c| c.score).collect();
    let labels: Vec<bool> = sub.iter().map(|c| c.positive).collect();
    let op = spec_at_sens(&scores, &labels, target_sens)?;
    let (mut tp, mut fneg, mut tn, mut fp) = (0, 0, 0, 0);
    for c in &sub {
        match (c.positive, c.score >= op.threshold) {
            (true, true) => tp += 1,
            (true, false) => fneg += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    Ok(IhcScreen {
        target_sensitivity: target_sens,
        threshold: op.threshold.is_finite().then_some(op.threshold),
        identified_negative_fraction: tn as f64 / (tn + fp) as f64,
        true_positive: tp,
        false_negative: fneg,
        true_negative: tn,
        false_positive: fp,
    })
}

/// Extension: the widest policy whose auto set makes no errors on `cases`,
/// i.e. `theta_hi` = highest negative score and `theta_lo` = lowest
/// positive score. Fails when the classes do not overlap, since any cut
/// between them would then auto-handle everything.
pub fn search_thresholds(cases: &[ScoredCase]) -> Result<TriagePolicy> {
    let max_neg = cases.iter().filter(|c| !c.positive).map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
    let min_pos = cases.iter().filter(|c| c.positive).map(|c| c.score).fold(f64::INFINITY, f64::min);
    if !max_neg.is_finite() || !min_pos.is_finite() {
        return Err(Error::undefined("threshold search", "needs both classes present"));
    }
    let policy = TriagePolicy {
        theta_hi: max_neg.clamp(0.0, 1.0),
        theta_lo: min_pos.clamp(0.0, 1.0),
    };
    if policy.theta_lo >= policy.theta_hi {
        return Err(Error::InvalidArgument(format!(
            "classes are separated (lowest positive {min_pos}, highest negative {max_neg}); no residual band exists"
        )));
    }
    Ok(policy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterfallRow {
    pub case_id: String,
    pub score: f64,
    pub positive: bool,
    pub route: Route,
}

/// Cases by decreasing score (ties by id) with their routing.
pub fn waterfall(policy: &TriagePolicy, cases: &[ScoredCase]) -> Vec<WaterfallRow> {
    let mut rows: Vec<WaterfallRow> = cases
        .iter()
        .map(|c| WaterfallRow {
            case_id: c.case_id.clone(),
            score: c.score,
            positive: c.positive,
            route: policy.route(c.score),
        })
        .collect();
    rows.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.case_id.cmp(&b.case_id))
    });
    rows
}

pub fn write_waterfall_csv(rows: &[WaterfallRow], path: &Path) -> Result<()> {
    let mut out = String::from("rank,case_id,score,label,route\n");
    for (i, r) in rows.iter().enumerate() {
        let route = match r.route {
            Route::Auto => "auto",
            Route::Residual => "residual",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{route}",
            i + 1,
            r.case_id,
            crate::mil::format_sig(r.score, 9),
            r.positive as u8
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
