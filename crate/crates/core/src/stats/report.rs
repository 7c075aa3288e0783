use super::bootstrap::{bootstrap_ci, Interval};
use super::metrics::{accuracy, argmax, auroc, balanced_accuracy, f1, macro_auc, spec_at_sens, topk_accuracy, weighted_f1};
use super::paired::PairTest;
use crate::error::{Error, Result};
use crate::jsonio;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// One evaluated item (a case or slide) with its grouping tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub label: u32,
    pub scores: Vec<f64>,
    pub tags: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iters: usize,
    pub level: f64,
    pub seed: u64,
    /// Class whose score is the binary decision score.
    pub positive_class: u32,
    pub task: String,
    pub model: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iters: 1000,
            level: 0.95,
            seed: 0,
            positive_class: 1,
            task: "task".into(),
            model: "model".into(),
        }
    }
}

pub const BINARY_METRICS: [&str; 5] = ["auroc", "spec_at_90_sens", "spec_at_95_sens", "accuracy", "f1"];
pub const MULTICLASS_METRICS: [&str; 5] = ["macro_auroc", "top1_accuracy", "top2_accuracy", "balanced_accuracy", "weighted_f1"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub model: String,
    pub n_items: usize,
    pub seed: u64,
    pub iters: usize,
    pub metrics: BTreeMap<String, Interval>,
    pub pairwise: Vec<PairTest>,
}

fn metric_value(name: &str, items: &[&ScoredItem], idx: &[usize], positive: u32) -> Result<f64> {
    let scores: Vec<&Vec<f64>> = idx.iter().map(|&i| &items[i].scores).collect();
    let labels: Vec<u32> = idx.iter().map(|&i| items[i].label).collect();
    let binary_scores = || scores.iter().map(|s| s[positive as usize]).collect::<Vec<f64>>();
    let binary_labels = || labels.iter().map(|&l| l == positive).collect::<Vec<bool>>();
    let preds = || scores.iter().map(|s| argmax(s)).collect::<Vec<u32>>();
    let owned = || scores.iter().map(|s| (*s).clone()).collect::<Vec<Vec<f64>>>();
    match name {
        "auroc" => auroc(&binary_scores(), &binary_labels()),
        "spec_at_90_sens" => Ok(spec_at_sens(&binary_scores(), &binary_labels(), 0.90)?.specificity),
        "spec_at_95_sens" => Ok(spec_at_sens(&binary_scores(), &binary_labels(), 0.95)?.specificity),
        "accuracy" => accuracy(&preds(), &labels),
        "f1" => f1(&preds(), &labels, positive),
        "macro_auroc" => Ok(macro_auc(&owned(), &labels)?.0),
        "top1_accuracy" => topk_accuracy(&owned(), &labels, 1),
        "top2_accuracy" => topk_accuracy(&owned(), &labels, 2),
        "balanced_accuracy" => balanced_accuracy(&preds(), &labels),
        "weighted_f1" => weighted_f1(&preds(), &labels),
        other => Err(Error::InvalidArgument(format!("unknown metric {other}"))),
    }
}

fn validate_items(items: &[&ScoredItem]) -> Result<usize> {
    let c = items.first().map(|i| i.scores.len()).unwrap_or(0);
    if items.is_empty() {
        return Err(Error::undefined("evaluation", "no items"));
    }
    for it in items {
        if it.scores.len() != c {
            return Err(Error::validation(format!("item {}", it.id), "inconsistent score length"));
        }
        if it.scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "score".into(),
                location: it.id.clone(),
            });
        }
        if it.label as usize >= c {
            return Err(Error::validation(format!("item {}", it.id), format!("label {} outside [0, {c})", it.label)));
        }
    }
    Ok(c)
}

/// Point estimates with bootstrap CIs. Binary tasks report the five
/// table columns; tasks with more classes report the multiclass set.
pub fn evaluate(items: &[ScoredItem], cfg: &EvalConfig) -> Result<EvalReport> {
    let refs: Vec<&ScoredItem> = items.iter().collect();
    evaluate_refs(&refs, cfg)
}

fn evaluate_refs(items: &[&ScoredItem], cfg: &EvalConfig) -> Result<EvalReport> {
    let c = validate_items(items)?;
    let names: &[&str] = if c == 2 { &BINARY_METRICS } else { &MULTICLASS_METRICS };
    let mut metrics = BTreeMap::new();
    for &name in names {
        if name == "top2_accuracy" && c < 2 {
            continue;
        }
        let ci = bootstrap_ci(
            |idx| metric_value(name, items, idx, cfg.positive_class),
            items.len(),
            cfg.iters,
            cfg.level,
            cfg.seed,
        )?;
        metrics.insert(name.to_string(), ci);
    }
    Ok(EvalReport {
        task: cfg.task.clone(),
        model: cfg.model.clone(),
        n_items: items.len(),
        seed: cfg.seed,
        iters: cfg.iters,
        metrics,
        pairwise: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub key: String,
    pub group: String,
    pub n_items: usize,
    /// `None` when the group fails a metric precondition.
    pub report: Option<EvalReport>,
    pub skipped: Option<String>,
}

/// One report per value of tag `key`, groups sorted by value.
pub fn subgroup_report(items: &[ScoredItem], key: &str, cfg: &EvalConfig) -> Result<Vec<GroupReport>> {
    let mut groups: BTreeMap<&str, Vec<&ScoredItem>> = BTreeMap::new();
    for it in items {
        let g = it
            .tags
            .get(key)
            .ok_or_else(|| Error::validation(format!("item {}", it.id), format!("missing tag {key}")))?;
        groups.entry(g.as_str()).or_default().push(it);
    }
    groups
        .into_iter()
        .map(|(g, members)| {
            let single = members.iter().all(|m| m.label == members[0].label);
            let (report, skipped) = if single {
                (None, Some("skipped: single class".to_string()))
            } else {
                match evaluate_refs(&members, cfg) {
                    Ok(r) => (Some(r), None),
                    Err(Error::Undefined { metric, reason }) => (None, Some(format!("skipped: {metric} {reason}"))),
                    Err(e) => return Err(e),
                }
            };
            Ok(GroupReport {
                key: key.to_string(),
                group: g.to_string(),
                n_items: members.len(),
                report,
                skipped,
            })
        })
        .collect()
}

/// Full evaluation output: overall report plus subgroup breakdowns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub overall: EvalReport,
    pub subgroups: BTreeMap<String, Vec<GroupReport>>,
}

fn label(name: &str) -> &str {
    match name {
        "auroc" => "AUROC",
        "spec_at_90_sens" => "Spe@90",
        "spec_at_95_sens" => "Spe@95",
        "accuracy" => "Accuracy",
        "f1" => "F1",
        "macro_auroc" => "Macro AUROC",
        "top1_accuracy" => "Top-1",
        "top2_accuracy" => "Top-2",
        "balanced_accuracy" => "Balanced acc.",
        "weighted_f1" => "Weighted F1",
        other => other,
    }
}

fn cell(ci: &Interval) -> String {
    format!("{:.3} ({:.3}-{:.3})", ci.point, ci.ci_low, ci.ci_high)
}

/// Metric names of a report in table order.
fn columns(r: &EvalReport) -> Vec<&'static str> {
    BINARY_METRICS
        .iter()
        .chain(MULTICLASS_METRICS.iter())
        .copied()
        .filter(|m| r.metrics.contains_key(*m))
        .collect()
}

fn table_row(name: &str, n: usize, r: &EvalReport, out: &mut String) {
    let _ = write!(out, "| {name} | {n} |");
    for m in columns(r) {
        let _ = write!(out, " {} |", cell(&r.metrics[m]));
    }
    out.push('\n');
}

/// Markdown tables, one row per model or subgroup, one column per metric.
pub fn report_markdown(b: &ReportBundle) -> String {
    let mut out = String::new();
    let o = &b.overall;
    let _ = writeln!(out, "# {} / {}\n", o.task, o.model);
    let _ = writeln!(
        out,
        "Point estimates with percentile bootstrap intervals ({} iterations, seed {}).\n",
        o.iters, o.seed
    );
    let header = |out: &mut String, first: &str| {
        let _ = write!(out, "| {first} | n |");
        for name in columns(o) {
            let _ = write!(out, " {} |", label(name));
        }
        out.push('\n');
        out.push_str("|---|---|");
        for _ in columns(o) {
            out.push_str("---|");
        }
        out.push('\n');
    };
    header(&mut out, "Model");
    table_row(&o.model, o.n_items, o, &mut out);
    if !o.pairwise.is_empty() {
        out.push_str("\n## Paired comparisons\n\n| Model A | Model B | p | Holm p |\n|---|---|---|---|\n");
        for p in &o.pairwise {
            let _ = writeln!(out, "| {} | {} | {:.4} | {:.4} |", p.model_a, p.model_b, p.raw_p, p.adjusted_p);
        }
    }
    for (key, groups) in &b.subgroups {
        let _ = writeln!(out, "\n## By {key}\n");
        header(&mut out, key);
        for g in groups {
            match (&g.report, &g.skipped) {
                (Some(r), _) => table_row(&g.group, g.n_items, r, &mut out),
                (None, reason) => {
                    let _ = writeln!(out, "| {} | {} | {} |", g.group, g.n_items, reason.as_deref().unwrap_or("skipped"));
                }
            }
        }
    }
    out
}

pub fn write_report(b: &ReportBundle, dir: &Path) -> Result<()> {
    jsonio::write_sorted(b, &dir.join("report.json"))?;
    std::fs::write(dir.join("report.md"), report_markdown(b)).map_err(|e| Error::io(dir.join("report.md"), e))
}
