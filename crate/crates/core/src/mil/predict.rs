use super::abmil::Abmil;
use super::bag::Bag;
use crate::error::{Error, Result};
use crate::jsonio;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub bag_id: String,
    pub label: u32,
    pub probs: Vec<T>,
    pub attention: Vec<T>,
}

pub fn predict<T: Scalar>(model: &Abmil<T>, bags: &[Bag<T>]) -> Result<Vec<Prediction<T>>> {
    bags.iter()
        .map(|b| {
            let out = model.forward(b)?;
            Ok(Prediction {
                bag_id: b.bag_id.clone(),
                label: b.label,
                probs: out.probs,
                attention: out.attention,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub x: u32,
    pub y: u32,
    pub weight: f64,
}

/// Min-max normalised attention of one slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionGrid {
    pub bag_id: String,
    pub slide_id: String,
    pub cells: Vec<GridCell>,
}

/// Maps `(x - min) / (max - min)`; a constant input maps to 0.5.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// One grid per slide in the bag, in order of first appearance, each
/// normalised on its own.
pub fn attention_to_grid<T: Scalar>(bag: &Bag<T>, attention: &[T]) -> Result<Vec<AttentionGrid>> {
    if bag.patch_refs.is_empty() || attention.len() != bag.patch_refs.len() {
        return Err(Error::validation(
            format!("bag {}", bag.bag_id),
            format!("{} attention weights for {} patch refs", attention.len(), bag.patch_refs.len()),
        ));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut rows: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in bag.patch_refs.iter().enumerate() {
        let e = rows.entry(r.slide_id.as_str()).or_default();
        if e.is_empty() {
            order.push(r.slide_id.as_str());
        }
        e.push(i);
    }
    Ok(order
        .into_iter()
        .map(|slide| {
            let idx = &rows[slide];
            let w = min_max(&idx.iter().map(|&i| attention[i].as_f64()).collect::<Vec<_>>());
            AttentionGrid {
                bag_id: bag.bag_id.clone(),
                slide_id: slide.to_string(),
                cells: idx
                    .iter()
                    .zip(w)
                    .map(|(&i, weight)| GridCell {
                        x: bag.patch_refs[i].x,
                        y: bag.patch_refs[i].y,
                        weight,
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Formats with `digits` significant digits, shortest form (like C's `%.Ng`).
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, v))
    }
}

/// `bag_id,label,prob_0,...,prob_{C-1}`, 9 significant digits.
pub fn write_predictions_csv<T: Scalar>(preds: &[Prediction<T>], path: &Path) -> Result<()> {
    let c = preds.first().map(|p| p.probs.len()).unwrap_or(2);
    let mut out = String::from("bag_id,label");
    for k in 0..c {
        out.push_str(&format!(",prob_{k}"));
    }
    out.push('\n');
    for p in preds {
        out.push_str(&format!("{},{}", p.bag_id, p.label));
        for v in &p.probs {
            out.push(',');
            out.push_str(&format_sig(v.as_f64(), 9));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A row of a predictions CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub bag_id: String,
    pub label: u32,
    pub probs: Vec<f64>,
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "bag_id" || cols[1] != "label" {
        return Err(bad(1, format!("unexpected header {header:?}")));
    }
    let c = cols.len() - 2;
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != c + 2 {
            return Err(bad(i + 1, format!("expected {} fields, found {}", c + 2, f.len())));
        }
        let label = f[1].parse().map_err(|_| bad(i + 1, format!("bad label {:?}", f[1])))?;
        let probs = f[2..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(i + 1, format!("bad probability {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "probability".into(),
                location: format!("{} line {}", path.display(), i + 1),
            });
        }
        rows.push(PredictionRow {
            bag_id: f[0].to_string(),
            label,
            probs,
        });
    }
    Ok(rows)
}

pub fn write_attention_jsonl(grids: &[AttentionGrid], path: &Path) -> Result<()> {
    let mut out = String::new();
    for g in grids {
        out.push_str(&jsonio::to_sorted_line(g)?);
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_attention_jsonl(path: &Path) -> Result<Vec<AttentionGrid>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                context: format!("{} line {}", path.display(), i + 1),
                source,
            })
        })
        .collect()
}
