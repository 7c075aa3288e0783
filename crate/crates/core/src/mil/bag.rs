use crate::error::{Error, Result};
use crate::nncore::{FeatureMatrix, Tensor};
use crate::preprocess::PatchRecord;
use crate::scalar::Scalar;
use crate::synthwsi::{CohortManifest, Split};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// The unit of multiple-instance learning: patch features of one slide or case.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag<T> {
    pub bag_id: String,
    /// `[n, F]`
    pub features: Tensor<T>,
    pub label: u32,
    /// Aligned with rows; empty for bags without spatial provenance.
    pub patch_refs: Vec<PatchRecord>,
}

impl<T: Scalar> Bag<T> {
    pub fn new(bag_id: impl Into<String>, features: Tensor<T>, label: u32, patch_refs: Vec<PatchRecord>) -> Result<Self> {
        let bag_id = bag_id.into();
        if features.shape().len() != 2 {
            return Err(Error::validation(format!("bag {bag_id}"), "features must be an n x F matrix"));
        }
        let n = features.shape()[0];
        if !patch_refs.is_empty() && patch_refs.len() != n {
            return Err(Error::validation(
                format!("bag {bag_id}"),
                format!("{} patch refs for {n} rows", patch_refs.len()),
            ));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite {
                what: "bag features".into(),
                location: bag_id,
            });
        }
        Ok(Bag {
            bag_id,
            features,
            label,
            patch_refs,
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` here.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let f = self.dim();
        let src = self.features.data();
        let mut data = Vec::with_capacity(src.len());
        for &p in perm {
            data.extend_from_slice(&src[p * f..(p + 1) * f]);
        }
        let refs = if self.patch_refs.is_empty() {
            vec![]
        } else {
            perm.iter().map(|&p| self.patch_refs[p].clone()).collect()
        };
        Bag::new(self.bag_id.clone(), Tensor::new(vec![perm.len(), f], data)?, self.label, refs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLevel {
    Slide,
    Case,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub classes: Vec<String>,
    pub level: TaskLevel,
    /// Required for binary tasks, absent otherwise.
    pub positive_class: Option<u32>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::validation("classes", "need at least two classes"));
        }
        if self.classes.iter().collect::<BTreeSet<_>>().len() != self.classes.len() {
            return Err(Error::validation("classes", "class names must be unique"));
        }
        match (self.classes.len(), self.positive_class) {
            (2, Some(p)) if p < 2 => Ok(()),
            (2, _) => Err(Error::validation("positive_class", "binary tasks need positive_class 0 or 1")),
            (_, None) => Ok(()),
            (_, Some(_)) => Err(Error::validation("positive_class", "only defined for binary tasks")),
        }
    }

    /// Task over the cohort's classes; binary tasks take the malignant class as positive.
    pub fn from_cohort(cohort: &CohortManifest, level: TaskLevel) -> Self {
        let binary = cohort.classes.len() == 2;
        TaskSpec {
            task_id: cohort.cohort_id.clone(),
            classes: cohort.classes.iter().map(|c| c.name.clone()).collect(),
            level,
            positive_class: binary
                .then(|| cohort.classes.iter().position(|c| c.malignant).unwrap_or(1) as u32),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

fn bag_from_rows<T: Scalar>(
    bag_id: &str,
    rows: &[usize],
    records: &[PatchRecord],
    features: &FeatureMatrix,
    label: u32,
    n_classes: usize,
) -> Result<Bag<T>> {
    if label as usize >= n_classes {
        return Err(Error::validation(
            format!("bag {bag_id}"),
            format!("label {label} outside [0, {n_classes})"),
        ));
    }
    if rows.is_empty() {
        return Err(Error::validation(format!("bag {bag_id}"), "no patches"));
    }
    let mut data = Vec::with_capacity(rows.len() * features.dim);
    for &r in rows {
        data.extend(features.row(r).iter().map(|&v| T::of(v as f64)));
    }
    let refs = rows.iter().map(|&r| records[r].clone()).collect();
    Bag::new(bag_id, Tensor::new(vec![rows.len(), features.dim], data)?, label, refs)
}

/// Builds slide or case bags for the slides of `split` (all splits when
/// `None`). `features` row `i` belongs to `records[i]`. Case bags stack
/// their slides' rows in manifest slide order.
pub fn build_bags<T: Scalar>(
    task: &TaskSpec,
    cohort: &CohortManifest,
    split: Option<Split>,
    records: &[PatchRecord],
    features: &FeatureMatrix,
) -> Result<Vec<Bag<T>>> {
    task.validate()?;
    if features.rows != records.len() {
        return Err(Error::validation(
            "features",
            format!("{} feature rows for {} patch records", features.rows, records.len()),
        ));
    }
    let mut rows_of: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        rows_of.entry(r.slide_id.as_str()).or_default().push(i);
    }
    let in_split = |id: &str| split.is_none() || cohort.split_of(id) == split;
    let c = task.n_classes();
    match task.level {
        TaskLevel::Slide => cohort
            .slides
            .iter()
            .filter(|s| in_split(&s.slide_id))
            .map(|s| {
                let rows = rows_of.get(s.slide_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                bag_from_rows(&s.slide_id, rows, records, features, s.class_label, c)
            })
            .collect(),
        TaskLevel::Case => cohort
            .cases
            .iter()
            .filter(|(_, case)| in_split(&case.slide_ids[0]))
            .map(|(case_id, case)| {
                let rows: Vec<usize> = case
                    .slide_ids
                    .iter()
                    .flat_map(|id| rows_of.get(id.as_str()).cloned().unwrap_or_default())
                    .collect();
                bag_from_rows(case_id, &rows, records, features, case.label, c)
            })
            .collect(),
    }
}
