use crate::error::{Error, Result};
use crate::jsonio;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Axis-aligned rectangle in level-0 pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && (x as u64) < self.right() && (y as u64) < self.bottom()
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }
}

/// One synthetic slide: geometry, pyramid layout, planted ground truth and
/// the metadata used for subgroup analyses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub case_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub mpp: f64,
    /// Downsample factor of each pyramid level, level 0 first.
    pub levels: Vec<u32>,
    pub tissue_boxes: Vec<Rect>,
    pub lesion_boxes: Vec<Rect>,
    pub class_label: u32,
    pub malignant: bool,
    pub center_id: String,
    pub site: String,
    pub histotech_id: String,
    /// Texture seed; together with the fields above it fixes every pixel.
    pub seed: u64,
    /// 1.0 renders lesions at full contrast; difficult cases use less.
    pub lesion_contrast: f64,
    /// Per-center channel gain amplitude.
    pub tint_gain: f64,
}

impl SlideManifest {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("slide {}.{name}", self.slide_id);
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::validation(f("width_px"), "dimensions must be positive"));
        }
        if !(self.mpp > 0.0) || !self.mpp.is_finite() {
            return Err(Error::validation(f("mpp"), "must be a positive number"));
        }
        if self.levels.first() != Some(&1) || self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation(
                f("levels"),
                "downsamples must start at 1 and strictly increase",
            ));
        }
        if self.levels.iter().any(|&d| !d.is_power_of_two()) {
            return Err(Error::validation(f("levels"), "downsamples must be powers of two"));
        }
        let bounds = Rect::new(0, 0, self.width_px, self.height_px);
        for (i, t) in self.tissue_boxes.iter().enumerate() {
            if !bounds.contains(t) || t.area() == 0 {
                return Err(Error::validation(
                    f(&format!("tissue_boxes[{i}]")),
                    "must be non-empty and inside the slide",
                ));
            }
        }
        for (i, l) in self.lesion_boxes.iter().enumerate() {
            if l.area() == 0 || !self.tissue_boxes.iter().any(|t| t.contains(l)) {
                return Err(Error::validation(
                    f(&format!("lesion_boxes[{i}]")),
                    "lesion must lie inside a tissue box",
                ));
            }
        }
        if self.malignant == self.lesion_boxes.is_empty() {
            return Err(Error::validation(
                f("lesion_boxes"),
                if self.malignant {
                    "malignant slide has no lesion"
                } else {
                    "benign slide has lesions"
                },
            ));
        }
        if !(self.lesion_contrast > 0.0 && self.lesion_contrast <= 1.0) {
            return Err(Error::validation(f("lesion_contrast"), "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn level_dims(&self, level: usize) -> Option<(u32, u32)> {
        let d = *self.levels.get(level)?;
        Some((self.width_px / d, self.height_px / d))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonio::write_sorted(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: SlideManifest = jsonio::read(path)?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
    Prospective,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Pretrain, Split::Train, Split::Val, Split::Test, Split::Prospective];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetastasisSize {
    #[default]
    None,
    Micro,
    Macro,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    pub malignant: bool,
}

impl ClassDef {
    pub fn new(name: &str, malignant: bool) -> Self {
        ClassDef {
            name: name.into(),
            malignant,
        }
    }

    /// `benign` / `malignant`.
    pub fn binary() -> Vec<ClassDef> {
        vec![ClassDef::new("benign", false), ClassDef::new("malignant", true)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    /// Slides in manifest order.
    pub slide_ids: Vec<String>,
    /// Positive iff at least one slide is malignant.
    pub label: u32,
    pub is_difficult: bool,
    pub needs_ihc: bool,
    pub metastasis_size_class: MetastasisSize,
    /// Simulated frozen-section report (true = malignant).
    pub pathologist_positive: bool,
    pub center_id: String,
    pub site: String,
    pub histotech_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub cohort_id: String,
    pub seed: u64,
    pub classes: Vec<ClassDef>,
    /// Lymph-node task: metastasis size classes apply.
    pub lymph_node: bool,
    pub slides: Vec<SlideManifest>,
    pub splits: BTreeMap<Split, Vec<String>>,
    pub cases: BTreeMap<String, CaseEntry>,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::validation("classes", "need at least two classes"));
        }
        let names: BTreeSet<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        if names.len() != self.classes.len() {
            return Err(Error::validation("classes", "class names must be unique"));
        }
        let mut by_id = BTreeMap::new();
        for (i, s) in self.slides.iter().enumerate() {
            s.validate()?;
            let class = self.classes.get(s.class_label as usize).ok_or_else(|| {
                Error::validation(format!("slides[{i}].class_label"), "outside the class list")
            })?;
            if class.malignant != s.malignant {
                return Err(Error::validation(
                    format!("slides[{i}].malignant"),
                    format!("disagrees with class {}", class.name),
                ));
            }
            if by_id.insert(s.slide_id.as_str(), s).is_some() {
                return Err(Error::validation(format!("slides[{i}].slide_id"), "duplicate slide id"));
            }
        }

        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for (split, ids) in &self.splits {
            for id in ids {
                if !by_id.contains_key(id.as_str()) {
                    return Err(Error::validation("splits", format!("unknown slide {id}")));
                }
                if let Some(prev) = split_of.insert(id.as_str(), *split) {
                    return Err(Error::validation(
                        "splits",
                        format!("slide {id} appears in both {prev:?} and {split:?}"),
                    ));
                }
            }
        }
        if let Some(s) = self.slides.iter().find(|s| !split_of.contains_key(s.slide_id.as_str())) {
            return Err(Error::validation("splits", format!("slide {} has no split", s.slide_id)));
        }

        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (case_id, case) in &self.cases {
            let field = |n: &str| format!("cases.{case_id}.{n}");
            if case.slide_ids.is_empty() {
                return Err(Error::validation(field("slide_ids"), "case has no slides"));
            }
            let mut any_malignant = false;
            let mut case_split = None;
            for id in &case.slide_ids {
                let s = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::validation(field("slide_ids"), format!("unknown slide {id}")))?;
                if s.case_id != *case_id {
                    return Err(Error::validation(field("slide_ids"), format!("slide {id} names case {}", s.case_id)));
                }
                if owner.insert(id.as_str(), case_id.as_str()).is_some() {
                    return Err(Error::validation(field("slide_ids"), format!("slide {id} listed twice")));
                }
                any_malignant |= s.malignant;
                let sp = split_of[id.as_str()];
                if *case_split.get_or_insert(sp) != sp {
                    return Err(Error::validation(field("slide_ids"), "slides of one case span several splits"));
                }
            }
            let class = self
                .classes
                .get(case.label as usize)
                .ok_or_else(|| Error::validation(field("label"), "outside the class list"))?;
            if class.malignant != any_malignant {
                return Err(Error::validation(
                    field("label"),
                    "case must be positive iff it contains a malignant slide",
                ));
            }
            if case.metastasis_size_class != MetastasisSize::None && !(self.lymph_node && any_malignant) {
                return Err(Error::validation(
                    field("metastasis_size_class"),
                    "only positive lymph-node cases carry a metastasis size",
                ));
            }
        }
        if let Some(s) = self.slides.iter().find(|s| !owner.contains_key(s.slide_id.as_str())) {
            return Err(Error::validation("cases", format!("slide {} belongs to no case", s.slide_id)));
        }
        Ok(())
    }

    pub fn slide(&self, id: &str) -> Option<&SlideManifest> {
        self.slides.iter().find(|s| s.slide_id == id)
    }

    pub fn split_of(&self, slide_id: &str) -> Option<Split> {
        self.splits
            .iter()
            .find(|(_, ids)| ids.iter().any(|i| i == slide_id))
            .map(|(s, _)| *s)
    }

    /// Slides of `split` in manifest order.
    pub fn slides_in(&self, split: Split) -> Vec<&SlideManifest> {
        let ids: BTreeSet<&str> = self
            .splits
            .get(&split)
            .map(|v| v.iter().map(String::as_str).collect())
            .unwrap_or_default();
        self.slides.iter().filter(|s| ids.contains(s.slide_id.as_str())).collect()
    }

    /// Case ids of `split`, sorted.
    pub fn cases_in(&self, split: Split) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|(_, c)| self.split_of(&c.slide_ids[0]) == Some(split))
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonio::write_sorted(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: CohortManifest = jsonio::read(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        jsonio::to_sorted_string(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_geometry() {
        let a = Rect::new(0, 0, 10, 10);
        let b = Rect::new(5, 5, 10, 10);
        assert_eq!(a.intersection_area(&b), 25);
        assert!(!a.contains(&b));
        assert!(a.contains(&Rect::new(2, 2, 8, 8)));
        assert_eq!(a.intersection_area(&Rect::new(10, 0, 5, 5)), 0);
    }
}
