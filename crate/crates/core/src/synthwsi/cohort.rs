use super::manifest::{CaseEntry, ClassDef, CohortManifest, MetastasisSize, Split};
use super::slide::{plan_slide, SlideGeometry, SlideSpec, TissueLayout};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub cohort_id: String,
    pub n_cases: usize,
    pub classes: Vec<ClassDef>,
    /// Case proportion of each class, aligned with `classes`.
    pub class_mix: Vec<f64>,
    pub split_policy: BTreeMap<Split, f64>,
    pub centers: Vec<String>,
    pub sites: Vec<String>,
    pub histotechs: Vec<String>,
    pub slides_per_case: (u32, u32),
    pub difficult_rate: f64,
    pub difficult_contrast: f64,
    pub needs_ihc_rate: f64,
    pub lymph_node: bool,
    pub micro_rate: f64,
    pub pathologist_miss_rate: f64,
    pub pathologist_false_alarm_rate: f64,
    pub geometry: SlideGeometry,
    pub tissue_boxes: (u32, u32),
    pub tint_gain: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            cohort_id: "synthetic".into(),
            n_cases: 20,
            classes: ClassDef::binary(),
            class_mix: vec![0.5, 0.5],
            split_policy: BTreeMap::from([(Split::Train, 0.6), (Split::Val, 0.2), (Split::Test, 0.2)]),
            centers: vec!["center_a".into(), "center_b".into(), "center_c".into()],
            sites: vec!["breast".into(), "lung".into(), "lymph_node".into(), "thyroid".into()],
            histotechs: (1..=4).map(|i| format!("tech{i}")).collect(),
            slides_per_case: (1, 1),
            difficult_rate: 0.1,
            difficult_contrast: 0.6,
            needs_ihc_rate: 0.2,
            lymph_node: false,
            micro_rate: 0.5,
            pathologist_miss_rate: 0.02,
            pathologist_false_alarm_rate: 0.01,
            geometry: SlideGeometry::default(),
            tissue_boxes: (1, 3),
            tint_gain: 0.05,
        }
    }
}

fn rate(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::validation(field, format!("rate {v} outside [0, 1]")))
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::validation("classes", "need at least two classes"));
        }
        if self.class_mix.len() != self.classes.len() {
            return Err(Error::validation("class_mix", "one proportion per class required"));
        }
        let mix: f64 = self.class_mix.iter().sum();
        if (mix - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::validation("class_mix", format!("proportions must be non-negative and sum to 1, got {mix}")));
        }
        let split: f64 = self.split_policy.values().sum();
        if self.split_policy.is_empty() || (split - 1.0).abs() > 1e-9 || self.split_policy.values().any(|&p| !(p >= 0.0)) {
            return Err(Error::validation("split_policy", format!("fractions must be non-negative and sum to 1, got {split}")));
        }
        if self.n_cases < self.classes.len() {
            return Err(Error::validation(
                "n_cases",
                format!("{} cases cannot cover {} classes", self.n_cases, self.classes.len()),
            ));
        }
        for (name, v) in [("centers", &self.centers), ("sites", &self.sites), ("histotechs", &self.histotechs)] {
            if v.is_empty() {
                return Err(Error::validation(name, "vocabulary is empty"));
            }
        }
        let (lo, hi) = self.slides_per_case;
        if lo == 0 || hi < lo {
            return Err(Error::validation("slides_per_case", "need 1 <= min <= max"));
        }
        rate("difficult_rate", self.difficult_rate)?;
        rate("needs_ihc_rate", self.needs_ihc_rate)?;
        rate("micro_rate", self.micro_rate)?;
        rate("pathologist_miss_rate", self.pathologist_miss_rate)?;
        rate("pathologist_false_alarm_rate", self.pathologist_false_alarm_rate)?;
        if !(self.difficult_contrast > 0.0 && self.difficult_contrast <= 1.0) {
            return Err(Error::validation("difficult_contrast", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the lower index.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Sequence of `totals.len()` labels, each prefix as proportional as possible.
fn interleave(totals: &[usize]) -> Vec<usize> {
    let n: usize = totals.iter().sum();
    let mut used = vec![0usize; totals.len()];
    (0..n)
        .map(|i| {
            let pick = (0..totals.len())
                .filter(|&k| used[k] < totals[k])
                .max_by(|&a, &b| {
                    let da = totals[a] as f64 * (i + 1) as f64 / n as f64 - used[a] as f64;
                    let db = totals[b] as f64 * (i + 1) as f64 / n as f64 - used[b] as f64;
                    da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
                })
                .expect("remaining capacity");
            used[pick] += 1;
            pick
        })
        .collect()
}

/// Builds a cohort manifest. Pixels are not rendered here; each slide's
/// raster follows from its manifest entry.
pub fn generate_cohort(seed: u64, spec: &CohortSpec) -> Result<CohortManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let class_counts = apportion(spec.n_cases, &spec.class_mix);
    let mut case_classes: Vec<u32> = Vec::with_capacity(spec.n_cases);
    for (c, &k) in class_counts.iter().enumerate() {
        let mut block = vec![c as u32; k];
        block.shuffle(&mut rng);
        case_classes.extend(block);
    }

    let splits: Vec<Split> = spec.split_policy.keys().copied().collect();
    let fractions: Vec<f64> = spec.split_policy.values().copied().collect();
    let split_counts = apportion(spec.n_cases, &fractions);
    let case_splits: Vec<Split> = interleave(&split_counts).into_iter().map(|k| splits[k]).collect();

    let benign_class = spec.classes.iter().position(|c| !c.malignant).map(|i| i as u32);
    let pick = |rng: &mut ChaCha8Rng, v: &[String]| v[rng.random_range(0..v.len())].clone();

    let mut cohort = CohortManifest {
        cohort_id: spec.cohort_id.clone(),
        seed,
        classes: spec.classes.clone(),
        lymph_node: spec.lymph_node,
        slides: Vec::new(),
        splits: BTreeMap::new(),
        cases: BTreeMap::new(),
    };
    let width = spec.n_cases.to_string().len().max(4);
    for (i, (&label, &split)) in case_classes.iter().zip(&case_splits).enumerate() {
        let case_id = format!("case{i:0width$}");
        let positive = spec.classes[label as usize].malignant;
        let center_id = pick(&mut rng, &spec.centers);
        let site = pick(&mut rng, &spec.sites);
        let histotech_id = pick(&mut rng, &spec.histotechs);
        let is_difficult = rng.random_bool(spec.difficult_rate);
        let needs_ihc = rng.random_bool(spec.needs_ihc_rate);
        let metastasis_size_class = if spec.lymph_node && positive {
            if rng.random_bool(spec.micro_rate) {
                MetastasisSize::Micro
            } else {
                MetastasisSize::Macro
            }
        } else {
            MetastasisSize::None
        };
        let pathologist_positive = if positive {
            !rng.random_bool(spec.pathologist_miss_rate)
        } else {
            rng.random_bool(spec.pathologist_false_alarm_rate)
        };

        let n_slides = rng.random_range(spec.slides_per_case.0..=spec.slides_per_case.1) as usize;
        let mut slide_labels = vec![label; n_slides];
        if positive {
            if let Some(benign) = benign_class {
                let n_malignant = rng.random_range(1..=n_slides);
                let mut idx: Vec<usize> = (0..n_slides).collect();
                idx.shuffle(&mut rng);
                for &j in &idx[n_malignant..] {
                    slide_labels[j] = benign;
                }
            }
        }

        let mut slide_ids = Vec::with_capacity(n_slides);
        for (j, &slide_label) in slide_labels.iter().enumerate() {
            let slide_id = format!("{case_id}_s{j}");
            let slide_spec = SlideSpec {
                slide_id: slide_id.clone(),
                case_id: case_id.clone(),
                class_label: slide_label,
                geometry: spec.geometry.clone(),
                layout: TissueLayout::Random {
                    min: spec.tissue_boxes.0,
                    max: spec.tissue_boxes.1,
                },
                lesions: 1,
                lesion_contrast: if is_difficult { spec.difficult_contrast } else { 1.0 },
                center_id: center_id.clone(),
                site: site.clone(),
                histotech_id: histotech_id.clone(),
                tint_gain: spec.tint_gain,
            };
            cohort.slides.push(plan_slide(rng.random(), &slide_spec, &spec.classes)?);
            cohort.splits.entry(split).or_default().push(slide_id.clone());
            slide_ids.push(slide_id);
        }
        cohort.cases.insert(
            case_id,
            CaseEntry {
                slide_ids,
                label,
                is_difficult,
                needs_ihc,
                metastasis_size_class,
                pathologist_positive,
                center_id,
                site,
                histotech_id,
            },
        );
    }
    cohort.validate()?;
    Ok(cohort)
}
