//! Run configuration: one JSON document, every field defaulted.

use frostmil_core::jsonio;
use frostmil_core::mil::{TaskLevel, TrainConfig};
use frostmil_core::nncore::{LoraConfig, PretrainConfig, VitConfig};
use frostmil_core::preprocess::{SegmentConfig, TileConfig};
use frostmil_core::stats::EvalConfig;
use frostmil_core::synthwsi::noise::{hash_str, splitmix};
use frostmil_core::synthwsi::CohortSpec;
use frostmil_core::triage::TriagePolicy;
use frostmil_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Locations relative to `workdir` unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub workdir: PathBuf,
    pub cohort: PathBuf,
    pub patches: PathBuf,
    pub features: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            workdir: "run".into(),
            cohort: "cohort.json".into(),
            patches: "patches.jsonl".into(),
            features: "features.fvec".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    pub fn cohort(&self) -> PathBuf {
        self.resolve(&self.cohort)
    }

    pub fn patches(&self) -> PathBuf {
        self.resolve(&self.patches)
    }

    pub fn features(&self) -> PathBuf {
        self.resolve(&self.features)
    }

    pub fn encoder(&self) -> PathBuf {
        self.resolve(&self.checkpoints).join("encoder")
    }

    pub fn aggregator(&self) -> PathBuf {
        self.resolve(&self.checkpoints).join("abmil")
    }

    pub fn reports(&self) -> PathBuf {
        self.resolve(&self.reports)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileStage {
    pub tile: TileConfig,
    pub segment: SegmentConfig,
    /// The mask is computed on the coarsest level with at least this short side.
    pub mask_min_side: u32,
}

impl Default for TileStage {
    fn default() -> Self {
        TileStage {
            tile: TileConfig::default(),
            segment: SegmentConfig::default(),
            mask_min_side: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderStage {
    pub vit: VitConfig,
    pub lora: LoraConfig,
}

impl Default for EncoderStage {
    /// 224 px input, desk-scale width and depth.
    fn default() -> Self {
        EncoderStage {
            vit: VitConfig {
                net_px: 224,
                patch_embed_px: 14,
                ..VitConfig::default()
            },
            lora: LoraConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainStage {
    pub run: PretrainConfig,
    /// Upper bound on stream patches, taken at an even stride after center balancing.
    pub max_stream: usize,
}

impl Default for PretrainStage {
    fn default() -> Self {
        PretrainStage {
            run: PretrainConfig::default(),
            max_stream: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractStage {
    pub batch: usize,
}

impl Default for ExtractStage {
    fn default() -> Self {
        ExtractStage { batch: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainStage {
    pub run: TrainConfig,
    pub level: TaskLevel,
}

impl Default for TrainStage {
    fn default() -> Self {
        TrainStage {
            run: TrainConfig::default(),
            level: TaskLevel::Slide,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalStage {
    pub run: EvalConfig,
    pub subgroups: Vec<String>,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage {
            run: EvalConfig::default(),
            subgroups: ["center_id", "site", "histotech_id", "difficulty"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageStage {
    pub policy: TriagePolicy,
    pub ihc_target_sensitivity: f64,
}

impl Default for TriageStage {
    fn default() -> Self {
        TriageStage {
            policy: TriagePolicy::default(),
            ihc_target_sensitivity: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapStage {
    pub level: usize,
    pub alpha: f64,
}

impl Default for HeatmapStage {
    fn default() -> Self {
        HeatmapStage { level: 1, alpha: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub cohort: CohortSpec,
    pub tile: TileStage,
    pub encoder: EncoderStage,
    pub pretrain: PretrainStage,
    pub extract: ExtractStage,
    pub train: TrainStage,
    pub eval: EvalStage,
    pub triage: TriageStage,
    pub heatmap: HeatmapStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            paths: Paths::default(),
            cohort: CohortSpec::default(),
            tile: TileStage::default(),
            encoder: EncoderStage::default(),
            pretrain: PretrainStage::default(),
            extract: ExtractStage::default(),
            train: TrainStage::default(),
            eval: EvalStage::default(),
            triage: TriageStage::default(),
            heatmap: HeatmapStage::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = jsonio::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.cohort.validate()?;
        self.encoder.vit.validate()?;
        self.pretrain.run.dino.validate()?;
        self.triage.policy.validate()?;
        if self.encoder.lora.rank == 0 {
            return Err(Error::validation("encoder.lora.rank", "must be at least 1"));
        }
        if self.extract.batch == 0 {
            return Err(Error::validation("extract.batch", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.heatmap.alpha) {
            return Err(Error::validation("heatmap.alpha", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.triage.ihc_target_sensitivity) {
            return Err(Error::validation("triage.ihc_target_sensitivity", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Seed of one stage, derived from the run seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        splitmix(self.seed ^ hash_str(stage))
    }

    /// Writes the effective config as `<dir>/<command>.config.json`.
    pub fn write_beside(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{command}.config.json"));
        jsonio::write_sorted(self, &path)?;
        Ok(path)
    }
}
