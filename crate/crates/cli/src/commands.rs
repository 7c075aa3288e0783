//! One function per subcommand. Each returns its one-line JSON summary.

use crate::config::RunConfig;
use crate::heatmap::{hottest_cell, render_heatmap};
use frostmil_core::jsonio;
use frostmil_core::mil::{
    attention_to_grid, build_bags, predict, read_attention_jsonl, read_predictions_csv, train_abmil,
    write_attention_jsonl, write_predictions_csv, Abmil, TaskLevel, TaskSpec,
};
use frostmil_core::nncore::{
    load_checkpoint, pretrain, save_checkpoint, stack, Encoder, FeatureMatrix, LoraConfig, ParamSet, Tensor,
    VitConfig,
};
use frostmil_core::preprocess::{
    balance_centers, extract_patch_pixels, mask_level, read_records, segment_tissue, tile_slide, write_records,
    PatchRecord,
};
use frostmil_core::stats::{evaluate, subgroup_report, write_report, EvalConfig, ReportBundle, ScoredItem};
use frostmil_core::synthwsi::{generate_cohort, render, CohortManifest, Slide, Split};
use frostmil_core::triage::{
    apply_policy, combined_workflow_eval, ihc_screen, waterfall, write_waterfall_csv, IhcScreen, ScoredCase,
    TriageOutcome, TriagePolicy, WorkflowComparison,
};
use frostmil_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Splits that get prediction files after training.
pub const PREDICTION_SPLITS: [Split; 2] = [Split::Test, Split::Prospective];

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn slides_dir(cohort_path: &Path) -> PathBuf {
    parent_dir(cohort_path).join("slides")
}

fn split_name(s: Split) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

pub struct GenOptions {
    pub out: PathBuf,
}

pub fn gen(cfg: &RunConfig, opts: &GenOptions) -> Result<Value> {
    let manifest = generate_cohort(cfg.seed, &cfg.cohort)?;
    create_dir(&opts.out)?;
    let cohort_path = opts.out.join("cohort.json");
    manifest.save(&cohort_path)?;
    let dir = slides_dir(&cohort_path);
    for m in &manifest.slides {
        log::info!("rendering {}", m.slide_id);
        let slide = Slide {
            levels: render(m),
            manifest: m.clone(),
        };
        slide.save(&dir.join(&m.slide_id))?;
    }
    cfg.write_beside(&opts.out, "gen")?;
    Ok(json!({
        "command": "gen",
        "cases": manifest.cases.len(),
        "slides": manifest.slides.len(),
        "cohort": cohort_path,
    }))
}

pub struct TileOptions {
    pub cohort: PathBuf,
    pub out: PathBuf,
}

pub fn tile(cfg: &RunConfig, opts: &TileOptions) -> Result<Value> {
    let cohort = CohortManifest::load(&opts.cohort)?;
    let dir = slides_dir(&opts.cohort);
    let mut records = Vec::new();
    for m in &cohort.slides {
        let slide = Slide::load(&dir.join(&m.slide_id))?;
        let level = mask_level(m, cfg.tile.mask_min_side);
        let mask = segment_tissue(&slide, level, &cfg.tile.segment)?;
        let r = tile_slide(m, &mask, &cfg.tile.tile)?;
        log::info!("{}: {} patches", m.slide_id, r.len());
        records.extend(r);
    }
    write_records(&records, &opts.out)?;
    cfg.write_beside(&parent_dir(&opts.out), "tile")?;
    Ok(json!({
        "command": "tile",
        "slides": cohort.slides.len(),
        "patches": records.len(),
        "in_lesion": records.iter().filter(|r| r.in_lesion).count(),
        "out": opts.out,
    }))
}

/// Pixel tensors of `records`, loading each slide once.
fn patch_pixels(slides: &Path, records: &[PatchRecord], net_px: usize) -> Result<Vec<Tensor<f32>>> {
    let mut current: Option<Slide> = None;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if current.as_ref().is_none_or(|s| s.manifest.slide_id != r.slide_id) {
            current = Some(Slide::load(&slides.join(&r.slide_id))?);
        }
        let slide = current.as_ref().expect("slide loaded above");
        out.push(extract_patch_pixels(slide, r, net_px)?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    vit: VitConfig,
    lora: LoraConfig,
}

pub struct PretrainOptions {
    pub cohort: PathBuf,
    pub patches: PathBuf,
    pub out: PathBuf,
}

pub fn pretrain_cmd(cfg: &RunConfig, opts: &PretrainOptions) -> Result<Value> {
    let cohort = CohortManifest::load(&opts.cohort)?;
    let records = read_records(&opts.patches)?;
    let split = if cohort.slides_in(Split::Pretrain).is_empty() {
        Split::Train
    } else {
        Split::Pretrain
    };
    let pool: Vec<PatchRecord> = records
        .into_iter()
        .filter(|r| cohort.split_of(&r.slide_id) == Some(split))
        .collect();
    let center = |r: &PatchRecord| cohort.slide(&r.slide_id).map(|s| s.center_id.clone()).unwrap_or_default();
    let balanced = balance_centers(&pool, center, None, cfg.stage_seed("balance"));
    let n = balanced.len().min(cfg.pretrain.max_stream);
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no {} patches to pretrain on", split_name(split))));
    }
    let chosen: Vec<PatchRecord> = (0..n).map(|i| balanced[i * balanced.len() / n].clone()).collect();
    let stream = patch_pixels(&slides_dir(&opts.cohort), &chosen, cfg.encoder.vit.net_px)?;
    let encoder = Encoder::<f32>::init(cfg.encoder.vit.clone(), cfg.encoder.lora.clone(), cfg.stage_seed("encoder"))?;
    let mut run = cfg.pretrain.run.clone();
    run.seed = cfg.stage_seed("pretrain");
    let outcome = pretrain(&encoder, &stream, &run, &mut |step, _| {
        if step % 10 == 0 {
            log::info!("pretrain step {step}");
        }
    })?;
    let mut params = outcome.encoder.base.clone();
    params.extend(outcome.encoder.adapters.clone());
    let meta = EncoderMeta {
        vit: cfg.encoder.vit.clone(),
        lora: cfg.encoder.lora.clone(),
    };
    save_checkpoint(&opts.out, &meta, &params)?;
    let losses: Vec<f64> = outcome.losses.iter().map(|&v| v as f64).collect();
    jsonio::write_sorted(
        &json!({
            "losses": losses,
            "probe_loss_initial": outcome.probe_loss_initial as f64,
            "probe_loss_final": outcome.probe_loss_final as f64,
            "stream_patches": n,
            "summary": encoder.summary(),
        }),
        &opts.out.join("pretrain_log.json"),
    )?;
    cfg.write_beside(&opts.out, "pretrain")?;
    Ok(json!({
        "command": "pretrain",
        "steps": run.steps,
        "stream_patches": n,
        "probe_loss_initial": outcome.probe_loss_initial as f64,
        "probe_loss_final": outcome.probe_loss_final as f64,
        "out": opts.out,
    }))
}

/// Rebuilds an encoder from a checkpoint directory.
pub fn load_encoder(dir: &Path) -> Result<Encoder<f32>> {
    let (meta, params) = load_checkpoint(dir)?;
    let meta: EncoderMeta = serde_json::from_value(meta).map_err(|source| Error::Json {
        context: format!("{} config", dir.display()),
        source,
    })?;
    let (mut base, mut adapters) = (ParamSet::new(), ParamSet::new());
    for (name, t) in params.iter() {
        if name.contains(".lora_") {
            adapters.insert(name.clone(), t.clone());
        } else {
            base.insert(name.clone(), t.clone());
        }
    }
    meta.vit.validate()?;
    Ok(Encoder {
        config: meta.vit,
        lora: meta.lora,
        base,
        adapters,
    })
}

pub struct ExtractOptions {
    pub cohort: PathBuf,
    pub patches: PathBuf,
    /// `None` uses the freshly initialised encoder (zero adapters).
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn extract(cfg: &RunConfig, opts: &ExtractOptions) -> Result<Value> {
    let records = read_records(&opts.patches)?;
    let encoder = match &opts.checkpoint {
        Some(dir) => load_encoder(dir)?,
        None => Encoder::<f32>::init(cfg.encoder.vit.clone(), cfg.encoder.lora.clone(), cfg.stage_seed("encoder"))?,
    };
    let slides = slides_dir(&opts.cohort);
    let dim = encoder.config.feature_dim();
    let mut data = Vec::with_capacity(records.len() * dim);
    for chunk in records.chunks(cfg.extract.batch) {
        let images = stack(&patch_pixels(&slides, chunk, encoder.config.net_px)?)?;
        let f = encoder.features(&images)?;
        if !f.all_finite() {
            return Err(Error::NonFinite {
                what: "features".into(),
                location: format!("patch batch starting at {}", chunk[0].slide_id),
            });
        }
        data.extend_from_slice(f.data());
    }
    let fm = FeatureMatrix::new(records.len(), dim, data)?;
    fm.write(&opts.out)?;
    cfg.write_beside(&parent_dir(&opts.out), "extract")?;
    Ok(json!({
        "command": "extract",
        "rows": fm.rows,
        "dim": fm.dim,
        "encoder": opts.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "base".into()),
        "out": opts.out,
    }))
}

#[derive(Serialize, Deserialize)]
struct AggregatorMeta {
    abmil: frostmil_core::mil::AbmilConfig,
    task: TaskSpec,
}

pub struct TrainOptions {
    pub cohort: PathBuf,
    pub patches: PathBuf,
    pub features: PathBuf,
    pub out: PathBuf,
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<Value> {
    let cohort = CohortManifest::load(&opts.cohort)?;
    let records = read_records(&opts.patches)?;
    let features = FeatureMatrix::read(&opts.features)?;
    let task = TaskSpec::from_cohort(&cohort, cfg.train.level);
    let bags = |split| build_bags::<f32>(&task, &cohort, Some(split), &records, &features);
    let train_bags = bags(Split::Train)?;
    let val_bags = bags(Split::Val)?;
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::validation("splits", "training needs non-empty train and val splits"));
    }
    let mut run = cfg.train.run;
    run.seed = cfg.stage_seed("train");
    let (model, log) = train_abmil(&train_bags, &val_bags, task.n_classes(), &run)?;
    let meta = AggregatorMeta {
        abmil: model.config,
        task: task.clone(),
    };
    save_checkpoint(&opts.out, &meta, &model.params)?;
    jsonio::write_sorted(&log, &opts.out.join("train_log.json"))?;

    let mut outputs = Vec::new();
    for split in PREDICTION_SPLITS {
        if cohort.slides_in(split).is_empty() {
            continue;
        }
        let name = split_name(split);
        let slide_task = TaskSpec {
            level: TaskLevel::Slide,
            ..task.clone()
        };
        let case_task = TaskSpec {
            level: TaskLevel::Case,
            ..task.clone()
        };
        let slide_bags = build_bags::<f32>(&slide_task, &cohort, Some(split), &records, &features)?;
        let slide_preds = predict(&model, &slide_bags)?;
        let mut grids = Vec::new();
        for (b, p) in slide_bags.iter().zip(&slide_preds) {
            grids.extend(attention_to_grid(b, &p.attention)?);
        }
        let case_bags = build_bags::<f32>(&case_task, &cohort, Some(split), &records, &features)?;
        let case_preds = predict(&model, &case_bags)?;
        for (suffix, write) in [
            ("slides.csv", &slide_preds),
            ("cases.csv", &case_preds),
        ] {
            let path = opts.out.join(format!("{name}_{suffix}"));
            write_predictions_csv(write, &path)?;
            outputs.push(path);
        }
        let path = opts.out.join(format!("{name}_attention.jsonl"));
        write_attention_jsonl(&grids, &path)?;
        outputs.push(path);
    }
    cfg.write_beside(&opts.out, "train")?;
    Ok(json!({
        "command": "train",
        "train_bags": train_bags.len(),
        "val_bags": val_bags.len(),
        "epochs": log.epochs.len(),
        "best_epoch": log.best_epoch,
        "best_val_loss": log.best_val_loss,
        "outputs": outputs,
    }))
}

/// Aggregator checkpoint written by `train`.
pub fn load_aggregator(dir: &Path) -> Result<(Abmil<f32>, TaskSpec)> {
    let (meta, params) = load_checkpoint(dir)?;
    let meta: AggregatorMeta = serde_json::from_value(meta).map_err(|source| Error::Json {
        context: format!("{} config", dir.display()),
        source,
    })?;
    Ok((Abmil::from_params(meta.abmil, params)?, meta.task))
}

/// Grouping tags of a slide or case id.
fn tags_for(cohort: &CohortManifest, id: &str) -> Result<BTreeMap<String, String>> {
    let (case, slide) = match cohort.cases.get(id) {
        Some(c) => (c, None),
        None => {
            let s = cohort
                .slide(id)
                .ok_or_else(|| Error::validation("predictions", format!("{id} is neither a case nor a slide of the cohort")))?;
            let c = cohort
                .cases
                .get(&s.case_id)
                .ok_or_else(|| Error::validation("predictions", format!("slide {id} has no case")))?;
            (c, Some(s))
        }
    };
    let mut t = BTreeMap::new();
    t.insert("center_id".into(), slide.map_or(&case.center_id, |s| &s.center_id).clone());
    t.insert("site".into(), slide.map_or(&case.site, |s| &s.site).clone());
    t.insert("histotech_id".into(), slide.map_or(&case.histotech_id, |s| &s.histotech_id).clone());
    t.insert("difficulty".into(), if case.is_difficult { "difficult" } else { "routine" }.into());
    Ok(t)
}

pub struct EvalOptions {
    pub pred: PathBuf,
    pub cohort: PathBuf,
    pub out: PathBuf,
    pub model: String,
}

pub fn eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<Value> {
    let cohort = CohortManifest::load(&opts.cohort)?;
    let rows = read_predictions_csv(&opts.pred)?;
    let c = cohort.classes.len();
    let items = rows
        .into_iter()
        .map(|r| {
            if r.probs.len() != c || r.label as usize >= c {
                return Err(Error::validation(
                    format!("bag {}", r.bag_id),
                    format!("{} probabilities and label {} for {c} classes", r.probs.len(), r.label),
                ));
            }
            Ok(ScoredItem {
                tags: tags_for(&cohort, &r.bag_id)?,
                id: r.bag_id,
                label: r.label,
                scores: r.probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let task = TaskSpec::from_cohort(&cohort, TaskLevel::Slide);
    let ecfg = EvalConfig {
        seed: cfg.stage_seed("eval"),
        positive_class: task.positive_class.unwrap_or(cfg.eval.run.positive_class),
        task: cohort.cohort_id.clone(),
        model: opts.model.clone(),
        ..cfg.eval.run.clone()
    };
    let overall = evaluate(&items, &ecfg)?;
    let mut subgroups = BTreeMap::new();
    for key in &cfg.eval.subgroups {
        subgroups.insert(key.clone(), subgroup_report(&items, key, &ecfg)?);
    }
    let points: BTreeMap<&String, f64> = overall.metrics.iter().map(|(k, v)| (k, v.point)).collect();
    let summary = json!({
        "command": "eval",
        "items": items.len(),
        "metrics": points,
        "out": opts.out,
    });
    create_dir(&opts.out)?;
    write_report(&ReportBundle { overall, subgroups }, &opts.out)?;
    cfg.write_beside(&opts.out, "eval")?;
    Ok(summary)
}

/// Contents of `triage.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TriageReport {
    pub policy: TriagePolicy,
    pub outcome: TriageOutcome,
    pub workflow: Option<WorkflowComparison>,
    pub workflow_skipped: Option<String>,
    pub ihc: Option<IhcScreen>,
    pub ihc_skipped: Option<String>,
}

pub struct TriageOptions {
    pub pred: PathBuf,
    pub cohort: PathBuf,
    pub out: PathBuf,
}

/// Case scores as the summed probability of the malignant classes.
pub fn scored_cases(cohort: &CohortManifest, pred: &Path) -> Result<Vec<ScoredCase>> {
    let rows = read_predictions_csv(pred)?;
    let malignant: Vec<bool> = cohort.classes.iter().map(|c| c.malignant).collect();
    rows.into_iter()
        .map(|r| {
            let case = cohort.cases.get(&r.bag_id).ok_or_else(|| {
                Error::validation("predictions", format!("{} is not a case id; triage needs case-level predictions", r.bag_id))
            })?;
            if r.probs.len() != malignant.len() {
                return Err(Error::validation(
                    format!("bag {}", r.bag_id),
                    format!("{} probabilities for {} classes", r.probs.len(), malignant.len()),
                ));
            }
            let score: f64 = r.probs.iter().zip(&malignant).filter(|(_, &m)| m).map(|(p, _)| p).sum();
            Ok(ScoredCase {
                case_id: r.bag_id.clone(),
                score: score.clamp(0.0, 1.0),
                positive: malignant.get(case.label as usize).copied().unwrap_or(false),
                pathologist_positive: Some(case.pathologist_positive),
                needs_ihc: case.needs_ihc,
            })
        })
        .collect()
}

fn optional<T>(r: Result<T>) -> Result<(Option<T>, Option<String>)> {
    match r {
        Ok(v) => Ok((Some(v), None)),
        Err(Error::Undefined { metric, reason }) => Ok((None, Some(format!("skipped: {metric} {reason}")))),
        Err(e) => Err(e),
    }
}

pub fn triage(cfg: &RunConfig, opts: &TriageOptions) -> Result<Value> {
    let cohort = CohortManifest::load(&opts.cohort)?;
    let cases = scored_cases(&cohort, &opts.pred)?;
    let policy = cfg.triage.policy;
    let outcome = apply_policy(&policy, &cases)?;
    let (workflow, workflow_skipped) = optional(combined_workflow_eval(&policy, &cases))?;
    let (ihc, ihc_skipped) = optional(ihc_screen(&cases, cfg.triage.ihc_target_sensitivity))?;
    let report = TriageReport {
        policy,
        outcome,
        workflow,
        workflow_skipped,
        ihc,
        ihc_skipped,
    };
    jsonio::write_sorted(&report, &opts.out)?;
    let dir = parent_dir(&opts.out);
    let wf = dir.join("waterfall.csv");
    write_waterfall_csv(&waterfall(&policy, &cases), &wf)?;
    cfg.write_beside(&dir, "triage")?;
    Ok(json!({
        "command": "triage",
        "cases": cases.len(),
        "auto": report.outcome.auto.len(),
        "residual": report.outcome.residual.len(),
        "workload_reduction": report.outcome.workload_reduction,
        "positive_capture": report.outcome.positive_capture,
        "out": opts.out,
        "waterfall": wf,
    }))
}

pub struct HeatmapOptions {
    pub cohort: PathBuf,
    pub patches: PathBuf,
    pub attention: PathBuf,
    pub out: PathBuf,
    /// Empty renders every grid in the attention file.
    pub slides: Vec<String>,
}

pub fn heatmap(cfg: &RunConfig, opts: &HeatmapOptions) -> Result<Value> {
    // loaded for validation and to locate the slides
    CohortManifest::load(&opts.cohort)?;
    let records = read_records(&opts.patches)?;
    let grids = read_attention_jsonl(&opts.attention)?;
    for s in &opts.slides {
        if !grids.iter().any(|g| &g.slide_id == s) {
            return Err(Error::validation("slide", format!("no attention grid for slide {s}")));
        }
    }
    create_dir(&opts.out)?;
    let dir = slides_dir(&opts.cohort);
    let mut written = Vec::new();
    for g in grids.iter().filter(|g| opts.slides.is_empty() || opts.slides.contains(&g.slide_id)) {
        let slide = Slide::load(&dir.join(&g.slide_id))?;
        let img = render_heatmap(&slide, cfg.heatmap.level, g, &records, cfg.heatmap.alpha)?;
        let path = opts.out.join(format!("{}.png", g.slide_id));
        img.save(&path).map_err(Error::from)?;
        let hot = hottest_cell(g);
        written.push(json!({"slide_id": g.slide_id, "png": path, "hottest_cell": hot}));
    }
    cfg.write_beside(&opts.out, "heatmap")?;
    Ok(json!({
        "command": "heatmap",
        "rendered": written.len(),
        "heatmaps": written,
    }))
}
