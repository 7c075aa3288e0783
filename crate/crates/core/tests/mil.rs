use frostmil_core::mil::*;
use frostmil_core::nncore::{grad_check, Bound, FeatureMatrix, ParamSet, Tensor};
use frostmil_core::preprocess::PatchRecord;
use frostmil_core::stats::auroc;
use frostmil_core::synthwsi::{generate_cohort, CohortSpec, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_bag(rng: &mut ChaCha8Rng, n: usize, f: usize, label: u32) -> Bag<f64> {
    let data = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    Bag::new("b", Tensor::new(vec![n, f], data).unwrap(), label, vec![]).unwrap()
}

fn scalar_model(v: f64, w: f64) -> Abmil<f64> {
    let cfg = AbmilConfig {
        feature_dim: 1,
        hidden: 1,
        classes: 2,
    };
    let mut p = ParamSet::new();
    p.insert("attn.V", Tensor::new(vec![1, 1], vec![v]).unwrap());
    p.insert("attn.w", Tensor::new(vec![1, 1], vec![w]).unwrap());
    p.insert("cls.weight", Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
    p.insert("cls.bias", Tensor::from_vec(vec![0.0, 0.0]));
    Abmil::from_params(cfg, p).unwrap()
}

#[test]
fn hand_evaluated_attention() {
    let m = scalar_model(1.0, 1.0);
    let bag = Bag::new("b", Tensor::new(vec![2, 1], vec![0.0, 10.0]).unwrap(), 0, vec![]).unwrap();
    let out = m.forward(&bag).unwrap();
    // softmax(0, tanh 10) with tanh 10 = 0.99999999587
    let e = (10.0f64).tanh().exp();
    let a1 = e / (1.0 + e);
    assert!((out.attention[1] - a1).abs() < 1e-12);
    assert!((out.attention[0] - 0.2689).abs() < 1e-4);
    assert!((out.pooled[0] - 10.0 * a1).abs() < 1e-12);
    assert!((out.pooled[0] - 7.311).abs() < 1e-3);
}

#[test]
fn singleton_and_identical_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Abmil::<f64>::init(AbmilConfig::new(4, 2), 3).unwrap();
    let one = random_bag(&mut rng, 1, 4, 0);
    assert_eq!(m.forward(&one).unwrap().attention, vec![1.0]);
    let row: Vec<f64> = one.features.data().to_vec();
    let twice = Bag::new("t", Tensor::new(vec![2, 4], [row.clone(), row.clone()].concat()).unwrap(), 0, vec![]).unwrap();
    let out = m.forward(&twice).unwrap();
    assert_eq!(out.attention, vec![0.5, 0.5]);
    for (p, r) in out.pooled.iter().zip(&row) {
        assert!((p - r).abs() < 1e-15);
    }
}

#[test]
fn attention_normalised_and_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..10 {
        let m = Abmil::<f64>::init(AbmilConfig::new(6, 3), seed).unwrap();
        let bag = random_bag(&mut rng, 9, 6, 1);
        let out = m.forward(&bag).unwrap();
        assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let perm = [3, 0, 8, 1, 7, 2, 6, 4, 5];
        let pout = m.forward(&bag.permuted(&perm).unwrap()).unwrap();
        for (a, b) in out.probs.iter().zip(&pout.probs) {
            assert!((a - b).abs() < 1e-6);
        }
        for (i, &p) in perm.iter().enumerate() {
            assert!((pout.attention[i] - out.attention[p]).abs() < 1e-6);
        }
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = Abmil::<f64>::init(AbmilConfig::new(4, 2), 0).unwrap();
    assert!(m.forward(&random_bag(&mut rng, 3, 5, 0)).is_err());
}

#[test]
fn abmil_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let m = Abmil::<f64>::init(
            AbmilConfig {
                feature_dim: 5,
                hidden: 4,
                classes: 3,
            },
            seed,
        )
        .unwrap();
        let bag = random_bag(&mut rng, 6, 5, (seed % 3) as u32);
        let names: Vec<String> = m.params.iter().map(|(k, _)| k.clone()).collect();
        let tensors: Vec<Tensor<f64>> = m.params.iter().map(|(_, v)| v.clone()).collect();
        let err = grad_check(
            |tape, vars| {
                let bound: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
                let h = tape.constant(bag.features.clone());
                ce_graph(tape, &bound, h, bag.label)
            },
            &tensors,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

fn record(slide: &str, i: u32) -> PatchRecord {
    PatchRecord {
        slide_id: slide.into(),
        x: i * 32,
        y: 0,
        patch_px: 32,
        mpp: 0.25,
        tissue_fraction: 1.0,
        in_lesion: false,
    }
}

#[test]
fn case_bag_concatenates_slides_in_manifest_order() {
    let spec = CohortSpec {
        n_cases: 10,
        slides_per_case: (2, 2),
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(4, &spec).unwrap();
    let (case_id, case) = cohort.cases.iter().find(|(_, c)| c.label == 1).unwrap();
    let counts = [10u32, 15];
    let mut records = Vec::new();
    for (id, &k) in case.slide_ids.iter().zip(&counts) {
        records.extend((0..k).map(|i| record(id, i)));
    }
    let feats = FeatureMatrix::new(25, 2, (0..50).map(|v| v as f32).collect()).unwrap();
    let case_only = |level| {
        let mut c = cohort.clone();
        c.cases.retain(|k, _| k == case_id);
        c.slides.retain(|s| case.slide_ids.contains(&s.slide_id));
        build_bags::<f64>(&TaskSpec::from_cohort(&c, level), &c, None, &records, &feats).unwrap()
    };
    let bags = case_only(TaskLevel::Case);
    assert_eq!(bags.len(), 1);
    assert_eq!(bags[0].len(), 25);
    assert_eq!(bags[0].label, 1);
    assert_eq!(bags[0].features.data()[0], 0.0);
    assert_eq!(bags[0].patch_refs[10].slide_id, case.slide_ids[1]);
    assert_eq!(case_only(TaskLevel::Slide).len(), 2);
}

#[test]
fn missing_patches_name_the_bag() {
    let cohort = generate_cohort(4, &CohortSpec::default()).unwrap();
    let first = &cohort.slides[0].slide_id;
    let records = vec![record(first, 0)];
    let feats = FeatureMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
    let task = TaskSpec::from_cohort(&cohort, TaskLevel::Slide);
    let err = build_bags::<f64>(&task, &cohort, None, &records, &feats).unwrap_err();
    assert!(err.to_string().contains("bag "), "{err}");
    let short = FeatureMatrix::new(0, 2, vec![]).unwrap();
    assert!(build_bags::<f64>(&task, &cohort, Some(Split::Train), &records, &short).is_err());
}

#[test]
fn single_slide_case_matches_its_slide() {
    let cohort = generate_cohort(9, &CohortSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut records = Vec::new();
    for s in &cohort.slides {
        let k = rng.random_range(1..6);
        records.extend((0..k).map(|i| record(&s.slide_id, i)));
    }
    let feats = FeatureMatrix::new(records.len(), 3, (0..records.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let slides = build_bags::<f32>(&TaskSpec::from_cohort(&cohort, TaskLevel::Slide), &cohort, None, &records, &feats).unwrap();
    let cases = build_bags::<f32>(&TaskSpec::from_cohort(&cohort, TaskLevel::Case), &cohort, None, &records, &feats).unwrap();
    let model = Abmil::<f32>::init(AbmilConfig::new(3, 2), 1).unwrap();
    for (case_id, case) in &cohort.cases {
        let cb = cases.iter().find(|b| &b.bag_id == case_id).unwrap();
        let sb = slides.iter().find(|b| b.bag_id == case.slide_ids[0]).unwrap();
        assert_eq!(cb.features, sb.features);
        assert_eq!(model.forward(cb).unwrap().probs, model.forward(sb).unwrap().probs);
    }
}

/// Bags of N(0, 1)-ish instances; positives hide one instance shifted along a fixed direction.
fn planted(n_bags: usize, seed: u64) -> Vec<Bag<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = 8;
    (0..n_bags)
        .map(|i| {
            let label = (i % 2) as u32;
            let n = rng.random_range(8..16);
            let mut data: Vec<f32> = (0..n * f).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            if label == 1 {
                let k = rng.random_range(0..n);
                for v in &mut data[k * f..k * f + 4] {
                    *v += 3.0;
                }
            }
            Bag::new(format!("bag{i}"), Tensor::new(vec![n, f], data).unwrap(), label, vec![]).unwrap()
        })
        .collect()
}

#[test]
fn separable_planted_task_is_learned() {
    let train = planted(200, 1);
    let val = planted(50, 2);
    let test = planted(50, 3);
    let cfg = TrainConfig {
        max_epochs: 50,
        seed: 4,
        ..TrainConfig::default()
    };
    let (model, log) = train_abmil(&train, &val, 2, &cfg).unwrap();
    let preds = predict(&model, &test).unwrap();
    let scores: Vec<f32> = preds.iter().map(|p| p.probs[1]).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.label == 1).collect();
    let auc = auroc(&scores, &labels).unwrap();
    assert!(auc >= 0.95, "AUROC {auc}");
    let best = log.best_val_loss.unwrap();
    assert!(log.epochs.iter().all(|e| best <= e.val_loss));
    let best_now = mean_loss(&model, &val).unwrap();
    assert!((best_now - best).abs() < 1e-9);
    let mean = |pos: bool| {
        let v: Vec<f32> = scores.iter().zip(&labels).filter(|(_, &l)| l == pos).map(|(s, _)| *s).collect();
        v.iter().sum::<f32>() / v.len() as f32
    };
    assert!(mean(true) > mean(false));
    for p in &preds {
        assert!((p.probs[0] + p.probs[1] - 1.0).abs() < 1e-6);
    }
    assert_eq!(predict(&model, &test).unwrap(), preds);
}

#[test]
fn zero_epochs_returns_initial_params() {
    let train = planted(4, 1);
    let cfg = TrainConfig {
        max_epochs: 0,
        seed: 9,
        ..TrainConfig::default()
    };
    let (model, log) = train_abmil(&train, &train, 2, &cfg).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(model, Abmil::init(AbmilConfig::new(8, 2), 9).unwrap());
}

#[test]
fn patience_one_stops_after_first_worse_epoch() {
    let mut es = EarlyStopping::new(1);
    assert!(es.observe(1.0));
    assert!(!es.should_stop());
    assert!(!es.observe(1.1));
    assert!(es.should_stop());
    assert_eq!(es.best(), Some(1.0));
}

#[test]
fn grids_and_prediction_files() {
    let refs: Vec<PatchRecord> = (0..2).map(|i| record("s1", i)).collect();
    let bag = Bag::new("s1", Tensor::new(vec![2, 1], vec![0.0f32, 1.0]).unwrap(), 1, refs).unwrap();
    let grid = attention_to_grid(&bag, &[0.2f32, 0.8]).unwrap();
    assert_eq!(grid[0].cells.iter().map(|c| c.weight).collect::<Vec<_>>(), vec![0.0, 1.0]);
    let flat = attention_to_grid(&bag, &[0.5f32, 0.5]).unwrap();
    assert!(flat[0].cells.iter().all(|c| c.weight == 0.5));

    let dir = tempfile::tempdir().unwrap();
    let preds = vec![Prediction {
        bag_id: "s1".to_string(),
        label: 1,
        probs: vec![0.123456789012f64, 0.876543210988],
        attention: vec![],
    }];
    let path = dir.path().join("p.csv");
    write_predictions_csv(&preds, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "bag_id,label,prob_0,prob_1\ns1,1,0.123456789,0.876543211\n");
    let rows = read_predictions_csv(&path).unwrap();
    assert_eq!(rows[0].probs, vec![0.123456789, 0.876543211]);
    let jl = dir.path().join("a.jsonl");
    write_attention_jsonl(&grid, &jl).unwrap();
    assert_eq!(read_attention_jsonl(&jl).unwrap(), grid);
}
