use std::fs;

use mvp_core::autodiff::Array;
use mvp_core::model::{ModelConfig, PosEncoding, QueryMode};
use mvp_core::scenegen::{generate_scenes, Scene, SceneConfig};
use mvp_core::Error;
use mvp_harness::ablate::{ablation_csv, run_ablation, Budget, Grid};
use mvp_harness::eval::evaluate_model;
use mvp_harness::train::{epoch_order, Trainer, LOG_HEADER};
use mvp_harness::RunConfig;

fn scene_config() -> SceneConfig {
    SceneConfig {
        views: 3,
        height: 16,
        width: 16,
        heatmap_sigma_px: 1.0,
        max_persons: 2,
        ..SceneConfig::default()
    }
}

fn tiny_run(out: &std::path::Path) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            persons: 3,
            joints: 5,
            in_channels: 5,
            channels: 16,
            views: 3,
            layers: 2,
            points: 4,
            heads: 4,
            ..ModelConfig::default()
        },
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn scenes(seed: u64, n: usize) -> Vec<Scene> {
    generate_scenes(seed, n, &scene_config()).unwrap()
}

#[test]
fn one_scene_overfit_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(0, 1);
    let mut cfg = tiny_run(dir.path());
    cfg.optim.lr = 1e-3;
    cfg.max_steps = Some(200);
    cfg.epochs = 1000;
    let mut t = Trainer::new(cfg, 1).unwrap();
    let first = t.step(&data).unwrap().loss;
    let mut last = first;
    while !t.finished() {
        last = t.step(&data).unwrap().loss;
    }
    assert_eq!(t.step_count(), 200);
    assert!(last < 0.25 * first, "loss {first} -> {last}");
}

#[test]
fn resume_continues_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(1, 3);
    let mut cfg = tiny_run(dir.path());
    cfg.optim.lr = 5e-4;
    cfg.epochs = 100;
    cfg.batch_size = 2;

    let mut straight = Trainer::new(cfg.clone(), data.len()).unwrap();
    let reference: Vec<f64> = (0..10).map(|_| straight.step(&data).unwrap().loss).collect();

    let mut first = Trainer::new(cfg, data.len()).unwrap();
    let mut resumed_losses: Vec<f64> = (0..4).map(|_| first.step(&data).unwrap().loss).collect();
    let path = dir.path().join("mid.mvpc");
    first.save(&path).unwrap();
    drop(first);
    let mut second = Trainer::resume(&path).unwrap();
    assert_eq!(second.step_count(), 4);
    resumed_losses.extend((0..6).map(|_| second.step(&data).unwrap().loss));
    assert_eq!(
        resumed_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        reference.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    for ((n, a), (_, b)) in second.model.params.iter().zip(straight.model.params.iter()) {
        assert_eq!(a, b, "{n}");
    }
}

#[test]
fn learning_rate_drops_tenfold_at_decay_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(2, 2);
    let mut cfg = tiny_run(dir.path());
    cfg.optim.decay_epoch = Some(2);
    cfg.epochs = 4;
    let mut t = Trainer::new(cfg, data.len()).unwrap();
    t.run(&data).unwrap();
    let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 8);
    for (epoch, lr) in &rows {
        let expected = if *epoch >= 2 { 1e-5 } else { 1e-4 };
        assert_eq!(*lr, expected);
    }
    assert_eq!(rows[3].1 / rows[4].1, 10.0);
    assert!(dir.path().join("checkpoint.mvpc").exists());
}

#[test]
fn epoch_shuffle_is_a_seeded_permutation() {
    let a = epoch_order(3, 0, 10);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(3, 0, 10));
    assert_ne!(a, epoch_order(3, 1, 10));
    assert_ne!(a, epoch_order(4, 0, 10));
}

#[test]
fn run_config_round_trip_and_strictness() {
    let cfg = RunConfig {
        eval_data: Some("eval.mvpd".into()),
        max_steps: Some(17),
        ..RunConfig::default()
    };
    let text = cfg.to_json().unwrap();
    let back: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_json().unwrap(), text);

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["optim"]["learning_rate"] = serde_json::json!(0.1);
    assert!(serde_json::from_value::<RunConfig>(v).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["model"]["kernel"] = serde_json::json!(3);
    assert!(serde_json::from_value::<RunConfig>(v).is_err());

    let bad = RunConfig {
        confidence_threshold: 1.5,
        ..RunConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn dataset_mismatch_is_a_typed_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(3, 2);
    let mut cfg = tiny_run(dir.path());
    cfg.model.views = 4;
    assert!(matches!(cfg.check_dataset(&data), Err(Error::Config(_))));
    let mut cfg = tiny_run(dir.path());
    cfg.model.workspace.hi[2] = 2.5;
    assert!(matches!(cfg.check_dataset(&data), Err(Error::Config(_))));
    assert!(tiny_run(dir.path()).check_dataset(&data).is_ok());
}

#[test]
fn non_finite_step_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = scenes(4, 1);
    let f = &mut data[0].features[1];
    let mut poisoned = f.data().to_vec();
    poisoned[7] = f64::NAN;
    *f = Array::new(f.shape(), poisoned).unwrap();
    let mut t = Trainer::new(tiny_run(dir.path()), 1).unwrap();
    let err = t.step(&data).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let dump = fs::read_to_string(dir.path().join("failure_step0.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&dump).unwrap();
    assert_eq!(v["scene_index"], 0);
    assert!(v["error"].as_str().unwrap().contains("non-finite"));
    assert_eq!(t.step_count(), 0);
}

#[test]
fn evaluation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(5, 3);
    let run = || {
        let mut cfg = tiny_run(dir.path());
        cfg.max_steps = Some(6);
        let mut t = Trainer::new(cfg.clone(), data.len()).unwrap();
        while !t.finished() {
            t.step(&data).unwrap();
        }
        evaluate_model(&t.model, &data, &cfg.thresholds, cfg.confidence_threshold)
            .unwrap()
            .csv()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.starts_with("metric,threshold,value\nap,25,"));
    assert!(a.contains("\nlayer2_mpjpe,,"));
}

#[test]
fn ablation_grid_rows_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(6, 2);
    let base = tiny_run(dir.path());
    let grid = Grid {
        pos_encodings: vec![PosEncoding::Rays, PosEncoding::None],
        query_modes: vec![QueryMode::HierarchicalAdaptive],
        points: vec![2],
        layers: vec![2],
    };
    let results = run_ablation(&base, &grid, &data, 3, Budget::default()).unwrap();
    let csv = ablation_csv(&results);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    let cols = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == cols));
    assert!(lines[1].starts_with("rays,hierarchical_adaptive,2,2,3,"));
    assert!(lines[2].starts_with("none,hierarchical_adaptive,2,2,3,"));

    // the same cell twice with the same seed gives the same row
    let twice = Grid {
        pos_encodings: vec![PosEncoding::Rays, PosEncoding::Rays],
        ..grid.clone()
    };
    let r = run_ablation(&base, &twice, &data, 3, Budget::default()).unwrap();
    let csv = ablation_csv(&r);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows[0], rows[1]);
    assert_eq!(rows[0], lines[1]);

    let tight = Budget {
        max_cells: 1,
        ..Budget::default()
    };
    assert!(matches!(run_ablation(&base, &grid, &data, 3, tight), Err(Error::Config(_))));
    let few_steps = Budget {
        max_total_steps: 5,
        ..Budget::default()
    };
    assert!(matches!(run_ablation(&base, &grid, &data, 3, few_steps), Err(Error::Config(_))));
}
