use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mvp_core::model::ModelConfig;
use mvp_core::scenegen::{read_dataset, SceneConfig};
use mvp_harness::RunConfig;

fn mvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mvp")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small scene and run configurations that train in well under a second per step.
fn write_small_configs(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let scene = SceneConfig {
        views: 3,
        height: 16,
        width: 16,
        heatmap_sigma_px: 1.0,
        max_persons: 2,
        ..SceneConfig::default()
    };
    let run = RunConfig {
        model: ModelConfig {
            persons: 3,
            channels: 8,
            views: 3,
            layers: 2,
            points: 2,
            heads: 2,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    let scene_path = dir.join("scene.json");
    let run_path = dir.join("run.json");
    fs::write(&scene_path, serde_json::to_string_pretty(&scene).unwrap()).unwrap();
    fs::write(&run_path, run.to_json().unwrap()).unwrap();
    (scene_path, run_path)
}

#[test]
fn gen_data_is_reproducible_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mvpd");
    let b = dir.path().join("b.mvpd");
    for p in [&a, &b] {
        let o = mvp(&["gen-data", "--out", s(p), "--scenes", "100", "--seed", "7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let scenes = read_dataset(&a).unwrap();
    assert_eq!(scenes.len(), 100);
    assert!(scenes.iter().all(|sc| sc.cameras.len() == 5 && sc.features.len() == 5));

    let c = dir.path().join("c.mvpd");
    let o = mvp(&["gen-data", "--out", s(&c), "--scenes", "100", "--seed", "8"]);
    assert!(o.status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn invalid_arguments_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.mvpd");
    let o = mvp(&["gen-data", "--out", s(&out), "--views", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("view"));
    assert!(!out.exists());

    assert_eq!(mvp(&["gen-data"]).status.code(), Some(2));
    assert_eq!(mvp(&["no-such-command"]).status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json().unwrap()).unwrap();
    v["learning_rate"] = serde_json::json!(1e-3);
    fs::write(&cfg, v.to_string()).unwrap();
    let o = mvp(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn grad_check_passes_and_catches_faults() {
    let o = mvp(&["grad-check"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("seed 0: PASS"));

    let o = mvp(&["grad-check", "--seed", "1,2"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("seed 1: PASS") && text.contains("seed 2: PASS"));

    // a wrong convolution backward shows up in the encoder blocks
    let o = mvp(&["grad-check", "--inject-fault", "conv2d"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let fail = text.lines().find(|l| l.starts_with("seed 0: FAIL in")).expect("failure line");
    assert!(fail.contains("stem.w") && fail.contains("rayconv.w"), "{fail}");

    let o = mvp(&["grad-check", "--inject-fault", "layer_norm:1.01"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("norm1.gamma"));

    let o = mvp(&["grad-check", "--inject-fault", "matmul:abc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (scene_cfg, run_cfg) = write_small_configs(dir.path());
    let data = dir.path().join("data.mvpd");
    let o = mvp(&["gen-data", "--config", s(&scene_cfg), "--out", s(&data), "--scenes", "4", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let run_dir = dir.path().join("run");
    let o = mvp(&[
        "train", "--config", s(&run_cfg), "--data", s(&data), "--out", s(&run_dir), "--steps", "6", "--lr", "1e-3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run_dir.join("checkpoint.mvpc");
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    let stored: RunConfig =
        serde_json::from_str(&fs::read_to_string(run_dir.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(stored.optim.lr, 1e-3);
    assert_eq!(stored.max_steps, Some(6));

    // resuming extends the same log
    let o = mvp(&["train", "--resume", s(&ckpt), "--steps", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6", "7", "8"]);

    let eval_dir = dir.path().join("eval");
    let o = mvp(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "metric,threshold,value");
    for (i, t) in ["25", "50", "100", "150"].iter().enumerate() {
        assert!(rows[1 + i].starts_with(&format!("ap,{t},")), "{}", rows[1 + i]);
        assert!(rows[5 + i].starts_with(&format!("recall,{t},")), "{}", rows[5 + i]);
    }
    assert!(rows[9].starts_with("mpjpe,150,"));
    assert_eq!(rows[10].split(',').next(), Some("layer1_mpjpe"));
    let preds = fs::read_to_string(eval_dir.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);
    for line in preds.lines() {
        let _: serde_json::Value = serde_json::from_str(line).unwrap();
    }
    assert_eq!(stdout(&o), csv);

    // a threshold no sigmoid reaches leaves nothing to match
    let empty_dir = dir.path().join("empty");
    let o = mvp(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&empty_dir), "--confidence", "1.0",
        "--thresholds", "100",
    ]);
    assert!(o.status.success());
    let csv = fs::read_to_string(empty_dir.join("metrics.csv")).unwrap();
    assert!(csv.contains("ap,100,0\n"), "{csv}");
    assert!(csv.contains("recall,100,0\n"), "{csv}");
    assert!(csv.contains("mpjpe,100,n/a\n"), "{csv}");

    let jsonl = dir.path().join("infer.jsonl");
    let o = mvp(&["infer", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&jsonl), "--confidence", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&jsonl).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for (i, v) in lines.iter().enumerate() {
        assert_eq!(v["scene"], i);
        let poses = v["poses"].as_array().unwrap();
        assert_eq!(poses.len(), 3);
        assert_eq!(v["confidences"].as_array().unwrap().len(), 3);
        assert_eq!(poses[0].as_array().unwrap().len(), 5);
        assert_eq!(poses[0][0].as_array().unwrap().len(), 3);
    }

    // data that does not fit the model is a configuration error
    let wide = dir.path().join("wide.mvpd");
    assert!(mvp(&["gen-data", "--out", s(&wide), "--scenes", "1"]).status.success());
    let o = mvp(&["eval", "--checkpoint", s(&ckpt), "--data", s(&wide), "--out", s(&eval_dir)]);
    assert_eq!(o.status.code(), Some(2));

    // a flipped byte is caught by the checksum
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let broken = dir.path().join("broken.mvpc");
    fs::write(&broken, bytes).unwrap();
    let o = mvp(&["eval", "--checkpoint", s(&broken), "--data", s(&data), "--out", s(&eval_dir)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn bench_reports_a_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run_cfg) = write_small_configs(dir.path());
    let o = mvp(&["bench", "--config", s(&run_cfg), "--max-persons", "3", "--repeats", "5", "--max-ratio", "1000"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ratio"));
    let o = mvp(&["bench", "--config", s(&run_cfg), "--max-persons", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let (scene_cfg, run_cfg) = write_small_configs(dir.path());
    let data = dir.path().join("data.mvpd");
    assert!(mvp(&["gen-data", "--config", s(&scene_cfg), "--out", s(&data), "--scenes", "2"]).status.success());
    let out = dir.path().join("ablation.csv");
    let o = mvp(&[
        "ablate", "--config", s(&run_cfg), "--data", s(&data), "--out", s(&out), "--steps", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("rays >= none:")).count(), 2);
    assert_eq!(text.lines().filter(|l| l.starts_with("hierarchical_adaptive >= per_joint:")).count(), 2);

    let o = mvp(&[
        "ablate", "--config", s(&run_cfg), "--data", s(&data), "--out", s(&out), "--steps", "2", "--max-cells", "3",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
