//! The `mvp` command line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mvp_core::model::{Checkpoint, Model, PosEncoding, QueryMode};
use mvp_core::scenegen::{generate_scenes, read_dataset, write_dataset, SceneConfig};
use mvp_core::{Error, Result};
use serde::de::DeserializeOwned;

use crate::ablate::{ablation_csv, directional_summary, run_ablation, Budget, Grid};
use crate::bench::{scene_with_persons, time_forward};
use crate::config::RunConfig;
use crate::eval::{evaluate_model, predict_all};
use crate::gradcheck::{run_grad_check, GradCheckConfig};
use crate::train::Trainer;

/// Exit status for a failed check or runtime error.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for invalid arguments or configuration.
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mvp", version, about = "Multi-view 3D pose regression: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a model, or resume training from a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset: metrics CSV and JSONL predictions.
    Eval(EvalArgs),
    /// Write final-layer predictions of a checkpoint as JSONL.
    Infer(InferArgs),
    /// Finite-difference check of every parameter gradient of the tiny reference model.
    GradCheck(GradCheckArgs),
    /// Train and evaluate a grid of configurations; write a comparison CSV.
    Ablate(AblateArgs),
    /// Compare forward times on scenes with one and with many people.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub max_persons: Option<usize>,
    #[arg(long)]
    pub joints: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian feature noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Expected spurious peaks per heatmap channel.
    #[arg(long)]
    pub distractors: Option<f64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Full scene configuration as JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a training checkpoint; its stored configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated MPJPE thresholds in mm.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seed: Vec<u64>,
    /// Corrupt a backward rule, as `op` or `op:factor` (default factor 1.5).
    #[arg(long)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, value_delimiter = ',', default_value = "rays,none", value_parser = parse_enum::<PosEncoding>)]
    pub pos_encodings: Vec<PosEncoding>,
    #[arg(long, value_delimiter = ',', default_value = "hierarchical_adaptive,per_joint", value_parser = parse_enum::<QueryMode>)]
    pub query_modes: Vec<QueryMode>,
    #[arg(long, value_delimiter = ',')]
    pub points: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub max_cells: Option<usize>,
    #[arg(long)]
    pub max_total_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub max_persons: usize,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fail when the slow/fast ratio reaches this value.
    #[arg(long, default_value_t = 1.2)]
    pub max_ratio: f64,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench(a),
    }
}

fn load_json<T: DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let mut cfg: SceneConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => SceneConfig::default(),
    };
    if let Some(v) = a.views {
        cfg.views = v;
    }
    if let Some(v) = a.max_persons {
        cfg.max_persons = v;
    }
    if let Some(v) = a.joints {
        cfg.joints = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_std = v;
    }
    if let Some(v) = a.distractors {
        cfg.distractor_rate = v;
    }
    if let Some(v) = a.height {
        cfg.height = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    cfg.validate()?;
    let scenes = generate_scenes(a.seed, a.scenes, &cfg)?;
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    write_dataset(&scenes, &a.out)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(0)
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut trainer = if let Some(path) = &a.resume {
        let mut t = Trainer::resume(path)?;
        if let Some(v) = a.epochs {
            t.config.epochs = v;
        }
        if let Some(v) = a.steps {
            t.config.max_steps = Some(v);
        }
        if let Some(v) = &a.out {
            t.config.out_dir = v.clone();
        }
        if let Some(v) = &a.data {
            t.config.train_data = v.clone();
        }
        t
    } else {
        let mut cfg = match &a.config {
            Some(p) => load_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &a.data {
            cfg.train_data = v.clone();
        }
        if let Some(v) = &a.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = a.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = a.steps {
            cfg.max_steps = Some(v);
        }
        if let Some(v) = a.lr {
            cfg.optim.lr = v;
        }
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = a.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        cfg.validate()?;
        let scenes = read_dataset(&cfg.train_data)?;
        Trainer::new(cfg, scenes.len())?
    };
    let scenes = read_dataset(&trainer.config.train_data)?;
    trainer.config.check_dataset(&scenes)?;
    fs::create_dir_all(&trainer.config.out_dir)?;
    fs::write(trainer.config.out_dir.join("run_config.json"), trainer.config.to_json()?)?;
    trainer.run(&scenes)?;
    println!(
        "trained {} steps ({} epochs); checkpoint in {}",
        trainer.step_count(),
        trainer.epoch(),
        trainer.config.out_dir.join("checkpoint.mvpc").display()
    );
    Ok(0)
}

/// Model and run configuration stored in a training checkpoint.
pub fn load_model(path: &PathBuf) -> Result<(Model, RunConfig)> {
    let ck = Checkpoint::read(path)?;
    let run: RunConfig = serde_json::from_value(
        ck.meta
            .get("run")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no run configuration".into()))?,
    )?;
    let model = Model::from_tensors(run.model.clone(), ck.with_prefix("model."))?;
    Ok((model, run))
}

fn eval(a: EvalArgs) -> Result<i32> {
    let (model, run) = load_model(&a.checkpoint)?;
    let scenes = read_dataset(&a.data)?;
    run.check_dataset(&scenes)?;
    let thresholds = a.thresholds.unwrap_or(run.thresholds);
    let confidence = a.confidence.unwrap_or(run.confidence_threshold);
    let report = evaluate_model(&model, &scenes, &thresholds, confidence)?;
    report.write(&a.out)?;
    print!("{}", report.csv());
    Ok(0)
}

fn infer(a: InferArgs) -> Result<i32> {
    let (model, run) = load_model(&a.checkpoint)?;
    let scenes = read_dataset(&a.data)?;
    let confidence = a.confidence.unwrap_or(run.confidence_threshold);
    let preds = predict_all(&model, &scenes)?;
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(fs::File::create(&a.out)?);
    for (i, p) in preds.iter().enumerate() {
        let last = p.last()?;
        let kept: Vec<usize> = (0..last.len()).filter(|&n| last.confidences[n] >= confidence).collect();
        let line = serde_json::json!({
            "scene": i,
            "poses": kept
                .iter()
                .map(|&n| last.pose(n).chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "confidences": kept.iter().map(|&n| last.confidences[n]).collect::<Vec<_>>(),
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    println!("wrote predictions for {} scenes to {}", preds.len(), a.out.display());
    Ok(0)
}

fn grad_check(a: GradCheckArgs) -> Result<i32> {
    let fault = match &a.inject_fault {
        None => None,
        Some(arg) => {
            let (op, factor) = match arg.split_once(':') {
                Some((op, f)) => (
                    op.to_string(),
                    f.parse::<f64>()
                        .map_err(|_| Error::Usage(format!("bad fault factor in `{arg}`")))?,
                ),
                None => (arg.clone(), 1.5),
            };
            Some((op, factor))
        }
    };
    let mut ok = true;
    for &seed in &a.seed {
        let report = run_grad_check(&GradCheckConfig {
            seed,
            fault: fault.clone(),
            ..GradCheckConfig::default()
        })?;
        println!("seed {seed}: {} parameter blocks, {:.1?}", report.blocks.len(), report.elapsed);
        for b in &report.blocks {
            let verdict = if b.error < report.tolerance { "ok" } else { "FAIL" };
            println!("  {:<32} {:>6}  max rel err {:.3e}  {verdict}", b.name, b.numel, b.error);
        }
        let failures = report.failures();
        if failures.is_empty() {
            println!("seed {seed}: PASS (max {:.3e} < {:e})", report.max_error(), report.tolerance);
        } else {
            ok = false;
            let names: Vec<&str> = failures.iter().map(|b| b.name.as_str()).collect();
            println!("seed {seed}: FAIL in {}", names.join(", "));
        }
    }
    Ok(if ok { 0 } else { EXIT_FAILURE })
}

fn ablate(a: AblateArgs) -> Result<i32> {
    let mut base: RunConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &a.data {
        base.train_data = d.clone();
    }
    base.validate()?;
    let grid = Grid {
        pos_encodings: a.pos_encodings,
        query_modes: a.query_modes,
        points: a.points.unwrap_or_else(|| vec![base.model.points]),
        layers: a.layers.unwrap_or_else(|| vec![base.model.layers]),
    };
    let defaults = Budget::default();
    let budget = Budget {
        max_cells: a.max_cells.unwrap_or(defaults.max_cells),
        max_total_steps: a.max_total_steps.unwrap_or(defaults.max_total_steps),
    };
    let scenes = read_dataset(&base.train_data)?;
    let results = run_ablation(&base, &grid, &scenes, a.steps, budget)?;
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    let csv = ablation_csv(&results);
    fs::write(&a.out, &csv)?;
    print!("{csv}");
    for line in directional_summary(&results) {
        println!("{line}");
    }
    Ok(0)
}

fn bench(a: BenchArgs) -> Result<i32> {
    let run: RunConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => RunConfig::default(),
    };
    if a.max_persons < 2 || a.max_persons > run.model.persons {
        return Err(Error::Usage(format!(
            "--max-persons must lie in 2..={}",
            run.model.persons
        )));
    }
    let scene_cfg = SceneConfig {
        views: run.model.views,
        joints: run.model.joints,
        max_persons: a.max_persons,
        workspace: run.model.workspace,
        ..SceneConfig::default()
    };
    scene_cfg.validate()?;
    let model = Model::new(run.model.clone(), run.seed)?;
    let one = scene_with_persons(a.seed, 1, &scene_cfg)?;
    let many = scene_with_persons(a.seed, a.max_persons, &scene_cfg)?;
    let report = time_forward(&model, &[&one, &many], a.repeats)?;
    println!(
        "forward median: 1 person {:.3} ms, {} persons {:.3} ms, ratio {:.3}",
        report.median_ms[0],
        a.max_persons,
        report.median_ms[1],
        report.ratio()
    );
    Ok(if report.ratio() < a.max_ratio { 0 } else { EXIT_FAILURE })
}
