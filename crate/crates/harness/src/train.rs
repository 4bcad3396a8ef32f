//! Training loop: seeded epoch shuffles, per-layer set loss, Adam, checkpoints and resume.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use mvp_core::autodiff::{Adam, AdamConfig, Array, Bindings, Graph};
use mvp_core::model::{Checkpoint, Dtype, ForwardOutput, Model, ModelInput};
use mvp_core::scenegen::{scene_seed, Scene};
use mvp_core::setmatch::{total_loss, Assignment, GroundTruth, LossContext, PredVars, TotalLoss};
use mvp_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Header of the append-only loss log.
pub const LOG_HEADER: &str = "step,epoch,loss,lr,wall_ms";

/// Per-layer predictions in the form the set loss consumes.
pub fn layer_predictions(out: &ForwardOutput) -> Vec<PredVars> {
    out.layers
        .iter()
        .map(|l| PredVars {
            poses: l.poses,
            confidences: l.confidences,
        })
        .collect()
}

/// A forward pass and its total loss over all decoder layers, on a fresh tape.
pub struct SceneLoss {
    pub graph: Graph,
    pub bindings: Bindings,
    pub output: ForwardOutput,
    pub loss: TotalLoss,
}

impl SceneLoss {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss.loss).item()
    }

    pub fn assignments(&self) -> Vec<Assignment> {
        self.loss.layers.iter().map(|l| l.assignment.clone()).collect()
    }
}

pub fn scene_loss(
    model: &Model,
    scene: &Scene,
    config: &mvp_core::setmatch::LossConfig,
    fixed: Option<&[Assignment]>,
) -> Result<SceneLoss> {
    let mut graph = Graph::new();
    let bindings = model.params.bind(&mut graph);
    let output = model.forward(&mut graph, &bindings, &ModelInput::from(scene))?;
    let gt = GroundTruth::from_array(&scene.gt_poses)?;
    let ctx = LossContext {
        cameras: &scene.cameras,
        workspace: &model.config.workspace,
        config,
    };
    let loss = total_loss(&mut graph, &layer_predictions(&output), &gt, &ctx, fixed)?;
    Ok(SceneLoss {
        graph,
        bindings,
        output,
        loss,
    })
}

/// Scene visiting order of one epoch; depends only on the seed and the epoch index.
pub fn epoch_order(seed: u64, epoch: usize, scenes: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(seed, epoch as u64)));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    /// Mean total loss over the scenes of the step.
    pub loss: f64,
    /// Mean loss of each decoder layer.
    pub layer_losses: Vec<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

impl StepReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.step, self.epoch, self.loss, self.lr, self.wall_ms
        )
    }
}

/// Where training stands; stored in checkpoints next to the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Progress {
    step: u64,
    epoch: usize,
    cursor: usize,
    scenes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    run: RunConfig,
    progress: Progress,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    adam: Adam,
    progress: Progress,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(config: RunConfig, scenes: usize) -> Result<Self> {
        config.validate()?;
        if scenes == 0 {
            return Err(Error::Config("cannot train on an empty dataset".into()));
        }
        let model = Model::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(adam_config(&config), &model.params);
        let order = epoch_order(config.seed, 0, scenes);
        Ok(Self {
            config,
            model,
            adam,
            progress: Progress {
                step: 0,
                epoch: 0,
                cursor: 0,
                scenes,
            },
            order,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.progress.step
    }

    pub fn epoch(&self) -> usize {
        self.progress.epoch
    }

    pub fn lr(&self) -> f64 {
        self.config.optim.lr_at(self.progress.epoch)
    }

    pub fn finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
            || self.config.max_steps.is_some_and(|m| self.progress.step >= m)
    }

    fn next_scene(&mut self) -> usize {
        if self.progress.cursor == self.order.len() {
            self.progress.epoch += 1;
            self.progress.cursor = 0;
            self.order = epoch_order(self.config.seed, self.progress.epoch, self.progress.scenes);
        }
        let s = self.order[self.progress.cursor];
        self.progress.cursor += 1;
        s
    }

    /// One optimizer step over `batch_size` scenes. On a non-finite value a diagnostic
    /// dump of the offending step is written to the output directory.
    pub fn step(&mut self, scenes: &[Scene]) -> Result<StepReport> {
        if scenes.len() != self.progress.scenes {
            return Err(Error::Config(format!(
                "trainer was set up for {} scenes, got {}",
                self.progress.scenes,
                scenes.len()
            )));
        }
        let start = Instant::now();
        let batch = self.config.batch_size;
        let mut grads: Option<Vec<Array>> = None;
        let mut loss = 0.0;
        let mut layer_losses = vec![0.0; self.config.model.layers];
        let mut epoch = self.progress.epoch;
        for b in 0..batch {
            let idx = self.next_scene();
            if b == 0 {
                epoch = self.progress.epoch;
            }
            let mut sl = match scene_loss(&self.model, &scenes[idx], &self.config.loss, None) {
                Ok(sl) => sl,
                Err(e) => return Err(self.dump_failure(idx, &scenes[idx], e)),
            };
            let value = sl.value();
            if let Err(e) = sl.graph.backward(sl.loss.loss) {
                return Err(self.dump_failure(idx, &scenes[idx], e));
            }
            loss += value / batch as f64;
            for (acc, l) in layer_losses.iter_mut().zip(&sl.loss.layers) {
                *acc += sl.graph.value(l.loss).item() / batch as f64;
            }
            let g = sl.bindings.grads(&sl.graph);
            grads = Some(match grads {
                None => g,
                Some(mut acc) => {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(x.data()).for_each(|(a, x)| *a += x);
                    }
                    acc
                }
            });
        }
        let mut grads = grads.expect("batch size is positive");
        if batch > 1 {
            let inv = 1.0 / batch as f64;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        }
        let lr = self.config.optim.lr_at(epoch);
        self.adam.step_with_lr(&mut self.model.params, &grads, lr)?;
        self.progress.step += 1;
        // an exhausted epoch counts as finished as soon as its last step is taken
        if self.progress.cursor == self.order.len() {
            self.progress.epoch += 1;
            self.progress.cursor = 0;
            self.order = epoch_order(self.config.seed, self.progress.epoch, self.progress.scenes);
        }
        Ok(StepReport {
            step: self.progress.step,
            epoch,
            loss,
            layer_losses,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn dump_failure(&self, index: usize, scene: &Scene, err: Error) -> Error {
        let dump = serde_json::json!({
            "error": err.to_string(),
            "step": self.progress.step,
            "epoch": self.progress.epoch,
            "scene_index": index,
            "gt_poses": scene.gt_poses.data(),
            "gt_shape": scene.gt_poses.shape(),
            "cameras": scene.cameras.iter().map(|c| serde_json::json!({
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "rotation": c.rotation.transpose().as_slice(),
                "translation": c.translation.as_slice(),
                "width": c.width, "height": c.height,
            })).collect::<Vec<_>>(),
            "feature_max": scene.features.iter().map(|f| f.max_abs()).collect::<Vec<_>>(),
            "param_max_abs": self.model.params.iter().map(|(n, a)| (n.to_string(), a.max_abs())).collect::<Vec<_>>(),
        });
        let path = self.config.out_dir.join(format!("failure_step{}.json", self.progress.step));
        match fs::create_dir_all(&self.config.out_dir)
            .and_then(|_| fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default()))
        {
            Ok(()) => warn!("training step failed; diagnostics written to {}", path.display()),
            Err(e) => warn!("training step failed and the diagnostic dump could not be written: {e}"),
        }
        err
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            run: self.config.clone(),
            progress: self.progress.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        let (m, v) = self.adam.moments();
        for (name, a) in self.model.params.iter() {
            ck.push(format!("model.{name}"), Dtype::F64, a.clone());
        }
        for ((name, _), (m, v)) in self.model.params.iter().zip(m.iter().zip(v)) {
            ck.push(format!("adam.m.{name}"), Dtype::F64, m.clone());
            ck.push(format!("adam.v.{name}"), Dtype::F64, v.clone());
        }
        ck.push("adam.step", Dtype::F64, Array::scalar(self.adam.steps_taken() as f64));
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(dir) = path.as_ref().parent() {
            fs::create_dir_all(dir)?;
        }
        self.checkpoint()?.write(path)
    }

    /// Restores model, optimizer and position in the epoch schedule.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())?;
        let config = meta.run;
        config.validate()?;
        let model = Model::from_tensors(config.model.clone(), ck.with_prefix("model."))?;
        let mut adam = Adam::new(adam_config(&config), &model.params);
        let fetch = |prefix: &str| -> Result<Vec<Array>> {
            model
                .params
                .iter()
                .map(|(name, _)| {
                    ck.get(&format!("{prefix}{name}"))
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer tensor {prefix}{name}")))
                })
                .collect()
        };
        let step = ck
            .get("adam.step")
            .map(Array::item)
            .ok_or_else(|| Error::Format("checkpoint lacks adam.step".into()))?;
        adam.restore(step as u64, fetch("adam.m.")?, fetch("adam.v.")?)?;
        let p = meta.progress;
        if p.scenes == 0 || p.cursor > p.scenes {
            return Err(Error::Format("checkpoint progress is inconsistent".into()));
        }
        let order = epoch_order(config.seed, p.epoch, p.scenes);
        Ok(Self {
            config,
            model,
            adam,
            progress: p,
            order,
        })
    }

    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Trains until finished, appending to `out_dir/train_log.csv` and writing
    /// `out_dir/checkpoint.mvpc` periodically and at the end.
    pub fn run(&mut self, scenes: &[Scene]) -> Result<()> {
        fs::create_dir_all(&self.config.out_dir)?;
        let log_path = self.config.out_dir.join("train_log.csv");
        let fresh = !log_path.exists() || fs::metadata(&log_path)?.len() == 0;
        let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        if fresh {
            writeln!(log, "{LOG_HEADER}")?;
        }
        let ck_path = self.config.out_dir.join("checkpoint.mvpc");
        while !self.finished() {
            let r = self.step(scenes)?;
            writeln!(log, "{}", r.csv_line())?;
            if r.step % 100 == 0 {
                info!("step {} epoch {} loss {:.5} lr {:e}", r.step, r.epoch, r.loss, r.lr);
            }
            let every = self.config.checkpoint_every;
            if every > 0 && r.step % every == 0 {
                self.save(&ck_path)?;
            }
        }
        log.flush()?;
        self.save(&ck_path)
    }
}

fn adam_config(config: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: config.optim.lr,
        beta1: config.optim.beta1,
        beta2: config.optim.beta2,
        eps: config.optim.eps,
    }
}
