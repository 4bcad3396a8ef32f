//! Finite-difference verification of every trainable parameter of a tiny reference model.

use std::time::{Duration, Instant};

use mvp_core::autodiff::check::block_rel_error;
use mvp_core::autodiff::Array;
use mvp_core::camgeom::{CameraParams, Vec3};
use mvp_core::model::{Model, ModelConfig};
use mvp_core::scenegen::Scene;
use mvp_core::setmatch::{Assignment, LossConfig};
use mvp_core::workspace::Workspace;
use mvp_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::train::scene_loss;

/// Gradients whose block magnitude falls below this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Backward rule to corrupt, and the factor applied to its gradients (negative control).
    pub fault: Option<(String, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub numel: usize,
    /// `max |analytic - numeric| / max(max |numeric|, max |analytic|, floor)` over the block.
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&BlockError> {
        self.blocks.iter().filter(|b| !(b.error < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// The reference configuration: V=2, N=2, J=4, C=8, L=2, K=2 on 8x8 features, with
/// gradients flowing through the projected anchors so that every path is exercised.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        persons: 2,
        joints: 4,
        in_channels: 4,
        channels: 8,
        views: 2,
        layers: 2,
        points: 2,
        heads: 2,
        ffn_width: Some(16),
        differentiable_anchors: true,
        ..ModelConfig::default()
    }
}

/// Two 32x32 cameras (feature stride 4), one or two persons, random positive features.
pub fn tiny_scene(seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let workspace = Workspace::default();
    let target = Vec3::new(0.0, 0.0, 1.0);
    let cameras = [(5.0, 0.5), (-1.0, 5.0)]
        .iter()
        .map(|&(x, y)| CameraParams::look_at(Vec3::new(x, y, 2.2), target, 26.0, 32, 32))
        .collect::<Result<Vec<_>>>()?;
    let persons = rng.random_range(1..=2);
    let gt: Vec<f64> = (0..persons * 4)
        .flat_map(|_| {
            [
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(0.3..1.7),
            ]
        })
        .collect();
    let features = (0..2)
        .map(|_| Array::new(&[4, 8, 8], (0..256).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene {
        gt_poses: Array::new(&[persons, 4, 3], gt)?,
        cameras,
        features,
        workspace,
    };
    scene.validate(0)?;
    Ok(scene)
}

/// Tiny model whose every parameter is random and nonzero, so no gradient path is idle.
pub fn tiny_model(seed: u64) -> Result<Model> {
    let mut model = Model::new(tiny_model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        // regression outputs stay small so positions never touch the workspace walls
        let scale = if name.contains("reg.w2") || name.contains("reg.b2") {
            0.02
        } else if name.contains("offset") {
            0.3
        } else {
            0.5
        };
        for v in model.params.get_mut(id).data_mut() {
            *v = if name.contains("gamma") {
                1.0 + rng.random_range(-0.2..0.2)
            } else {
                rng.random_range(-scale..scale)
            };
        }
    }
    Ok(model)
}

pub fn run_grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut model = tiny_model(config.seed)?;
    let scene = tiny_scene(config.seed)?;
    let loss_cfg = LossConfig::default();

    let mut sl = scene_loss(&model, &scene, &loss_cfg, None)?;
    let fixed: Vec<Assignment> = sl.assignments();
    if let Some((op, factor)) = &config.fault {
        sl.graph.inject_fault(op, *factor);
    }
    sl.graph.backward(sl.loss.loss)?;
    let analytic = sl.bindings.grads(&sl.graph);

    let h = config.step;
    let ids: Vec<_> = model.params.ids().collect();
    let mut blocks = Vec::with_capacity(ids.len());
    for (id, a) in ids.into_iter().zip(&analytic) {
        let mut numeric = Array::zeros(a.shape());
        for k in 0..a.len() {
            let orig = model.params.get(id).data()[k];
            model.params.get_mut(id).data_mut()[k] = orig + h;
            let fp = scene_loss(&model, &scene, &loss_cfg, Some(&fixed))?.value();
            model.params.get_mut(id).data_mut()[k] = orig - h;
            let fm = scene_loss(&model, &scene, &loss_cfg, Some(&fixed))?.value();
            model.params.get_mut(id).data_mut()[k] = orig;
            numeric.data_mut()[k] = (fp - fm) / (2.0 * h);
        }
        blocks.push(BlockError {
            name: model.params.name(id).to_string(),
            numel: a.len(),
            error: block_rel_error(a, &numeric, ERROR_FLOOR),
        });
    }
    Ok(GradCheckReport {
        blocks,
        tolerance: config.tolerance,
        elapsed: start.elapsed(),
    })
}
