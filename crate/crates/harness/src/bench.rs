//! Inference timing: the forward cost depends on the configured query count only, not on
//! how many people a scene contains.

use std::time::Instant;

use mvp_core::model::{Model, ModelInput};
use mvp_core::scenegen::{generate_scene, scene_seed, Scene, SceneConfig};
use mvp_core::{Error, Result};

/// First scene along the seed stream with exactly `persons` people.
pub fn scene_with_persons(base_seed: u64, persons: usize, config: &SceneConfig) -> Result<Scene> {
    for i in 0..10_000 {
        if let Ok(s) = generate_scene(scene_seed(base_seed, i), config) {
            if s.persons() == persons {
                return Ok(s);
            }
        }
    }
    Err(Error::Generation(format!("no scene with {persons} persons in 10000 seeds")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    /// Median forward time (ms) per scene, in input order.
    pub median_ms: Vec<f64>,
    pub repeats: usize,
}

impl TimingReport {
    /// Slowest over fastest median.
    pub fn ratio(&self) -> f64 {
        let max = self.median_ms.iter().copied().fold(f64::MIN, f64::max);
        let min = self.median_ms.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repeats` forward passes per scene, interleaving the scenes so that drift in
/// machine load affects all of them alike. One untimed warm-up pass per scene.
pub fn time_forward(model: &Model, scenes: &[&Scene], repeats: usize) -> Result<TimingReport> {
    if scenes.is_empty() || repeats == 0 {
        return Err(Error::Usage("timing needs at least one scene and one repeat".into()));
    }
    for s in scenes {
        model.predict(&ModelInput::from(*s))?;
    }
    let mut samples = vec![Vec::with_capacity(repeats); scenes.len()];
    for _ in 0..repeats {
        for (i, s) in scenes.iter().enumerate() {
            let t = Instant::now();
            let out = model.predict(&ModelInput::from(*s))?;
            samples[i].push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
    }
    Ok(TimingReport {
        median_ms: samples.into_iter().map(median).collect(),
        repeats,
    })
}
