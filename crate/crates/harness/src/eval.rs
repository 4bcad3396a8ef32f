//! Inference over a dataset, metric tables and prediction dumps.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use mvp_core::autodiff::Array;
use mvp_core::metrics::{evaluate, metrics_csv, mpjpe, write_predictions_jsonl, EvalRecord, MetricRow};
use mvp_core::model::{Model, ModelInput};
use mvp_core::scenegen::Scene;
use mvp_core::setmatch::{match_poses, GroundTruth, PoseSet};
use mvp_core::Result;
use rayon::prelude::*;

/// Per-layer outputs of one scene: poses `[L, N, J, 3]` and person confidences `[L, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrediction {
    pub poses: Array,
    pub confidences: Array,
}

impl ScenePrediction {
    pub fn layers(&self) -> usize {
        self.poses.shape()[0]
    }

    pub fn layer(&self, l: usize) -> Result<PoseSet> {
        let s = self.poses.shape();
        let per = s[1] * s[2] * 3;
        PoseSet::new(
            Array::new(&s[1..], self.poses.data()[l * per..(l + 1) * per].to_vec())?,
            self.confidences.data()[l * s[1]..(l + 1) * s[1]].to_vec(),
        )
    }

    pub fn last(&self) -> Result<PoseSet> {
        self.layer(self.layers() - 1)
    }
}

/// Runs the model on every scene, in parallel, returning results in dataset order.
pub fn predict_all(model: &Model, scenes: &[Scene]) -> Result<Vec<ScenePrediction>> {
    scenes
        .par_iter()
        .map(|s| {
            let (poses, confidences) = model.predict(&ModelInput::from(s))?;
            Ok(ScenePrediction { poses, confidences })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// AP and recall per threshold, then the MPJPE row (final layer).
    pub rows: Vec<MetricRow>,
    /// Final-layer predictions after confidence filtering.
    pub records: Vec<EvalRecord>,
    /// Per layer: mean MPJPE (mm) over all ground-truth persons of the set-matched
    /// prediction, independent of confidence filtering.
    pub layer_mpjpe: Vec<f64>,
}

impl EvalReport {
    pub fn metric(&self, metric: &str, threshold: Option<f64>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.threshold == threshold)
            .and_then(|r| r.value)
    }

    pub fn csv(&self) -> String {
        let mut s = metrics_csv(&self.rows);
        for (l, v) in self.layer_mpjpe.iter().enumerate() {
            s.push_str(&format!("layer{}_mpjpe,,{}\n", l + 1, v));
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.csv())?;
        write_predictions_jsonl(&self.records, BufWriter::new(File::create(dir.join("predictions.jsonl"))?))
    }
}

/// Per-layer mean MPJPE of set-matched predictions over all ground-truth persons.
pub fn layer_mpjpe(model: &Model, scenes: &[Scene], preds: &[ScenePrediction]) -> Result<Vec<f64>> {
    let layers = preds.first().map_or(0, ScenePrediction::layers);
    let mut sums = vec![0.0; layers];
    let mut count = 0usize;
    for (scene, pred) in scenes.iter().zip(preds) {
        let gt = GroundTruth::from_array(&scene.gt_poses)?;
        count += gt.persons();
        for (l, sum) in sums.iter_mut().enumerate() {
            let set = pred.layer(l)?;
            let a = match_poses(&gt, &set, &model.config.workspace)?;
            for (n, &k) in a.matched().iter().enumerate() {
                *sum += mpjpe(set.pose(k), gt.pose(n))?;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / count.max(1) as f64).collect())
}

pub fn evaluate_model(
    model: &Model,
    scenes: &[Scene],
    thresholds: &[f64],
    confidence_threshold: f64,
) -> Result<EvalReport> {
    let preds = predict_all(model, scenes)?;
    let records = scenes
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(i, (s, p))| {
            Ok(EvalRecord::filtered(
                i,
                &p.last()?,
                GroundTruth::from_array(&s.gt_poses)?,
                confidence_threshold,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = evaluate(&records, thresholds)?;
    let layer_mpjpe = layer_mpjpe(model, scenes, &preds)?;
    Ok(EvalReport {
        rows,
        records,
        layer_mpjpe,
    })
}
