//! Pose metrics: MPJPE, AP / Recall at MPJPE thresholds, and PCP.
//!
//! Detection protocol: predictions of the whole dataset are ranked by descending
//! confidence; each one is matched to the nearest (by MPJPE) still-unmatched ground-truth
//! person of its own scene and counts as a true positive when that distance is below the
//! threshold. AP is the area under the precision/recall curve with all-point
//! interpolation (precision replaced by its running maximum from the right).

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::setmatch::{GroundTruth, PoseSet};

/// Mean per-joint Euclidean distance of two flat `J * 3` poses in meters, returned in
/// millimeters.
pub fn mpjpe(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() || !pred.len().is_multiple_of(3) {
        return Err(shape_err!(
            "mpjpe needs two poses of equal J * 3 length, got {} and {}",
            pred.len(),
            gt.len()
        ));
    }
    let total: f64 = pred
        .chunks(3)
        .zip(gt.chunks(3))
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .sum();
    Ok(1000.0 * total / (pred.len() / 3) as f64)
}

/// Predictions and ground truth of one scene.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub scene: usize,
    /// Flat `J * 3` poses (meters) with their confidences.
    pub preds: Vec<(Vec<f64>, f64)>,
    pub gt: GroundTruth,
}

impl EvalRecord {
    /// Keeps only predictions with confidence at least `threshold`.
    pub fn filtered(scene: usize, pred: &PoseSet, gt: GroundTruth, threshold: f64) -> Self {
        let preds = (0..pred.len())
            .filter(|&n| pred.confidences[n] >= threshold)
            .map(|n| (pred.pose(n).to_vec(), pred.confidences[n]))
            .collect();
        Self { scene, preds, gt }
    }
}

/// One greedy match between a prediction and a ground-truth person.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub record: usize,
    pub pred: usize,
    pub confidence: f64,
    /// Matched ground-truth person and its MPJPE (mm), if it was a true positive.
    pub hit: Option<(usize, f64)>,
}

/// Greedy confidence-ordered matching at `threshold_mm`.
pub fn greedy_match(records: &[EvalRecord], threshold_mm: f64) -> Result<Vec<Detection>> {
    let mut order: Vec<(usize, usize, f64)> = records
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| rec.preds.iter().enumerate().map(move |(k, p)| (r, k, p.1)))
        .collect();
    // stable sort keeps dataset order among equal confidences
    order.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut taken: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.gt.persons()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for (r, k, confidence) in order {
        let rec = &records[r];
        let mut best: Option<(usize, f64)> = None;
        for n in 0..rec.gt.persons() {
            if taken[r][n] {
                continue;
            }
            let e = mpjpe(&rec.preds[k].0, rec.gt.pose(n))?;
            if best.is_none_or(|(_, b)| e < b) {
                best = Some((n, e));
            }
        }
        let hit = best.filter(|&(_, e)| e < threshold_mm);
        if let Some((n, _)) = hit {
            taken[r][n] = true;
        }
        out.push(Detection {
            record: r,
            pred: k,
            confidence,
            hit,
        });
    }
    Ok(out)
}

fn total_gt(records: &[EvalRecord]) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::Undefined("no scenes to evaluate".into()));
    }
    let n: usize = records.iter().map(|r| r.gt.persons()).sum();
    if n == 0 {
        return Err(Error::Undefined("no ground-truth persons to evaluate".into()));
    }
    Ok(n)
}

/// `(AP, Recall)` at `threshold_mm`.
pub fn ap_recall(records: &[EvalRecord], threshold_mm: f64) -> Result<(f64, f64)> {
    let n_gt = total_gt(records)? as f64;
    let dets = greedy_match(records, threshold_mm)?;
    let mut tp = 0.0;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        if d.hit.is_some() {
            tp += 1.0;
        }
        recall.push(tp / n_gt);
        precision.push(tp / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Ok((ap, tp / n_gt))
}

/// Mean MPJPE (mm) of the true positives at `threshold_mm`; `None` without any.
pub fn matched_mpjpe(records: &[EvalRecord], threshold_mm: f64) -> Result<Option<f64>> {
    total_gt(records)?;
    let errs: Vec<f64> = greedy_match(records, threshold_mm)?
        .iter()
        .filter_map(|d| d.hit.map(|(_, e)| e))
        .collect();
    Ok((!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64))
}

/// Fraction of correct limbs.
///
/// Each ground-truth person is compared with the prediction whose root joint is closest
/// to its root. A limb is correct when the mean of its two endpoint errors is at most half
/// the ground-truth limb length. Zero-length ground-truth limbs are skipped.
pub fn pcp(pred: &PoseSet, gt: &GroundTruth, limbs: &[(usize, usize)], root: usize) -> Result<f64> {
    let dist = |a: &[f64], b: &[f64]| {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    let at = |pose: &[f64], j: usize| [pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]];
    let mut correct = 0usize;
    let mut counted = 0usize;
    for n in 0..gt.persons() {
        let g = gt.pose(n);
        let best = (0..pred.len()).min_by(|&a, &b| {
            dist(&at(pred.pose(a), root), &at(g, root))
                .total_cmp(&dist(&at(pred.pose(b), root), &at(g, root)))
        });
        for &(a, b) in limbs {
            let len = dist(&at(g, a), &at(g, b));
            if len == 0.0 {
                log::warn!("person {n}: limb ({a}, {b}) has zero length, skipped");
                continue;
            }
            counted += 1;
            if let Some(k) = best {
                let p = pred.pose(k);
                let err = 0.5 * (dist(&at(p, a), &at(g, a)) + dist(&at(p, b), &at(g, b)));
                if err <= 0.5 * len {
                    correct += 1;
                }
            }
        }
    }
    if counted == 0 {
        return Err(Error::Undefined("no limbs to score".into()));
    }
    Ok(correct as f64 / counted as f64)
}

/// One row of a metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub threshold: Option<f64>,
    /// `None` is written as `n/a`.
    pub value: Option<f64>,
}

impl MetricRow {
    pub fn new(metric: &str, threshold: Option<f64>, value: Option<f64>) -> Self {
        Self {
            metric: metric.to_string(),
            threshold,
            value,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x}"))
}

/// `metric,threshold,value` CSV text.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,threshold,value\n");
    for r in rows {
        let t = r.threshold.map_or_else(String::new, |t| format!("{t}"));
        s.push_str(&format!("{},{},{}\n", r.metric, t, fmt_opt(r.value)));
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Standard report: AP and Recall per threshold, then MPJPE of matches at the largest
/// threshold. With no predictions AP and Recall are 0 and MPJPE is `n/a`.
pub fn evaluate(records: &[EvalRecord], thresholds_mm: &[f64]) -> Result<Vec<MetricRow>> {
    if thresholds_mm.is_empty() {
        return Err(Error::Input("at least one threshold is required".into()));
    }
    let mut rows = Vec::new();
    for &t in thresholds_mm {
        let (ap, _) = ap_recall(records, t)?;
        rows.push(MetricRow::new("ap", Some(t), Some(ap)));
    }
    for &t in thresholds_mm {
        let (_, recall) = ap_recall(records, t)?;
        rows.push(MetricRow::new("recall", Some(t), Some(recall)));
    }
    let largest = thresholds_mm.iter().copied().fold(f64::MIN, f64::max);
    rows.push(MetricRow::new(
        "mpjpe",
        Some(largest),
        matched_mpjpe(records, largest)?,
    ));
    Ok(rows)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    scene: usize,
    confidences: &'a [f64],
    /// `[N][J][3]`, meters.
    poses: Vec<Vec<[f64; 3]>>,
    gt: Vec<Vec<[f64; 3]>>,
}

fn nested(flat: &[f64], persons: usize, joints: usize) -> Vec<Vec<[f64; 3]>> {
    (0..persons)
        .map(|n| {
            (0..joints)
                .map(|j| {
                    let o = (n * joints + j) * 3;
                    [flat[o], flat[o + 1], flat[o + 2]]
                })
                .collect()
        })
        .collect()
}

/// One JSON object per scene with its predictions and ground truth.
pub fn write_predictions_jsonl(records: &[EvalRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        let j = r.gt.joints();
        let flat: Vec<f64> = r.preds.iter().flat_map(|p| p.0.clone()).collect();
        let confidences: Vec<f64> = r.preds.iter().map(|p| p.1).collect();
        let gt_flat: Vec<f64> = (0..r.gt.persons()).flat_map(|n| r.gt.pose(n).to_vec()).collect();
        let line = PredictionLine {
            scene: r.scene,
            confidences: &confidences,
            poses: nested(&flat, r.preds.len(), j),
            gt: nested(&gt_flat, r.gt.persons(), r.gt.joints()),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
