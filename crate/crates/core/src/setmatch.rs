//! Grouped bipartite matching of predicted persons to ground truth, and the set loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Var};
use crate::camgeom::{project, project_points, CameraParams, Vec3};
use crate::error::{shape_err, Error, Result};
use crate::workspace::Workspace;

/// Predicted persons as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSet {
    /// `[N, J, 3]`, meters.
    pub poses: Array,
    /// `N` values in `[0, 1]`.
    pub confidences: Vec<f64>,
}

impl PoseSet {
    pub fn new(poses: Array, confidences: Vec<f64>) -> Result<Self> {
        let s = poses.shape();
        if s.len() != 3 || s[2] != 3 || s[0] != confidences.len() {
            return Err(shape_err!(
                "pose set needs [N,J,3] poses and N confidences, got {s:?} and {}",
                confidences.len()
            ));
        }
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Input("confidences must lie in [0, 1]".into()));
        }
        Ok(Self { poses, confidences })
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.poses.shape()[1]
    }

    /// Flat `J * 3` coordinates of person `n`.
    pub fn pose(&self, n: usize) -> &[f64] {
        let k = self.joints() * 3;
        &self.poses.data()[n * k..(n + 1) * k]
    }
}

/// Ground-truth persons; may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    joints: usize,
    coords: Vec<f64>,
}

impl GroundTruth {
    pub fn new(joints: usize, coords: Vec<f64>) -> Result<Self> {
        if joints == 0 || !coords.len().is_multiple_of(joints * 3) {
            return Err(shape_err!(
                "{} coordinates do not form poses of {joints} joints",
                coords.len()
            ));
        }
        Ok(Self { joints, coords })
    }

    pub fn empty(joints: usize) -> Self {
        Self {
            joints,
            coords: Vec::new(),
        }
    }

    /// From an `[N_gt, J, 3]` array.
    pub fn from_array(poses: &Array) -> Result<Self> {
        let s = poses.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(shape_err!("ground truth must be [N,J,3], got {s:?}"));
        }
        Self::new(s[1], poses.data().to_vec())
    }

    pub fn persons(&self) -> usize {
        self.coords.len() / (self.joints * 3)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn pose(&self, n: usize) -> &[f64] {
        let k = self.joints * 3;
        &self.coords[n * k..(n + 1) * k]
    }

    pub fn joint(&self, n: usize, j: usize) -> Vec3 {
        let o = (n * self.joints + j) * 3;
        Vec3::new(self.coords[o], self.coords[o + 1], self.coords[o + 2])
    }

    /// Ground truth with persons reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            joints: self.joints,
            coords: order.iter().flat_map(|&n| self.pose(n).to_vec()).collect(),
        }
    }
}

/// Optimal assignment of ground-truth slots (padded with empty slots to `N`) to predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `perm[n]` is the prediction matched to ground-truth slot `n`.
    pub perm: Vec<usize>,
    /// Number of non-empty ground-truth slots; they come first.
    pub matched_count: usize,
}

impl Assignment {
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.perm.len()];
        for &p in &self.perm {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Input(format!("{:?} is not a permutation", self.perm)));
            }
        }
        if self.matched_count > self.perm.len() {
            return Err(Error::Input("more matched slots than predictions".into()));
        }
        Ok(())
    }

    /// Predictions that are matched to a real person.
    pub fn matched(&self) -> &[usize] {
        &self.perm[..self.matched_count]
    }
}

/// `-confidence + mean |gt - pred|` over the `J * 3` coordinates, each divided by the
/// workspace extent along its axis.
pub fn match_cost(gt_pose: &[f64], pred_pose: &[f64], confidence: f64, extents: &[f64; 3]) -> f64 {
    debug_assert_eq!(gt_pose.len(), pred_pose.len());
    let l1: f64 = gt_pose
        .iter()
        .zip(pred_pose)
        .enumerate()
        .map(|(i, (a, b))| (a - b).abs() / extents[i % 3])
        .sum();
    -confidence + l1 / gt_pose.len() as f64
}

/// `[N, N]` costs: rows are ground-truth slots (empty slots cost zero), columns predictions.
pub fn cost_matrix(gt: &GroundTruth, pred: &PoseSet, workspace: &Workspace) -> Result<Array> {
    let n = pred.len();
    if gt.persons() > n {
        return Err(Error::Input(format!(
            "{} ground-truth persons exceed {n} prediction slots",
            gt.persons()
        )));
    }
    if gt.persons() > 0 && gt.joints() != pred.joints() {
        return Err(shape_err!(
            "ground truth has {} joints, predictions {}",
            gt.joints(),
            pred.joints()
        ));
    }
    let ext = workspace.extents();
    let mut c = Array::zeros(&[n, n]);
    for r in 0..gt.persons() {
        for k in 0..n {
            let v = match_cost(gt.pose(r), pred.pose(k), pred.confidences[k], &ext);
            c.data_mut()[r * n + k] = v;
        }
    }
    Ok(c)
}

/// Minimum-cost perfect matching of a square matrix (shortest augmenting paths with
/// potentials, O(n^3)). Returns the column chosen for each row.
fn solve(cost: &[f64], n: usize) -> Vec<usize> {
    const INF: f64 = f64::INFINITY;
    let a = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=n {
        cols[p[j] - 1] = j - 1;
    }
    cols
}

fn sub_optimum(cost: &[f64], n: usize, rows: &[usize], cols: &[usize]) -> f64 {
    let m = rows.len();
    if m == 0 {
        return 0.0;
    }
    let sub: Vec<f64> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| cost[r * n + c]))
        .collect();
    let sol = solve(&sub, m);
    (0..m).map(|i| sub[i * m + sol[i]]).sum()
}

/// Optimal assignment for a square cost matrix (rows: ground-truth slots).
///
/// Among optimal permutations the lexicographically smallest one is returned: row 0 takes
/// the lowest column compatible with optimality, then row 1, and so on.
pub fn hungarian(cost: &Array) -> Result<Assignment> {
    let s = cost.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(shape_err!("hungarian needs a square matrix, got {s:?}"));
    }
    if !cost.is_finite() {
        return Err(Error::Input("cost matrix contains non-finite entries".into()));
    }
    let n = s[0];
    let c = cost.data();
    let scale = 1.0 + cost.max_abs();
    let tol = 1e-12 * scale * n as f64;
    let mut rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..n).collect();
    let mut target = sub_optimum(c, n, &rows, &cols);
    let mut perm = Vec::with_capacity(n);
    while let Some(&r) = rows.first() {
        rows.remove(0);
        let mut chosen = None;
        for (k, &col) in cols.iter().enumerate() {
            let rest: Vec<usize> = cols.iter().copied().filter(|&x| x != col).collect();
            let rest_opt = sub_optimum(c, n, &rows, &rest);
            if c[r * n + col] + rest_opt <= target + tol {
                chosen = Some((k, rest_opt));
                break;
            }
        }
        let (k, rest_opt) = chosen.expect("some column attains the optimum");
        perm.push(cols.remove(k));
        target = rest_opt;
    }
    Ok(Assignment {
        perm,
        matched_count: n,
    })
}

/// Sum of `cost[n, perm[n]]` in row order.
pub fn assignment_cost(cost: &Array, perm: &[usize]) -> f64 {
    let n = cost.shape()[0];
    perm.iter().enumerate().map(|(r, &c)| cost.data()[r * n + c]).sum()
}

/// Matches ground truth to predictions: the Hungarian assignment on [`cost_matrix`].
pub fn match_poses(gt: &GroundTruth, pred: &PoseSet, workspace: &Workspace) -> Result<Assignment> {
    let cost = cost_matrix(gt, pred, workspace)?;
    let mut a = hungarian(&cost)?;
    a.matched_count = gt.persons();
    Ok(a)
}

/// Focal loss of one probability, clamped to `[1e-12, 1 - 1e-12]`.
pub fn focal_loss(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if target {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the pose term.
    pub lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the 2D reprojection term inside the pose term (the 3D term has weight 1).
    pub weight_2d: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 2.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            weight_2d: 1.0,
        }
    }
}

/// Differentiable predictions of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct PredVars {
    /// `[N, J, 3]`, meters.
    pub poses: Var,
    /// `[N]` person confidences in `(0, 1)`.
    pub confidences: Var,
}

impl PredVars {
    pub fn values(&self, g: &Graph) -> Result<PoseSet> {
        PoseSet::new(
            g.value(self.poses).clone(),
            g.value(self.confidences).data().to_vec(),
        )
    }
}

/// One layer's loss with its parts.
#[derive(Clone, Debug)]
pub struct LayerLoss {
    pub loss: Var,
    /// Focal confidence term.
    pub confidence: f64,
    /// `lambda`-weighted pose term.
    pub pose: f64,
    pub assignment: Assignment,
}

/// Geometry the loss needs besides predictions and ground truth.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub cameras: &'a [CameraParams],
    pub workspace: &'a Workspace,
    pub config: &'a LossConfig,
}

fn focal_term(g: &mut Graph, conf: Var, targets: &[bool], cfg: &LossConfig) -> Result<Var> {
    let n = targets.len();
    let p = g.clamp_last(conf, &vec![PROB_EPS; n], &vec![1.0 - PROB_EPS; n])?;
    let neg = g.scale(p, -1.0)?;
    let q = g.add_scalar(neg, 1.0)?;
    let ln_p = g.log(p)?;
    let ln_q = g.log(q)?;
    let q_g = g.powf(q, cfg.focal_gamma)?;
    let p_g = g.powf(p, cfg.focal_gamma)?;
    let pos = g.mul(q_g, ln_p)?;
    let negt = g.mul(p_g, ln_q)?;
    let wp: Vec<f64> = targets.iter().map(|&t| if t { -cfg.focal_alpha } else { 0.0 }).collect();
    let wn: Vec<f64> = targets
        .iter()
        .map(|&t| if t { 0.0 } else { -(1.0 - cfg.focal_alpha) })
        .collect();
    let wp = g.constant(Array::from_vec(wp));
    let wn = g.constant(Array::from_vec(wn));
    let a = g.mul(pos, wp)?;
    let b = g.mul(negt, wn)?;
    let both = g.add(a, b)?;
    g.sum(both)
}

/// Hungarian loss of one layer.
///
/// With `fixed` the given assignment is used instead of recomputing it (for finite
/// differences). The matching itself never receives gradients.
pub fn hungarian_loss(
    g: &mut Graph,
    pred: &PredVars,
    gt: &GroundTruth,
    ctx: &LossContext,
    fixed: Option<&Assignment>,
) -> Result<LayerLoss> {
    let ps = g.shape(pred.poses).to_vec();
    if ps.len() != 3 || ps[2] != 3 || g.shape(pred.confidences) != [ps[0]] {
        return Err(shape_err!(
            "predictions need poses [N,J,3] and confidences [N], got {ps:?} and {:?}",
            g.shape(pred.confidences)
        ));
    }
    let (n, j) = (ps[0], ps[1]);
    let cfg = ctx.config;
    let assignment = match fixed {
        Some(a) => {
            a.validate()?;
            if a.perm.len() != n || a.matched_count != gt.persons() {
                return Err(Error::Input("fixed assignment does not fit the predictions".into()));
            }
            a.clone()
        }
        None => match_poses(gt, &pred.values(g)?, ctx.workspace)?,
    };
    let mut targets = vec![false; n];
    for &k in assignment.matched() {
        targets[k] = true;
    }
    let focal = focal_term(g, pred.confidences, &targets, cfg)?;
    let confidence = g.value(focal).item();
    let n_gt = gt.persons();
    if n_gt == 0 {
        return Ok(LayerLoss {
            loss: focal,
            confidence,
            pose: 0.0,
            assignment,
        });
    }
    if gt.joints() != j {
        return Err(shape_err!("ground truth has {} joints, predictions {j}", gt.joints()));
    }

    // matched predictions, person-major, as [N_gt * J, 3]
    let flat = g.reshape(pred.poses, &[n, j * 3])?;
    let picked = g.gather_rows(flat, assignment.matched())?;
    let points = g.reshape(picked, &[n_gt * j, 3])?;

    // 3D term: per person the mean over J * 3 normalized coordinates, summed over persons
    let gt_pts = g.constant(Array::new(&[n_gt * j, 3], gt.coords.clone())?);
    let d3 = g.sub(points, gt_pts)?;
    let a3 = g.abs(d3)?;
    let ext = ctx.workspace.extents();
    let inv = g.constant(Array::from_vec(
        ext.iter().map(|e| 1.0 / (e * (j * 3) as f64)).collect(),
    ));
    let w3 = g.mul(a3, inv)?;
    let mut pose_sum = g.sum(w3)?;

    // 2D term: per person the mean over valid (view, joint, axis) entries, summed
    let mut entries = Vec::with_capacity(ctx.cameras.len());
    let mut counts = vec![0usize; n_gt];
    for cam in ctx.cameras {
        let (uv, front) = project_points(g, points, cam)?;
        let mut gt_uv = vec![0.0; n_gt * j * 2];
        let mut valid = vec![false; n_gt * j];
        for p in 0..n_gt {
            for q in 0..j {
                let y = gt.joint(p, q);
                let row = p * j + q;
                if cam.sees(&y) && front[row] {
                    let [u, v] = project(&y, cam)?;
                    gt_uv[2 * row] = u;
                    gt_uv[2 * row + 1] = v;
                    valid[row] = true;
                    counts[p] += 2;
                }
            }
        }
        entries.push((uv, gt_uv, valid, [cam.width as f64, cam.height as f64]));
    }
    for (uv, gt_uv, valid, [w, h]) in entries {
        if !valid.iter().any(|&v| v) {
            continue;
        }
        let weights: Vec<f64> = (0..n_gt * j * 2)
            .map(|k| {
                let row = k / 2;
                if valid[row] {
                    let extent = if k % 2 == 0 { w } else { h };
                    cfg.weight_2d / (extent * counts[row / j] as f64)
                } else {
                    0.0
                }
            })
            .collect();
        let target = g.constant(Array::new(&[n_gt * j, 2], gt_uv)?);
        let d2 = g.sub(uv, target)?;
        let a2 = g.abs(d2)?;
        let wv = g.constant(Array::new(&[n_gt * j, 2], weights)?);
        let w2 = g.mul(a2, wv)?;
        let s2 = g.sum(w2)?;
        pose_sum = g.add(pose_sum, s2)?;
    }
    let pose_term = g.scale(pose_sum, cfg.lambda)?;
    let pose = g.value(pose_term).item();
    let loss = g.add(focal, pose_term)?;
    Ok(LayerLoss {
        loss,
        confidence,
        pose,
        assignment,
    })
}

/// Sum of per-layer Hungarian losses, each with its own matching.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub loss: Var,
    pub layers: Vec<LayerLoss>,
}

pub fn total_loss(
    g: &mut Graph,
    layers: &[PredVars],
    gt: &GroundTruth,
    ctx: &LossContext,
    fixed: Option<&[Assignment]>,
) -> Result<TotalLoss> {
    if layers.is_empty() {
        return Err(Error::Input("total loss needs at least one layer".into()));
    }
    if let Some(f) = fixed {
        if f.len() != layers.len() {
            return Err(Error::Input(format!(
                "{} fixed assignments for {} layers",
                f.len(),
                layers.len()
            )));
        }
    }
    let mut parts = Vec::with_capacity(layers.len());
    let mut total: Option<Var> = None;
    for (l, pred) in layers.iter().enumerate() {
        let part = hungarian_loss(g, pred, gt, ctx, fixed.map(|f| &f[l]))?;
        total = Some(match total {
            None => part.loss,
            Some(t) => g.add(t, part.loss)?,
        });
        parts.push(part);
    }
    Ok(TotalLoss {
        loss: total.expect("at least one layer"),
        layers: parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_loss_reference_value() {
        let v = focal_loss(0.5, true, 0.25, 2.0);
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn hungarian_small_cases() {
        let a = hungarian(&Array::new(&[2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap()).unwrap();
        assert_eq!(a.perm, vec![0, 1]);
        let ties = Array::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let a = hungarian(&ties).unwrap();
        assert_eq!(assignment_cost(&ties, &a.perm), 1.0);
        assert_eq!(a.perm, vec![0, 1]);
    }

    #[test]
    fn hungarian_rejects_nan() {
        let c = Array::new(&[2, 2], vec![0.0, f64::NAN, 0.0, 1.0]);
        // Array::new accepts NaN; the solver must refuse it
        assert!(matches!(hungarian(&c.unwrap()), Err(Error::Input(_))));
    }
}
