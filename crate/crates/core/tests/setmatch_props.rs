use mvp_core::autodiff::{Array, Graph};
use mvp_core::camgeom::CameraParams;
use mvp_core::scenegen::{ring_cameras, SceneConfig};
use mvp_core::setmatch::{
    assignment_cost, focal_loss, hungarian, hungarian_loss, match_cost, match_poses, total_loss,
    Assignment, GroundTruth, LossConfig, LossContext, PoseSet, PredVars,
};
use mvp_core::workspace::Workspace;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every permutation of `0..n` in lexicographic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..left.len() {
            let x = left.remove(i);
            prefix.push(x);
            rec(prefix, left, out);
            prefix.pop();
            left.insert(i, x);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

fn row_sum(c: &Array, perm: &[usize]) -> f64 {
    let n = c.shape()[0];
    let mut s = 0.0;
    for (r, &k) in perm.iter().enumerate() {
        s += c.data()[r * n + k];
    }
    s
}

/// First permutation (lexicographically) attaining the minimum total.
fn brute_force(c: &Array) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in permutations(c.shape()[0]) {
        let t = row_sum(c, &p);
        if best.as_ref().is_none_or(|(_, b)| t < *b) {
            best = Some((p, t));
        }
    }
    best.unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, integer: bool) -> Array {
    let data = (0..n * n)
        .map(|_| {
            if integer {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(-5.0..5.0)
            }
        })
        .collect();
    Array::new(&[n, n], data).unwrap()
}

#[test]
fn hungarian_matches_exhaustive_minimum_on_200_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..200 {
        let n = 1 + case % 6;
        let c = random_matrix(&mut rng, n, false);
        let a = hungarian(&c).unwrap();
        let (_, best) = brute_force(&c);
        assert_eq!(row_sum(&c, &a.perm), best, "case {case}");
        assert_eq!(assignment_cost(&c, &a.perm), best);
    }
}

#[test]
fn ties_resolve_to_lexicographically_smallest_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let n = 1 + case % 6;
        let c = random_matrix(&mut rng, n, true);
        let a = hungarian(&c).unwrap();
        let (perm, best) = brute_force(&c);
        assert_eq!(row_sum(&c, &a.perm), best);
        assert_eq!(a.perm, perm, "case {case}: {:?}", c.data());
    }
}

#[test]
fn hungarian_never_worse_than_identity_or_random_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.random_range(1..=9);
        let c = random_matrix(&mut rng, n, false);
        let total = row_sum(&c, &hungarian(&c).unwrap().perm);
        let mut p: Vec<usize> = (0..n).collect();
        assert!(total <= row_sum(&c, &p));
        for _ in 0..50 {
            p.shuffle(&mut rng);
            assert!(total <= row_sum(&c, &p));
        }
    }
}

fn extents() -> [f64; 3] {
    Workspace::default().extents()
}

#[test]
fn match_cost_examples() {
    let pose: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
    assert!((match_cost(&pose, &pose, 0.8, &extents()) - (-0.8)).abs() < 1e-15);
    let ext = extents();
    let off: Vec<f64> = pose.iter().enumerate().map(|(i, v)| v + 0.1 * ext[i % 3]).collect();
    assert!((match_cost(&pose, &off, 0.0, &ext) - 0.1).abs() < 1e-12);
}

#[test]
fn match_cost_equals_reference_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ext = [4.0, 3.0, 2.0];
    for _ in 0..100 {
        let j = rng.random_range(1..8);
        let gt: Vec<f64> = (0..j * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pr: Vec<f64> = (0..j * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = rng.random_range(0.0..1.0);
        // reference: per joint, per axis
        let mut acc = 0.0;
        for jj in 0..j {
            for (ax, e) in ext.iter().enumerate() {
                acc += (gt[3 * jj + ax] / e - pr[3 * jj + ax] / e).abs();
            }
        }
        let reference = acc / (3 * j) as f64 - p;
        assert!((match_cost(&gt, &pr, p, &ext) - reference).abs() < 1e-12);
    }
}

fn random_pose_set(rng: &mut ChaCha8Rng, n: usize, j: usize) -> PoseSet {
    let ws = Workspace::default();
    let data = (0..n * j * 3)
        .map(|i| rng.random_range(ws.lo[i % 3] + 0.2..ws.hi[i % 3] - 0.2))
        .collect();
    let conf = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    PoseSet::new(Array::new(&[n, j, 3], data).unwrap(), conf).unwrap()
}

fn gt_from(set: &PoseSet, persons: usize) -> GroundTruth {
    let k = set.joints() * 3;
    GroundTruth::new(set.joints(), set.poses.data()[..persons * k].to_vec()).unwrap()
}

#[test]
fn confidence_shift_keeps_assignment_and_shifts_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ws = Workspace::default();
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let pred = random_pose_set(&mut rng, n, 4);
        let gt = gt_from(&random_pose_set(&mut rng, n, 4), rng.random_range(1..=n));
        let c = rng.random_range(-0.5..0.5);
        let shifted = PoseSet {
            poses: pred.poses.clone(),
            confidences: pred.confidences.iter().map(|p| p + c).collect(),
        };
        let cost_a = mvp_core::setmatch::cost_matrix(&gt, &pred, &ws).unwrap();
        let cost_b = mvp_core::setmatch::cost_matrix(&gt, &shifted, &ws).unwrap();
        let a = match_poses(&gt, &pred, &ws).unwrap();
        let b = match_poses(&gt, &shifted, &ws).unwrap();
        assert_eq!(a.perm, b.perm);
        let gap = assignment_cost(&cost_a, &a.perm) - assignment_cost(&cost_b, &b.perm);
        assert!((gap - c * gt.persons() as f64).abs() < 1e-12, "gap {gap}");
    }
}

fn cams() -> Vec<CameraParams> {
    ring_cameras(&SceneConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

struct Built {
    g: Graph,
    pred: PredVars,
}

fn build(set: &PoseSet) -> Built {
    let mut g = Graph::new();
    let poses = g.param(set.poses.clone());
    let confidences = g.param(Array::from_vec(set.confidences.clone()));
    Built {
        g,
        pred: PredVars { poses, confidences },
    }
}

fn loss_value(set: &PoseSet, gt: &GroundTruth, cfg: &LossConfig, fixed: Option<&Assignment>) -> (f64, f64, f64) {
    let cams = cams();
    let ws = Workspace::default();
    let ctx = LossContext {
        cameras: &cams,
        workspace: &ws,
        config: cfg,
    };
    let mut b = build(set);
    let l = hungarian_loss(&mut b.g, &b.pred, gt, &ctx, fixed).unwrap();
    (b.g.value(l.loss).item(), l.confidence, l.pose)
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut set = random_pose_set(&mut rng, 4, 5);
    let gt = gt_from(&set, 2);
    set.confidences = vec![1.0, 1.0, 0.0, 0.0];
    let (total, conf, pose) = loss_value(&set, &gt, &LossConfig::default(), None);
    assert!(pose.abs() < 1e-9 && conf.abs() < 1e-9 && total.abs() < 1e-9, "{total} {conf} {pose}");
}

#[test]
fn focal_term_matches_direct_formula() {
    assert!((focal_loss(0.5, true, 0.25, 2.0) - 0.043322).abs() < 1e-6);
    // single prediction, empty ground truth: confidence term only
    let set = PoseSet::new(Array::full(&[1, 2, 3], 0.5), vec![0.3]).unwrap();
    let (total, conf, pose) = loss_value(&set, &GroundTruth::empty(2), &LossConfig::default(), None);
    let expected = -(1.0 - 0.25) * 0.3f64.powi(2) * (0.7f64).ln();
    assert!((total - expected).abs() < 1e-12 && (conf - expected).abs() < 1e-12);
    assert_eq!(pose, 0.0);
}

#[test]
fn doubling_lambda_doubles_pose_term_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let set = random_pose_set(&mut rng, 3, 4);
    let gt = gt_from(&random_pose_set(&mut rng, 3, 4), 2);
    let cfg = LossConfig::default();
    let (_, c1, p1) = loss_value(&set, &gt, &cfg, None);
    let doubled = LossConfig {
        lambda: 2.0 * cfg.lambda,
        ..cfg
    };
    let (_, c2, p2) = loss_value(&set, &gt, &doubled, None);
    assert!(p1 > 0.0);
    assert_eq!(p2, 2.0 * p1);
    assert_eq!(c1, c2);
}

#[test]
fn total_loss_is_sum_of_independent_layer_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cams = cams();
    let ws = Workspace::default();
    let cfg = LossConfig::default();
    let ctx = LossContext {
        cameras: &cams,
        workspace: &ws,
        config: &cfg,
    };
    let gt = gt_from(&random_pose_set(&mut rng, 3, 4), 2);
    let l1 = random_pose_set(&mut rng, 3, 4);
    let l2 = random_pose_set(&mut rng, 3, 4);

    let single = |set: &PoseSet| loss_value(set, &gt, &cfg, None).0;
    let mut g = Graph::new();
    let mk = |g: &mut Graph, s: &PoseSet| PredVars {
        poses: g.param(s.poses.clone()),
        confidences: g.param(Array::from_vec(s.confidences.clone())),
    };
    let p1 = mk(&mut g, &l1);
    let one = total_loss(&mut g, &[p1], &gt, &ctx, None).unwrap();
    assert_eq!(g.value(one.loss).item(), single(&l1));

    let p2 = mk(&mut g, &l2);
    let both = total_loss(&mut g, &[p1, p2], &gt, &ctx, None).unwrap();
    let expected = single(&l1) + single(&l2);
    assert!((g.value(both.loss).item() - expected).abs() < 1e-12);

    let p1b = mk(&mut g, &l1);
    let same = total_loss(&mut g, &[p1, p1b], &gt, &ctx, None).unwrap();
    assert_eq!(g.value(same.loss).item(), 2.0 * single(&l1));
}

#[test]
fn gradient_wrt_positions_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = LossConfig::default();
    for _ in 0..5 {
        let set = random_pose_set(&mut rng, 3, 4);
        let gt = gt_from(&random_pose_set(&mut rng, 3, 4), 2);
        let cams = cams();
        let ws = Workspace::default();
        let ctx = LossContext {
            cameras: &cams,
            workspace: &ws,
            config: &cfg,
        };
        let mut b = build(&set);
        let l = hungarian_loss(&mut b.g, &b.pred, &gt, &ctx, None).unwrap();
        let fixed = l.assignment.clone();
        b.g.backward(l.loss).unwrap();
        let analytic = b.g.grad(b.pred.poses).unwrap().clone();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..set.poses.len() {
            let eval = |d: f64| {
                let mut s = set.clone();
                s.poses.data_mut()[k] += d;
                loss_value(&s, &gt, &cfg, Some(&fixed)).0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }
}

#[test]
fn empty_ground_truth_gives_confidence_only_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let set = random_pose_set(&mut rng, 3, 4);
    let (total, conf, pose) = loss_value(&set, &GroundTruth::empty(4), &LossConfig::default(), None);
    assert_eq!(pose, 0.0);
    assert_eq!(total, conf);
    let expected: f64 = set
        .confidences
        .iter()
        .map(|&p| focal_loss(p, false, 0.25, 2.0))
        .sum();
    assert!((total - expected).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_is_invariant_to_ground_truth_order(seed in 0u64..10_000, persons in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_pose_set(&mut rng, 4, 3);
        let gt = gt_from(&random_pose_set(&mut rng, 4, 3), persons);
        let mut order: Vec<usize> = (0..persons).collect();
        order.shuffle(&mut rng);
        let cfg = LossConfig::default();
        let (a, _, _) = loss_value(&set, &gt, &cfg, None);
        let (b, _, _) = loss_value(&set, &gt.permuted(&order), &cfg, None);
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }
}
