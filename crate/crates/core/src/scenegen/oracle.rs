//! Reference 3D reconstruction straight from the heatmaps, used as a sanity ceiling.

use super::{Scene, SEPARATION_SIGMAS};
use crate::autodiff::Array;
use crate::camgeom::{project, triangulate_dlt, CameraParams};
use crate::error::Result;

/// Sub-pixel peak of channel `ch` near the pixel `start`, found by hill climbing and
/// refined with a parabola through the log values of the neighbours on each axis
/// (exact for an isolated Gaussian).
pub fn heatmap_peak(map: &Array, ch: usize, start: (usize, usize)) -> [f64; 2] {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
    let at = |r: usize, c: usize| plane[r * w + c];
    let (mut r, mut c) = start;
    loop {
        let mut best = (r, c);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let (rr, cc) = (rr as usize, cc as usize);
                if at(rr, cc) > at(best.0, best.1) {
                    best = (rr, cc);
                }
            }
        }
        if best == (r, c) {
            break;
        }
        (r, c) = best;
    }
    let refine = |lo: Option<f64>, mid: f64, hi: Option<f64>| match (lo, hi) {
        (Some(l), Some(h)) if l > 0.0 && mid > 0.0 && h > 0.0 => {
            let (l, m, h) = (l.ln(), mid.ln(), h.ln());
            let denom = l - 2.0 * m + h;
            if denom < 0.0 {
                (0.5 * (l - h) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let mid = at(r, c);
    let dx = refine(
        c.checked_sub(1).map(|cc| at(r, cc)),
        mid,
        (c + 1 < w).then(|| at(r, c + 1)),
    );
    let dy = refine(
        r.checked_sub(1).map(|rr| at(rr, c)),
        mid,
        (r + 1 < h).then(|| at(r + 1, c)),
    );
    [c as f64 + 0.5 + dx, r as f64 + 0.5 + dy]
}

/// Triangulates every ground-truth joint from heatmap peaks.
///
/// Ground truth only selects which peak belongs to which person. Views where another
/// person's same joint projects within [`SEPARATION_SIGMAS`]` * sigma_px` are skipped when at least two
/// clean views remain; otherwise the two least crowded views are used. Intended for
/// noise-free, distractor-free scenes.
pub fn triangulate_from_heatmaps(scene: &Scene, sigma_px: f64) -> Result<Array> {
    let (n_gt, j_count) = (scene.persons(), scene.joints());
    let (h, w) = scene.feature_extent();
    let mut out = Vec::with_capacity(n_gt * j_count * 3);
    for n in 0..n_gt {
        for j in 0..j_count {
            // (distance to the nearest rival peak, observation)
            let mut obs: Vec<(f64, ([f64; 2], &CameraParams))> = Vec::new();
            for (cam, map) in scene.cameras.iter().zip(&scene.features) {
                if !cam.sees(&scene.joint(n, j)) {
                    continue;
                }
                let p = project(&scene.joint(n, j), cam)?;
                let start = (
                    (p[1].floor() as usize).min(h - 1),
                    (p[0].floor() as usize).min(w - 1),
                );
                let peak = heatmap_peak(map, j, start);
                let rival = (0..n_gt)
                    .filter(|&o| o != n)
                    .filter_map(|o| project(&scene.joint(o, j), cam).ok())
                    .map(|q| (q[0] - p[0]).hypot(q[1] - p[1]))
                    .fold(f64::INFINITY, f64::min);
                obs.push((rival, (peak, cam)));
            }
            obs.sort_by(|a, b| b.0.total_cmp(&a.0));
            let clean = obs.iter().filter(|o| o.0 >= SEPARATION_SIGMAS * sigma_px).count();
            let used: Vec<_> = obs.iter().take(clean.max(2)).map(|o| o.1).collect();
            let y = triangulate_dlt(&used)?;
            out.extend([y.x, y.y, y.z]);
        }
    }
    Array::new(&[n_gt, j_count, 3], out)
}
