use mvp_core::autodiff::{Array, Graph};
use mvp_core::camgeom::{
    bilinear_sample, project, ray_field, ray_field_strided, triangulate_dlt, CameraParams, Vec3,
};
use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_camera(rng: &mut ChaCha8Rng) -> CameraParams {
    let axis = Unit::new_normalize(Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    let r = Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).into_inner();
    let w = rng.random_range(32..128);
    let h = rng.random_range(32..128);
    let f = rng.random_range(40.0..150.0);
    CameraParams::new(
        f,
        f * rng.random_range(0.9..1.1),
        w as f64 / 2.0 + rng.random_range(-3.0..3.0),
        h as f64 / 2.0 + rng.random_range(-3.0..3.0),
        r,
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        w,
        h,
    )
    .unwrap()
}

/// Point inside the camera frustum at depth 1..8 m.
fn point_in_frustum(rng: &mut ChaCha8Rng, cam: &CameraParams) -> Vec3 {
    let u = rng.random_range(0.0..cam.width as f64);
    let v = rng.random_range(0.0..cam.height as f64);
    let z = rng.random_range(1.0..8.0);
    let pc = Vec3::new((u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z);
    cam.rotation.transpose() * (pc - cam.translation)
}

#[test]
fn project_then_triangulate_recovers_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let y = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0));
        let n_views = rng.random_range(3..6);
        let cams: Vec<CameraParams> = (0..n_views)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / n_views as f64 + rng.random_range(-0.2..0.2);
                let eye = Vec3::new(6.0 * a.cos(), 6.0 * a.sin(), rng.random_range(1.5..3.0));
                CameraParams::look_at(eye, y + Vec3::new(0.1, -0.1, 0.05), 60.0, 64, 64).unwrap()
            })
            .collect();
        let obs: Vec<_> = cams.iter().map(|c| (project(&y, c).unwrap(), c)).collect();
        let rec = triangulate_dlt(&obs).unwrap();
        assert!((rec - y).norm() < 1e-6, "error {}", (rec - y).norm());
    }
}

#[test]
fn five_noise_free_views_recover_exactly() {
    let y = Vec3::new(0.7, -1.1, 1.3);
    let cams: Vec<CameraParams> = (0..5)
        .map(|i| {
            let a = i as f64 * 1.2566;
            CameraParams::look_at(Vec3::new(6.0 * a.cos(), 6.0 * a.sin(), 2.5), Vec3::new(0.0, 0.0, 1.0), 55.0, 64, 64)
                .unwrap()
        })
        .collect();
    let obs: Vec<_> = cams.iter().map(|c| (project(&y, c).unwrap(), c)).collect();
    assert!((triangulate_dlt(&obs).unwrap() - y).norm() < 1e-9);
}

#[test]
fn pixel_ray_passes_within_one_pixel_of_projected_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let cam = random_camera(&mut rng);
        let y = point_in_frustum(&mut rng, &cam);
        let [u, v] = project(&y, &cam).unwrap();
        let (col, row) = (u.floor() as usize, v.floor() as usize);
        let rays = ray_field_strided(&cam, 1, cam.height, cam.width);
        let d = rays.at(row, col);
        assert!((d.norm() - 1.0).abs() < 1e-9);
        // point on the pixel ray at the same depth as y
        let c = cam.center();
        let depth = (y - c).norm();
        let q = c + d * depth;
        let [qu, qv] = project(&q, &cam).unwrap();
        assert!(((qu - u).powi(2) + (qv - v).powi(2)).sqrt() <= 1.0);
    }
}

#[test]
fn ray_field_depends_only_on_camera() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cam = random_camera(&mut rng);
    assert_eq!(ray_field(&cam), ray_field(&cam.clone()));
}

fn sample_sum(map: &Array, pts: &Array, w: &[f64]) -> f64 {
    let mut g = Graph::new();
    let m = g.constant(map.clone());
    let p = g.constant(pts.clone());
    let s = bilinear_sample(&mut g, m, p).unwrap();
    g.value(s).data().iter().zip(w).map(|(a, b)| a * b).sum()
}

#[test]
fn bilinear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let h = 1e-5;
    for _ in 0..20 {
        let map = Array::new(&[3, 6, 7], (0..126).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        // keep points away from the half-integer kinks so the central difference is smooth
        let pts: Vec<f64> = (0..8)
            .map(|_| {
                let base = rng.random_range(-1.0..8.0f64).floor();
                base + 0.5 + rng.random_range(0.05..0.95)
            })
            .collect();
        let pts = Array::new(&[4, 2], pts).unwrap();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let m = g.param(map.clone());
        let p = g.param(pts.clone());
        let s = bilinear_sample(&mut g, m, p).unwrap();
        let wv = g.constant(Array::new(&[4, 3], w.clone()).unwrap());
        let prod = g.mul(s, wv).unwrap();
        let l = g.sum(prod).unwrap();
        g.backward(l).unwrap();

        for (input, var, is_map) in [(&map, m, true), (&pts, p, false)] {
            let an = g.grad(var).unwrap();
            for k in 0..input.len() {
                let mut plus = input.clone();
                let mut minus = input.clone();
                plus.data_mut()[k] += h;
                minus.data_mut()[k] -= h;
                let (fp, fm) = if is_map {
                    (sample_sum(&plus, &pts, &w), sample_sum(&minus, &pts, &w))
                } else {
                    (sample_sum(&map, &plus, &w), sample_sum(&map, &minus, &w))
                };
                let num = (fp - fm) / (2.0 * h);
                let a = an.data()[k];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-5, "rel err {rel:e} (analytic {a}, numeric {num})");
            }
        }
    }
}

#[test]
fn bilinear_is_lipschitz_in_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (hgt, wid) = (8, 9);
    let map = Array::new(&[1, hgt, wid], (0..hgt * wid).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    // bound: largest difference between adjacent pixels (zero padding included)
    let at = |r: i64, c: i64| {
        if r < 0 || c < 0 || r >= hgt as i64 || c >= wid as i64 { 0.0 } else { map.get(&[0, r as usize, c as usize]) }
    };
    let mut lip = 0.0f64;
    for r in -1..=hgt as i64 {
        for c in -1..=wid as i64 {
            lip = lip.max((at(r, c + 1) - at(r, c)).abs()).max((at(r + 1, c) - at(r, c)).abs());
        }
    }
    let lip = 2.0 * lip;
    for _ in 0..500 {
        let p = [rng.random_range(-1.0..10.0), rng.random_range(-1.0..9.0)];
        let d = [rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)];
        let a = sample_sum(&map, &Array::new(&[1, 2], p.to_vec()).unwrap(), &[1.0]);
        let b = sample_sum(&map, &Array::new(&[1, 2], vec![p[0] + d[0], p[1] + d[1]]).unwrap(), &[1.0]);
        let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
        assert!((a - b).abs() <= lip * dist + 1e-12);
    }
}
