//! Pinhole cameras, projection, per-pixel ray fields, differentiable bilinear sampling
//! and linear triangulation.
//!
//! Conventions:
//! - world to camera is `x_cam = R * x_world + t`; camera `+z` looks forward, `+x` is
//!   image right and `+y` is image down;
//! - pixel `(u, v)` covers `[u, u+1) x [v, v+1)` and its center sits at `(u+0.5, v+0.5)`;
//! - feature-map coordinates are image coordinates divided by the feature stride.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::autodiff::{Array, CustomBackward, Graph, Var};
use crate::error::{shape_err, Error, Result};

pub type Vec3 = Vector3<f64>;

/// Depth below which a point counts as behind the camera, meters.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation, meters.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl CameraParams {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with world `+z` as up.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::DegenerateGeometry("eye coincides with target".into()))?;
        let right = forward
            .cross(&Vec3::z())
            .try_normalize(1e-9)
            .ok_or_else(|| Error::DegenerateGeometry("camera looks straight up or down".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image extent must be positive".into()));
        }
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, y: &Vec3) -> Vec3 {
        self.rotation * y + self.translation
    }

    /// 3x4 matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> DMatrix<f64> {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let kr = k * self.rotation;
        let kt = k * self.translation;
        DMatrix::from_fn(3, 4, |i, j| if j < 3 { kr[(i, j)] } else { kt[i] })
    }

    /// Whether `y` is in front of the camera and projects inside the image.
    pub fn sees(&self, y: &Vec3) -> bool {
        match project(y, self) {
            Ok([u, v]) => u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64,
            Err(_) => false,
        }
    }
}

/// Perspective projection to pixel coordinates.
pub fn project(y: &Vec3, cam: &CameraParams) -> Result<[f64; 2]> {
    let p = cam.to_camera(y);
    if p.z <= MIN_DEPTH {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok([cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy])
}

/// Unit world-frame ray directions through pixel centers, shape `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayField {
    pub dirs: Array,
}

impl RayField {
    pub fn at(&self, row: usize, col: usize) -> Vec3 {
        Vec3::new(
            self.dirs.get(&[0, row, col]),
            self.dirs.get(&[1, row, col]),
            self.dirs.get(&[2, row, col]),
        )
    }
}

/// Ray field at full image resolution.
pub fn ray_field(cam: &CameraParams) -> RayField {
    ray_field_strided(cam, 1, cam.height, cam.width)
}

/// Ray field sampled at the centers of an `h x w` feature grid with the given stride.
pub fn ray_field_strided(cam: &CameraParams, stride: usize, h: usize, w: usize) -> RayField {
    let s = stride as f64;
    let rt = cam.rotation.transpose();
    let mut dirs = Array::zeros(&[3, h, w]);
    let plane = h * w;
    for row in 0..h {
        for col in 0..w {
            let u = (col as f64 + 0.5) * s;
            let v = (row as f64 + 0.5) * s;
            let d_cam = Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0).normalize();
            let d = rt * d_cam;
            let at = row * w + col;
            let data = dirs.data_mut();
            data[at] = d.x;
            data[plane + at] = d.y;
            data[2 * plane + at] = d.z;
        }
    }
    RayField { dirs }
}

/// Normalised pixel-center coordinates in `[0, 1]`, shape `[2, H, W]` (u then v).
pub fn coord_field(h: usize, w: usize) -> Array {
    let mut out = Array::zeros(&[2, h, w]);
    let plane = h * w;
    let data = out.data_mut();
    for row in 0..h {
        for col in 0..w {
            data[row * w + col] = (col as f64 + 0.5) / w as f64;
            data[plane + row * w + col] = (row as f64 + 0.5) / h as f64;
        }
    }
    out
}

/// The four neighbours of a sample point with their bilinear weights; out-of-map
/// neighbours are `None`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Support {
    pub idx: [Option<usize>; 4],
    pub fx: f64,
    pub fy: f64,
    /// Plain grid indices `(row, col)` of the top-left neighbour.
    pub origin: (i64, i64),
}

impl Support {
    pub(crate) fn new(px: f64, py: f64, h: usize, w: usize) -> Self {
        if !px.is_finite() || !py.is_finite() {
            return Self {
                idx: [None; 4],
                fx: 0.0,
                fy: 0.0,
                origin: (i64::MIN / 2, i64::MIN / 2),
            };
        }
        let x = px - 0.5;
        let y = py - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        // saturating cast keeps far-away points far away
        let (c0, r0) = (x0 as i64, y0 as i64);
        let at = |r: i64, c: i64| {
            (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then(|| r as usize * w + c as usize)
        };
        Self {
            idx: [
                at(r0, c0),
                at(r0, c0.saturating_add(1)),
                at(r0.saturating_add(1), c0),
                at(r0.saturating_add(1), c0.saturating_add(1)),
            ],
            fx,
            fy,
            origin: (r0, c0),
        }
    }

    pub(crate) fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    /// Grid cells `(row, col)` that influence the sample, including out-of-map ones.
    pub fn cells(&self) -> [(i64, i64); 4] {
        let (r, c) = self.origin;
        [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)]
    }
}

/// Grid cells `(row, col)` whose values can influence a bilinear sample at `p`.
pub fn bilinear_support(p: [f64; 2], h: usize, w: usize) -> [(i64, i64); 4] {
    Support::new(p[0], p[1], h, w).cells()
}

struct BilinearBackward;

impl CustomBackward for BilinearBackward {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&Array], _out: &Array, grad: &Array) -> Result<Vec<Option<Array>>> {
        let (map, pts) = (inputs[0], inputs[1]);
        let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let plane = h * w;
        let p = pts.shape()[0];
        let mut dmap = Array::zeros(map.shape());
        let mut dpts = Array::zeros(pts.shape());
        let md = map.data();
        for k in 0..p {
            let s = Support::new(pts.data()[2 * k], pts.data()[2 * k + 1], h, w);
            if s.idx.iter().all(Option::is_none) {
                continue;
            }
            let wts = s.weights();
            let g = &grad.data()[k * c..(k + 1) * c];
            let dm = dmap.data_mut();
            for (corner, idx) in s.idx.iter().enumerate() {
                if let Some(i) = idx {
                    for ch in 0..c {
                        dm[ch * plane + i] += wts[corner] * g[ch];
                    }
                }
            }
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                let v = |corner: usize| s.idx[corner].map_or(0.0, |i| md[ch * plane + i]);
                let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
                gx += g[ch] * ((1.0 - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                gy += g[ch] * ((1.0 - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
            }
            dpts.data_mut()[2 * k] = gx;
            dpts.data_mut()[2 * k + 1] = gy;
        }
        Ok(vec![Some(dmap), Some(dpts)])
    }
}

/// Bilinear samples of `map: [C,H,W]` at `points: [P,2]` (feature-grid `(u, v)`),
/// returning `[P, C]`.
///
/// Out-of-map neighbours contribute zero, so a sample whose whole support lies off the
/// map is zero. Differentiable with respect to both the map and the points.
pub fn bilinear_sample(g: &mut Graph, map: Var, points: Var) -> Result<Var> {
    let ms = g.shape(map).to_vec();
    let ps = g.shape(points).to_vec();
    if ms.len() != 3 || ps.len() != 2 || ps[1] != 2 {
        return Err(shape_err!(
            "bilinear_sample expects map [C,H,W] and points [P,2], got {ms:?} and {ps:?}"
        ));
    }
    let (c, h, w) = (ms[0], ms[1], ms[2]);
    let plane = h * w;
    let p = ps[0];
    let mut out = vec![0.0; p * c];
    {
        let md = g.value(map).data();
        let pd = g.value(points).data();
        for k in 0..p {
            let s = Support::new(pd[2 * k], pd[2 * k + 1], h, w);
            let wts = s.weights();
            for (corner, idx) in s.idx.iter().enumerate() {
                if let Some(i) = idx {
                    for ch in 0..c {
                        out[k * c + ch] += wts[corner] * md[ch * plane + i];
                    }
                }
            }
        }
    }
    let value = Array::new(&[p, c], out)?;
    g.custom(&[map, points], value, Box::new(BilinearBackward))
}

/// Differentiable projection of `points: [P,3]` (world, meters) to pixels `[P,2]`.
///
/// Also returns, per point, whether it lies in front of the camera. Rows behind the
/// camera are computed with their depth replaced by 1 (finite, no gradient through the
/// depth) and must be masked by the caller.
pub fn project_points(g: &mut Graph, points: Var, cam: &CameraParams) -> Result<(Var, Vec<bool>)> {
    let ps = g.shape(points).to_vec();
    if ps.len() != 2 || ps[1] != 3 {
        return Err(shape_err!("project_points expects [P,3], got {ps:?}"));
    }
    let n = ps[0];
    // nalgebra stores column-major, so R's storage is R^T in row-major order
    let rt = g.constant(Array::new(&[3, 3], cam.rotation.as_slice().to_vec())?);
    let t = g.constant(Array::from_vec(cam.translation.as_slice().to_vec()));
    let rotated = g.matmul(points, rt)?;
    let pc = g.add(rotated, t)?;
    let z = g.narrow(pc, 1, 2, 1)?;
    let front: Vec<bool> = g.value(z).data().iter().map(|&z| z > MIN_DEPTH).collect();
    let mask: Vec<f64> = front.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    let keep = g.constant(Array::new(&[n, 1], mask.clone())?);
    let fill = g.constant(Array::new(&[n, 1], mask.iter().map(|m| 1.0 - m).collect())?);
    let zm = g.mul(z, keep)?;
    let zs = g.add(zm, fill)?;
    let xy = g.narrow(pc, 1, 0, 2)?;
    let norm = g.div(xy, zs)?;
    let f = g.constant(Array::from_vec(vec![cam.fx, cam.fy]));
    let c = g.constant(Array::from_vec(vec![cam.cx, cam.cy]));
    let scaled = g.mul(norm, f)?;
    Ok((g.add(scaled, c)?, front))
}

/// Linear (DLT) triangulation from two or more pixel observations.
pub fn triangulate_dlt(observations: &[([f64; 2], &CameraParams)]) -> Result<Vec3> {
    if observations.len() < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "triangulation needs at least 2 views, got {}",
            observations.len()
        )));
    }
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, ([u, v], cam)) in observations.iter().enumerate() {
        let p = cam.projection_matrix();
        // unit-norm rows keep views with different scales comparable
        for (r, coord, row_idx) in [(2 * i, *u, 0), (2 * i + 1, *v, 1)] {
            let row: Vec<f64> = (0..4).map(|j| coord * p[(2, j)] - p[(row_idx, j)]).collect();
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            for j in 0..4 {
                a[(r, j)] = row[j] / n;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateGeometry("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    if order.len() < 4 || sv(2) <= 1e-9 * sv(0) {
        return Err(Error::DegenerateGeometry(
            "rank-deficient triangulation system (zero baseline?)".into(),
        ));
    }
    let x = v_t.row(order[3]);
    if x[3].abs() <= f64::EPSILON {
        return Err(Error::DegenerateGeometry("solution at infinity".into()));
    }
    Ok(Vec3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]))
}
