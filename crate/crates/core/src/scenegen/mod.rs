//! Synthetic multi-person, multi-view scenes with oracle heatmap features.

mod dataset;
mod oracle;
mod skeleton;

pub use dataset::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_VERSION};
pub use oracle::{heatmap_peak, triangulate_from_heatmaps};
pub use skeleton::{BoneSpec, SkeletonTemplate};

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::camgeom::{project, CameraParams, Vec3};
use crate::error::{Error, Result};
use crate::workspace::Workspace;

/// Ring of cameras around the workspace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    /// Horizontal distance from the workspace center, meters.
    pub radius: f64,
    /// Camera height above the floor, meters.
    pub height: f64,
    pub radius_jitter: f64,
    pub height_jitter: f64,
    /// Azimuth jitter, radians.
    pub azimuth_jitter: f64,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            radius: 6.0,
            height: 2.5,
            radius_jitter: 0.3,
            height_jitter: 0.3,
            azimuth_jitter: 0.15,
            focal_scale: 0.78,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub views: usize,
    pub max_persons: usize,
    pub joints: usize,
    pub workspace: Workspace,
    pub height: usize,
    pub width: usize,
    pub heatmap_sigma_px: f64,
    pub noise_std: f64,
    /// Expected number of distractor blobs per view and channel.
    pub distractor_rate: f64,
    /// Minimum horizontal distance between two persons' roots, meters.
    pub min_separation: f64,
    pub rig: RigConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            views: 5,
            max_persons: 3,
            joints: 5,
            workspace: Workspace::default(),
            height: 64,
            width: 64,
            heatmap_sigma_px: 2.0,
            noise_std: 0.0,
            distractor_rate: 0.0,
            min_separation: 0.5,
            rig: RigConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::Config("at least one view is required".into()));
        }
        if self.max_persons == 0 {
            return Err(Error::Config("max_persons must be at least 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("feature maps must be non-empty".into()));
        }
        if !(self.heatmap_sigma_px > 0.0) {
            return Err(Error::Config("heatmap_sigma_px must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.distractor_rate >= 0.0) || !(self.min_separation >= 0.0) {
            return Err(Error::Config(
                "noise_std, distractor_rate and min_separation must be non-negative".into(),
            ));
        }
        let r = &self.rig;
        if !(r.radius > 0.0 && r.focal_scale > 0.0 && r.radius_jitter >= 0.0 && r.height_jitter >= 0.0 && r.azimuth_jitter >= 0.0)
        {
            return Err(Error::Config(format!("invalid camera rig {r:?}")));
        }
        self.workspace.validate()?;
        SkeletonTemplate::for_joint_count(self.joints)?.validate()
    }

    /// Views in which every joint must be visible (two, or all of them when fewer exist).
    pub fn required_views(&self) -> usize {
        self.views.min(2)
    }
}

/// Ground-truth poses plus the per-view features a backbone would produce.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[N_gt, J, 3]`, meters.
    pub gt_poses: Array,
    pub cameras: Vec<CameraParams>,
    /// One `[J, H, W]` heatmap stack per view; values are exactly representable as `f32`.
    pub features: Vec<Array>,
    pub workspace: Workspace,
}

impl Scene {
    pub fn persons(&self) -> usize {
        self.gt_poses.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.gt_poses.shape()[1]
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn joint(&self, n: usize, j: usize) -> Vec3 {
        let d = self.gt_poses.data();
        let o = (n * self.joints() + j) * 3;
        Vec3::new(d[o], d[o + 1], d[o + 2])
    }

    pub fn feature_extent(&self) -> (usize, usize) {
        let s = self.features[0].shape();
        (s[1], s[2])
    }

    /// Checks shapes and the workspace/visibility invariants.
    pub fn validate(&self, required_views: usize) -> Result<()> {
        let s = self.gt_poses.shape();
        if s.len() != 3 || s[2] != 3 || s[0] == 0 {
            return Err(Error::Input(format!("gt poses have shape {s:?}")));
        }
        if self.cameras.is_empty() || self.features.len() != self.cameras.len() {
            return Err(Error::Input(format!(
                "{} cameras but {} feature maps",
                self.cameras.len(),
                self.features.len()
            )));
        }
        let fs = self.features[0].shape().to_vec();
        if fs.len() != 3 || self.features.iter().any(|f| f.shape() != fs.as_slice()) {
            return Err(Error::Input("feature maps differ in shape".into()));
        }
        for n in 0..self.persons() {
            for j in 0..self.joints() {
                let y = self.joint(n, j);
                if !self.workspace.contains(&y) {
                    return Err(Error::Input(format!("person {n} joint {j} leaves the workspace")));
                }
                let seen = self.cameras.iter().filter(|c| c.sees(&y)).count();
                if seen < required_views {
                    return Err(Error::Input(format!(
                        "person {n} joint {j} is visible in {seen} views"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for the `index`-th scene of a dataset.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index))
}

/// Cameras on a jittered ring, all looking at the workspace center.
pub fn ring_cameras(config: &SceneConfig, rng: &mut impl Rng) -> Result<Vec<CameraParams>> {
    let ws = &config.workspace;
    let target = ws.center();
    let rig = &config.rig;
    let focal = rig.focal_scale * config.width as f64;
    (0..config.views)
        .map(|v| {
            let az = 2.0 * PI * v as f64 / config.views as f64
                + rng.random_range(-1.0..=1.0) * rig.azimuth_jitter;
            let r = rig.radius + rng.random_range(-1.0..=1.0) * rig.radius_jitter;
            let z = ws.lo[2] + rig.height + rng.random_range(-1.0..=1.0) * rig.height_jitter;
            let eye = Vec3::new(target.x + r * az.cos(), target.y + r * az.sin(), z);
            CameraParams::look_at(eye, target, focal, config.width, config.height)
        })
        .collect()
}

/// Unit vector within `cone` radians of `axis`, uniform over the spherical cap.
fn sample_in_cone(axis: &Vec3, cone: f64, rng: &mut impl Rng) -> Vec3 {
    let a = axis.normalize();
    let cos_t = rng.random_range(cone.cos()..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = a.cross(&helper).normalize();
    let e2 = a.cross(&e1);
    a * cos_t + (e1 * phi.cos() + e2 * phi.sin()) * sin_t
}

fn sample_person(template: &SkeletonTemplate, ws: &Workspace, rng: &mut impl Rng) -> Vec<Vec3> {
    let (zlo, zhi) = template.root_height;
    let zlo = (ws.lo[2] + zlo).max(ws.lo[2]);
    let zhi = (ws.lo[2] + zhi).min(ws.hi[2]).max(zlo);
    let root = Vec3::new(
        rng.random_range(ws.lo[0]..=ws.hi[0]),
        rng.random_range(ws.lo[1]..=ws.hi[1]),
        rng.random_range(zlo..=zhi),
    );
    let yaw = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::z()), rng.random_range(0.0..2.0 * PI));
    let mut joints = vec![root];
    for c in 1..template.joint_count() {
        let b = template.bones[c].expect("validated template");
        let axis = yaw * Vec3::from(b.direction);
        let dir = sample_in_cone(&axis, b.cone, rng);
        let len = rng.random_range(b.length.0..=b.length.1);
        joints.push(joints[template.parent[c]] + dir * len);
    }
    joints
}

/// Per-joint-type Gaussian heatmaps for one view, max-combined over persons.
pub fn render_heatmaps(
    persons: &[Vec<Vec3>],
    cam: &CameraParams,
    joints: usize,
    h: usize,
    w: usize,
    sigma: f64,
) -> Array {
    let mut out = Array::zeros(&[joints, h, w]);
    let data = out.data_mut();
    let inv = 1.0 / (2.0 * sigma * sigma);
    for person in persons {
        for (j, y) in person.iter().enumerate() {
            let Ok([u, v]) = project(y, cam) else { continue };
            let gx: Vec<f64> = (0..w).map(|c| (-(c as f64 + 0.5 - u).powi(2) * inv).exp()).collect();
            let gy: Vec<f64> = (0..h).map(|r| (-(r as f64 + 0.5 - v).powi(2) * inv).exp()).collect();
            let plane = &mut data[j * h * w..(j + 1) * h * w];
            for r in 0..h {
                for c in 0..w {
                    let val = gy[r] * gx[c];
                    let cell = &mut plane[r * w + c];
                    if val > *cell {
                        *cell = val;
                    }
                }
            }
        }
    }
    out
}

fn add_distractors(map: &mut Array, rate: f64, sigma: f64, rng: &mut impl Rng) -> Result<()> {
    if rate <= 0.0 {
        return Ok(());
    }
    let (c_in, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let poisson = Poisson::new(rate).map_err(|e| Error::Config(format!("distractor rate: {e}")))?;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let data = map.data_mut();
    for ch in 0..c_in {
        let count = poisson.sample(rng) as usize;
        for _ in 0..count {
            let u = rng.random_range(0.0..w as f64);
            let v = rng.random_range(0.0..h as f64);
            let amp = rng.random_range(0.3..=1.0);
            for r in 0..h {
                for c in 0..w {
                    let d2 = (c as f64 + 0.5 - u).powi(2) + (r as f64 + 0.5 - v).powi(2);
                    let val = amp * (-d2 * inv).exp();
                    let cell = &mut data[ch * h * w + r * w + c];
                    if val > *cell {
                        *cell = val;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Minimum image distance, in heatmap standard deviations, between same-type joints of
/// two persons for a view to count as unambiguous.
pub const SEPARATION_SIGMAS: f64 = 2.5;

/// Whether every joint has at least `need` views in which it is visible and no other
/// person's same joint projects within `min_px`.
fn separable(persons: &[Vec<Vec3>], cameras: &[CameraParams], need: usize, min_px: f64) -> bool {
    let clear = |n: usize, j: usize, cam: &CameraParams| {
        let Ok(p) = project(&persons[n][j], cam) else {
            return false;
        };
        cam.sees(&persons[n][j])
            && persons.iter().enumerate().filter(|&(o, _)| o != n).all(|(_, other)| {
                project(&other[j], cam).map_or(true, |q| (q[0] - p[0]).hypot(q[1] - p[1]) >= min_px)
            })
    };
    (0..persons.len()).all(|n| {
        (0..persons[n].len()).all(|j| cameras.iter().filter(|c| clear(n, j, c)).count() >= need)
    })
}

/// Generates one scene; pure in `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let template = SkeletonTemplate::for_joint_count(config.joints)?;
    let ws = config.workspace;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = ring_cameras(config, &mut rng)?;
    let n_gt = rng.random_range(1..=config.max_persons);
    let need = config.required_views();
    let budget = 10 * config.max_persons;

    let mut persons: Vec<Vec<Vec3>> = Vec::with_capacity(n_gt);
    let mut attempts = 0;
    while persons.len() < n_gt {
        if attempts == budget {
            return Err(Error::Generation(format!(
                "person {} of {n_gt} not placed after {budget} attempts; the workspace is too small",
                persons.len() + 1
            )));
        }
        attempts += 1;
        let cand = sample_person(&template, &ws, &mut rng);
        let inside = cand.iter().all(|y| ws.contains(y));
        let visible = || {
            cand.iter()
                .all(|y| cameras.iter().filter(|c| c.sees(y)).count() >= need)
        };
        let apart = || {
            persons.iter().all(|p| {
                let d = p[0] - cand[0];
                d.x.hypot(d.y) >= config.min_separation
            })
        };
        if inside && apart() && visible() {
            persons.push(cand);
            if separable(&persons, &cameras, need, SEPARATION_SIGMAS * config.heatmap_sigma_px) {
                attempts = 0;
            } else {
                persons.pop();
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let mut features = Vec::with_capacity(config.views);
    for cam in &cameras {
        let mut map = render_heatmaps(
            &persons,
            cam,
            config.joints,
            config.height,
            config.width,
            config.heatmap_sigma_px,
        );
        add_distractors(&mut map, config.distractor_rate, config.heatmap_sigma_px, &mut rng)?;
        for x in map.data_mut() {
            if config.noise_std > 0.0 {
                *x += noise.sample(&mut rng);
            }
            // features are stored as 32-bit floats
            *x = *x as f32 as f64;
        }
        features.push(map);
    }

    let gt: Vec<f64> = persons.iter().flatten().flat_map(|y| [y.x, y.y, y.z]).collect();
    Ok(Scene {
        gt_poses: Array::new(&[n_gt, config.joints, 3], gt)?,
        cameras,
        features,
        workspace: ws,
    })
}

/// `count` scenes from the seed stream `scene_seed(base_seed, 0)`, `scene_seed(base_seed, 1)`, ...
///
/// Seeds whose rejection sampling runs out of attempts are skipped, so the result depends
/// only on `base_seed`, `count` and `config`. Fails if more than `count` seeds in a row
/// (plus a small allowance) cannot be realized.
pub fn generate_scenes(base_seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<Scene>> {
    let mut scenes = Vec::with_capacity(count);
    let mut failures = 0usize;
    let mut index = 0u64;
    while scenes.len() < count {
        match generate_scene(scene_seed(base_seed, index), config) {
            Ok(s) => scenes.push(s),
            Err(Error::Generation(msg)) => {
                failures += 1;
                log::debug!("skipping scene seed index {index}: {msg}");
                if failures > count + 16 {
                    return Err(Error::Generation(format!(
                        "{failures} of {} seeds failed; last: {msg}",
                        index + 1
                    )));
                }
            }
            Err(e) => return Err(e),
        }
        index += 1;
    }
    Ok(scenes)
}
