//! `MVPD` dataset files.
//!
//! ```text
//! magic   "MVPD"
//! u32     version (1)
//! u32     scene count
//! per scene:
//!   u32 x6  V, N_gt, J, C_in, H, W
//!   f64 x6  workspace lo (x, y, z), hi (x, y, z)
//!   f64 x18 per camera: fx, fy, cx, cy, R (row-major, 9), t (3), width, height
//!   f64     N_gt * J * 3 ground-truth coordinates, person-major
//!   f32     V * C_in * H * W feature values, view-major
//!   u32     CRC32 of the scene bytes above
//! ```
//!
//! All values are little-endian.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::Scene;
use crate::autodiff::Array;
use crate::binio::{ByteReader, ByteWriter};
use crate::camgeom::CameraParams;
use crate::error::{Error, Result};
use crate::workspace::Workspace;

const MAGIC: &[u8; 4] = b"MVPD";
pub const DATASET_VERSION: u32 = 1;

fn encode_scene(w: &mut ByteWriter, s: &Scene) -> Result<()> {
    s.validate(0)?;
    let start = w.buf.len();
    let (h, wd) = s.feature_extent();
    let c_in = s.features[0].shape()[0];
    for d in [s.views(), s.persons(), s.joints(), c_in, h, wd] {
        w.len_u32(d)?;
    }
    for v in s.workspace.lo.iter().chain(&s.workspace.hi) {
        w.f64(*v);
    }
    for c in &s.cameras {
        for v in [c.fx, c.fy, c.cx, c.cy] {
            w.f64(v);
        }
        for r in 0..3 {
            for k in 0..3 {
                w.f64(c.rotation[(r, k)]);
            }
        }
        for k in 0..3 {
            w.f64(c.translation[k]);
        }
        w.f64(c.width as f64);
        w.f64(c.height as f64);
    }
    for v in s.gt_poses.data() {
        w.f64(*v);
    }
    for f in &s.features {
        for v in f.data() {
            w.f32(*v as f32);
        }
    }
    let crc = crc32fast::hash(&w.buf[start..]);
    w.u32(crc);
    Ok(())
}

fn extent(v: f64, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || !(1.0..=1e9).contains(&v) {
        return Err(Error::Format(format!("camera {what} {v} is not a positive integer")));
    }
    Ok(v as usize)
}

fn decode_scene(r: &mut ByteReader, index: usize) -> Result<Scene> {
    let start = r.pos();
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [v, n, j, c_in, h, w] = dims;
    if dims.contains(&0) {
        return Err(Error::Format(format!("scene {index} has a zero dimension {dims:?}")));
    }
    let [v128, n128, j128] = [v, n, j].map(|d| d as u128);
    let payload = (6 + 18 * v128 + n128 * j128 * 3) * 8
        + dims[3..].iter().fold(v128 * 4, |acc, &d| acc * d as u128)
        + 4;
    if payload > r.remaining() as u128 {
        return Err(Error::Truncated(format!(
            "scene {index} needs {payload} bytes, {} left",
            r.remaining()
        )));
    }
    let mut ws = [0.0; 6];
    for x in &mut ws {
        *x = r.f64()?;
    }
    let mut raw_cams = Vec::with_capacity(v);
    for _ in 0..v {
        let mut c = [0.0; 18];
        for x in &mut c {
            *x = r.f64()?;
        }
        raw_cams.push(c);
    }
    let gt: Vec<f64> = (0..n * j * 3).map(|_| r.f64()).collect::<Result<_>>()?;
    let mut features = Vec::with_capacity(v);
    for _ in 0..v {
        let data: Vec<f64> = (0..c_in * h * w)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<_>>()?;
        features.push(Array::new(&[c_in, h, w], data)?);
    }
    let end = r.pos();
    let stored = r.u32()?;
    let computed = crc32fast::hash(r.slice(start, end));
    if stored != computed {
        return Err(Error::Checksum {
            what: format!("scene {index}"),
            stored,
            computed,
        });
    }
    let cameras = raw_cams
        .iter()
        .map(|c| {
            CameraParams::new(
                c[0],
                c[1],
                c[2],
                c[3],
                Matrix3::from_row_slice(&c[4..13]),
                Vector3::new(c[13], c[14], c[15]),
                extent(c[16], "width")?,
                extent(c[17], "height")?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let workspace = Workspace {
        lo: [ws[0], ws[1], ws[2]],
        hi: [ws[3], ws[4], ws[5]],
    };
    workspace.validate()?;
    Ok(Scene {
        gt_poses: Array::new(&[n, j, 3], gt)?,
        cameras,
        features,
        workspace,
    })
}

/// Serializes `scenes` to bytes in the `MVPD` format.
pub fn encode_dataset(scenes: &[Scene]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(DATASET_VERSION);
    w.len_u32(scenes.len())?;
    for s in scenes {
        encode_scene(&mut w, s)?;
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Scene>> {
    let mut r = ByteReader::new(bytes, "dataset");
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an MVPD dataset (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    // a scene record is at least 6 u32 dims, the workspace and the checksum
    let count = r.count(6 * 4 + 6 * 8 + 4)?;
    let scenes = (0..count)
        .map(|i| decode_scene(&mut r, i))
        .collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(scenes)
}

pub fn write_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(scenes)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    decode_dataset(&crate::binio::read_file(path.as_ref())?)
}
