use serde::{Deserialize, Serialize};

use crate::camgeom::Vec3;
use crate::error::{Error, Result};

/// Axis-aligned box containing every person, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for Workspace {
    /// 4 m x 4 m floor area, 2 m tall, centered on the origin in x and y.
    fn default() -> Self {
        Self {
            lo: [-2.0, -2.0, 0.0],
            hi: [2.0, 2.0, 2.0],
        }
    }
}

impl Workspace {
    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|k| !(self.hi[k] > self.lo[k])) || !self.lo.iter().chain(&self.hi).all(|v| v.is_finite()) {
            return Err(Error::Config(format!("degenerate workspace {self:?}")));
        }
        Ok(())
    }

    pub fn extents(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| self.hi[k] - self.lo[k])
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.lo[0] + self.hi[0]),
            0.5 * (self.lo[1] + self.hi[1]),
            0.5 * (self.lo[2] + self.hi[2]),
        )
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }
}
