use crate::error::{Error, Result};

/// How a bone leaves its parent, in a person-local frame (`x` forward, `y` left, `z` up).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoneSpec {
    /// Mean direction (need not be normalized).
    pub direction: [f64; 3],
    /// Maximum angle from `direction`, radians.
    pub cone: f64,
    /// Bone length range in meters.
    pub length: (f64, f64),
}

/// Kinematic tree of one person.
///
/// Joints are ordered so that every parent precedes its children; the root is
/// its own parent and carries no bone.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTemplate {
    pub joint_names: Vec<&'static str>,
    pub parent: Vec<usize>,
    /// Indexed by child joint; `None` for the root.
    pub bones: Vec<Option<BoneSpec>>,
    /// Range of the root height above the floor, meters.
    pub root_height: (f64, f64),
}

fn bone(direction: [f64; 3], cone_deg: f64, lo: f64, hi: f64) -> Option<BoneSpec> {
    Some(BoneSpec {
        direction,
        cone: cone_deg.to_radians(),
        length: (lo, hi),
    })
}

impl SkeletonTemplate {
    /// Pelvis, neck, head, left hand, right hand.
    pub fn desk5() -> Self {
        Self {
            joint_names: vec!["pelvis", "neck", "head", "left_hand", "right_hand"],
            parent: vec![0, 0, 1, 1, 1],
            bones: vec![
                None,
                bone([0.0, 0.0, 1.0], 15.0, 0.45, 0.60),
                bone([0.0, 0.0, 1.0], 20.0, 0.15, 0.25),
                bone([0.3, 0.7, -0.7], 45.0, 0.50, 0.70),
                bone([0.3, -0.7, -0.7], 45.0, 0.50, 0.70),
            ],
            root_height: (0.85, 1.10),
        }
    }

    /// Fifteen-joint humanoid: torso, head, arms and legs.
    pub fn humanoid15() -> Self {
        Self {
            joint_names: vec![
                "pelvis",
                "neck",
                "head",
                "left_shoulder",
                "left_elbow",
                "left_wrist",
                "right_shoulder",
                "right_elbow",
                "right_wrist",
                "left_hip",
                "left_knee",
                "left_ankle",
                "right_hip",
                "right_knee",
                "right_ankle",
            ],
            parent: vec![0, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13],
            bones: vec![
                None,
                bone([0.0, 0.0, 1.0], 12.0, 0.45, 0.58),
                bone([0.0, 0.0, 1.0], 20.0, 0.15, 0.25),
                bone([0.0, 1.0, -0.1], 15.0, 0.15, 0.22),
                bone([0.0, 0.2, -1.0], 40.0, 0.25, 0.32),
                bone([0.4, 0.0, -1.0], 60.0, 0.22, 0.30),
                bone([0.0, -1.0, -0.1], 15.0, 0.15, 0.22),
                bone([0.0, -0.2, -1.0], 40.0, 0.25, 0.32),
                bone([0.4, 0.0, -1.0], 60.0, 0.22, 0.30),
                bone([0.0, 1.0, -0.6], 15.0, 0.08, 0.12),
                bone([0.0, 0.0, -1.0], 20.0, 0.36, 0.42),
                bone([0.0, 0.0, -1.0], 20.0, 0.36, 0.42),
                bone([0.0, -1.0, -0.6], 15.0, 0.08, 0.12),
                bone([0.0, 0.0, -1.0], 20.0, 0.36, 0.42),
                bone([0.0, 0.0, -1.0], 20.0, 0.36, 0.42),
            ],
            root_height: (0.95, 1.05),
        }
    }

    /// Template with `joints` joints (5 or 15).
    pub fn for_joint_count(joints: usize) -> Result<Self> {
        match joints {
            5 => Ok(Self::desk5()),
            15 => Ok(Self::humanoid15()),
            j => Err(Error::Config(format!(
                "no skeleton template with {j} joints (available: 5, 15)"
            ))),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> usize {
        0
    }

    /// `(parent, child)` pairs, one per bone.
    pub fn limbs(&self) -> Vec<(usize, usize)> {
        (0..self.joint_count())
            .filter(|&j| self.parent[j] != j)
            .map(|j| (self.parent[j], j))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if j == 0 || self.joint_names.len() != j || self.bones.len() != j {
            return Err(Error::Config("template arrays disagree in length".into()));
        }
        if self.parent[0] != 0 {
            return Err(Error::Config("joint 0 must be the root".into()));
        }
        for c in 1..j {
            // parents precede children, so the parent array is a tree rooted at 0
            if self.parent[c] >= c {
                return Err(Error::Config(format!(
                    "joint {c} has parent {} which does not precede it",
                    self.parent[c]
                )));
            }
            let b = self.bones[c]
                .ok_or_else(|| Error::Config(format!("joint {c} has no bone")))?;
            let (lo, hi) = b.length;
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!("joint {c} has bone range ({lo}, {hi})")));
            }
            if b.direction.iter().all(|&d| d == 0.0) || !(0.0..=std::f64::consts::PI).contains(&b.cone) {
                return Err(Error::Config(format!("joint {c} has an invalid direction cone")));
            }
        }
        if self.bones[0].is_some() {
            return Err(Error::Config("the root carries no bone".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_templates_are_valid_trees() {
        for t in [SkeletonTemplate::desk5(), SkeletonTemplate::humanoid15()] {
            t.validate().unwrap();
            assert_eq!(t.limbs().len(), t.joint_count() - 1);
        }
    }

    #[test]
    fn cycle_is_rejected() {
        let mut t = SkeletonTemplate::desk5();
        t.parent[1] = 2;
        assert!(t.validate().is_err());
    }

    #[test]
    fn unknown_joint_count_is_a_config_error() {
        assert!(matches!(
            SkeletonTemplate::for_joint_count(7),
            Err(Error::Config(_))
        ));
    }
}
