use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workspace::Workspace;

/// How joint queries are parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// One free embedding per (person slot, joint).
    PerJoint,
    /// `q[n, j] = h[n] + l[j]`.
    Hierarchical,
    /// `q[n, j] = g + h[n] + l[j]` with `g` pooled from the input views.
    HierarchicalAdaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Sample `K` offset points around each joint's projection in every view.
    Projective,
    /// Attend to every location of every view.
    Dense,
}

/// Extra channels concatenated to the feature maps before the 1x1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    /// Unit world-frame camera ray per feature cell (3 channels).
    Rays,
    /// Normalized cell coordinates in `[0, 1]` (2 channels).
    Coords2d,
    None,
}

impl PosEncoding {
    pub fn channels(self) -> usize {
        match self {
            PosEncoding::Rays => 3,
            PosEncoding::Coords2d => 2,
            PosEncoding::None => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Person slots `N`.
    pub persons: usize,
    /// Joints per person `J`.
    pub joints: usize,
    /// Input feature channels (one heatmap per joint type).
    pub in_channels: usize,
    /// Embedding width `C`.
    pub channels: usize,
    pub views: usize,
    /// Decoder layers `L`.
    pub layers: usize,
    /// Sampling points per view `K`.
    pub points: usize,
    /// Self-attention heads.
    pub heads: usize,
    /// Hidden width of the feed-forward block; `None` means `4 * channels`.
    pub ffn_width: Option<usize>,
    pub query_mode: QueryMode,
    pub attention: AttentionMode,
    pub pos_encoding: PosEncoding,
    pub workspace: Workspace,
    /// Let gradients flow through the projected anchors into earlier positions.
    pub differentiable_anchors: bool,
    /// Largest `V * H * W` the dense attention accepts.
    pub dense_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            persons: 5,
            joints: 5,
            in_channels: 5,
            channels: 64,
            views: 5,
            layers: 6,
            points: 4,
            heads: 4,
            ffn_width: None,
            query_mode: QueryMode::HierarchicalAdaptive,
            attention: AttentionMode::Projective,
            pos_encoding: PosEncoding::Rays,
            workspace: Workspace::default(),
            differentiable_anchors: false,
            dense_cap: 1 << 16,
        }
    }
}

impl ModelConfig {
    pub fn ffn(&self) -> usize {
        self.ffn_width.unwrap_or(4 * self.channels)
    }

    /// Joint queries `M = N * J`.
    pub fn queries(&self) -> usize {
        self.persons * self.joints
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("persons", self.persons),
            ("joints", self.joints),
            ("in_channels", self.in_channels),
            ("channels", self.channels),
            ("views", self.views),
            ("layers", self.layers),
            ("points", self.points),
            ("heads", self.heads),
            ("ffn_width", self.ffn()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        self.workspace.validate()
    }

    /// Number of query-embedding parameters: `(N + J) * C` for the hierarchical modes and
    /// `N * J * C` per joint. The adaptation weight is not an embedding and is excluded.
    pub fn query_embedding_params(&self) -> usize {
        match self.query_mode {
            QueryMode::PerJoint => self.persons * self.joints * self.channels,
            QueryMode::Hierarchical | QueryMode::HierarchicalAdaptive => {
                (self.persons + self.joints) * self.channels
            }
        }
    }
}
