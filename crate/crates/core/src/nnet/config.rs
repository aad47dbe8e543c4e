use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{MaskFusion, N_CHANNELS};

/// Number of residual groups in the body.
pub const N_GROUPS: usize = 4;

/// Architecture of the residual regressor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Stride of the 3x3 stem convolution.
    pub stem_stride: usize,
    /// `(blocks, bottleneck width)` per residual group.
    pub groups: Vec<(usize, usize)>,
    /// Stride of the first block of each group.
    pub group_strides: Vec<usize>,
    /// Output channels of a block are `expansion * width`.
    pub expansion: usize,
    pub fc_hidden: usize,
    pub input_hw: (usize, usize),
    /// How the mask channel is combined with the depth maps at the input.
    pub fusion: MaskFusion,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: N_CHANNELS,
            stem_channels: 16,
            stem_stride: 1,
            groups: vec![(2, 16), (2, 32), (2, 64), (2, 128)],
            group_strides: vec![1, 2, 2, 2],
            expansion: 4,
            fc_hidden: 64,
            input_hw: (80, 80),
            fusion: MaskFusion::Multiply,
        }
    }
}

impl NetConfig {
    /// Small network that trains in minutes on a single core.
    pub fn compact() -> Self {
        Self {
            in_channels: N_CHANNELS,
            stem_channels: 8,
            stem_stride: 2,
            groups: vec![(1, 4), (1, 8), (1, 16), (1, 16)],
            group_strides: vec![1, 2, 2, 2],
            expansion: 2,
            fc_hidden: 32,
            input_hw: (80, 80),
            fusion: MaskFusion::Multiply,
        }
    }

    /// Tiny network used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            in_channels: N_CHANNELS,
            stem_channels: 2,
            stem_stride: 1,
            groups: vec![(1, 1), (1, 1), (1, 1), (1, 1)],
            group_strides: vec![1, 2, 1, 2],
            expansion: 2,
            fc_hidden: 3,
            input_hw: (6, 6),
            fusion: MaskFusion::Multiply,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.groups.len() != N_GROUPS {
            return bad(format!("net: expected {N_GROUPS} residual groups, got {}", self.groups.len()));
        }
        if self.group_strides.len() != N_GROUPS {
            return bad(format!("net: expected {N_GROUPS} group strides, got {}", self.group_strides.len()));
        }
        if self.in_channels != N_CHANNELS {
            return bad(format!("net: in_channels must be {N_CHANNELS}, got {}", self.in_channels));
        }
        let counts = [
            ("stem_channels", self.stem_channels),
            ("stem_stride", self.stem_stride),
            ("expansion", self.expansion),
            ("fc_hidden", self.fc_hidden),
            ("input height", self.input_hw.0),
            ("input width", self.input_hw.1),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("net: {name} must be >= 1"));
            }
        }
        for (i, ((blocks, width), stride)) in self.groups.iter().zip(&self.group_strides).enumerate() {
            if *blocks == 0 || *width == 0 || *stride == 0 {
                return bad(format!("net: group {} has a zero count", i + 1));
            }
        }
        Ok(())
    }

    /// Channels leaving the last group.
    pub fn feature_channels(&self) -> usize {
        self.groups.last().map_or(self.stem_channels, |g| g.1 * self.expansion)
    }
}
