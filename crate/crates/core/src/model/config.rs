use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionMode, Conv2d, EsamConfig, MoeFsConfig, MsgmConfig};
use crate::error::{Error, Result};

/// Gating-module widths; the channel count comes from [`SsiuConfig`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsgmSettings {
    pub hidden_channels: usize,
    pub dw_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsamSettings {
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub block_size: usize,
    pub overlap: usize,
    pub num_heads: usize,
}

/// Every architectural hyperparameter of the network.
///
/// The defaults are calibrated so that the ×2 and ×4 models land near a
/// ~0.78–0.79 M parameter budget and ~49 GFLOPs for a 1280×720 ×4 output;
/// see `configs/` at the repository root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsiuConfig {
    pub scale: usize,
    pub channels: usize,
    pub num_stages: usize,
    /// 1-based stage indices whose outputs feed the expert selector.
    pub moe_taps: Vec<usize>,
    pub use_moe_fs: bool,
    pub attention_mode: AttentionMode,
    pub msgm: MsgmSettings,
    pub esam: EsamSettings,
}

pub const DEFAULT_HIDDEN_CHANNELS: usize = 26;

impl Default for SsiuConfig {
    fn default() -> Self {
        SsiuConfig {
            scale: 4,
            channels: 64,
            num_stages: 9,
            moe_taps: vec![3, 6, 9],
            use_moe_fs: true,
            attention_mode: AttentionMode::Sparse,
            msgm: MsgmSettings {
                hidden_channels: DEFAULT_HIDDEN_CHANNELS,
                dw_kernel: 3,
            },
            esam: EsamSettings {
                pool_kernel: 2,
                pool_stride: 2,
                block_size: 8,
                overlap: 2,
                num_heads: 4,
            },
        }
    }
}

impl Default for MsgmSettings {
    fn default() -> Self {
        SsiuConfig::default().msgm
    }
}

impl Default for EsamSettings {
    fn default() -> Self {
        SsiuConfig::default().esam
    }
}

impl SsiuConfig {
    pub fn with_scale(scale: usize) -> Self {
        SsiuConfig {
            scale,
            ..Self::default()
        }
    }

    /// Taps splitting `num_stages` into `groups` equal (or near-equal) runs.
    pub fn even_taps(num_stages: usize, groups: usize) -> Vec<usize> {
        (1..=groups).map(|g| (g * num_stages).div_ceil(groups)).collect()
    }

    pub fn msgm_config(&self) -> MsgmConfig {
        MsgmConfig {
            channels: self.channels,
            hidden_channels: self.msgm.hidden_channels,
            dw_kernel: self.msgm.dw_kernel,
        }
    }

    pub fn esam_config(&self) -> EsamConfig {
        let e = &self.esam;
        EsamConfig {
            channels: self.channels,
            pool_kernel: e.pool_kernel,
            pool_stride: e.pool_stride,
            block_size: e.block_size,
            overlap: e.overlap,
            num_heads: e.num_heads,
        }
    }

    pub fn moe_config(&self) -> MoeFsConfig {
        MoeFsConfig {
            channels: self.channels,
            num_experts: self.moe_taps.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: String| Error::Config {
            field: format!("model.{f}"),
            message: m,
        };
        if !(2..=4).contains(&self.scale) {
            return Err(field("scale", format!("must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.channels == 0 {
            return Err(field("channels", "must be positive".into()));
        }
        self.msgm_config()
            .validate()
            .map_err(|e| field("msgm", e.to_string()))?;
        self.esam_config()
            .validate()
            .map_err(|e| field("esam", e.to_string()))?;
        if self.use_moe_fs {
            self.moe_config()
                .validate()
                .map_err(|e| field("moe_taps", e.to_string()))?;
            if self.num_stages < self.moe_taps.len() {
                return Err(field(
                    "num_stages",
                    format!(
                        "{} stages cannot feed {} experts",
                        self.num_stages,
                        self.moe_taps.len()
                    ),
                ));
            }
            if self.moe_taps.windows(2).any(|w| w[0] >= w[1]) || self.moe_taps[0] == 0 {
                return Err(field(
                    "moe_taps",
                    "must be strictly increasing 1-based stage indices".into(),
                ));
            }
            if self.moe_taps.last() != Some(&self.num_stages) {
                return Err(field("moe_taps", "last tap must equal num_stages".into()));
            }
        }
        Ok(())
    }

    pub fn stage_param_count(&self) -> usize {
        let c = self.channels;
        2 * 2 * c + 4 * self.msgm_config().param_count() + self.esam_config().param_count()
    }

    pub fn head_param_count(&self) -> usize {
        let (c, s) = (self.channels, self.scale);
        Conv2d::param_count(3, c, 3, 1)
            + Conv2d::param_count(c, c * s * s, 1, 1)
            + Conv2d::param_count(c, 3, 3, 1)
    }

    /// Scalar parameter count derived from the configuration alone.
    pub fn param_count(&self) -> usize {
        let moe = if self.use_moe_fs {
            self.moe_config().param_count()
        } else {
            0
        };
        self.head_param_count() + self.num_stages * self.stage_param_count() + moe
    }
}
