use serde::{Deserialize, Serialize};

use super::{Layer, Network};
use crate::error::{Error, Result};

/// FSRCNN-style branch. Only `d` (the width of the first conv and of the
/// deconv input) changes between branches by default; `m` is the depth knob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsrcnnConfig {
    pub d: usize,
    #[serde(default = "default_shrink")]
    pub s: usize,
    #[serde(default = "default_mapping")]
    pub m: usize,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_shrink() -> usize {
    12
}
fn default_mapping() -> usize {
    4
}
fn default_scale() -> usize {
    4
}
fn default_channels() -> usize {
    1
}

impl Default for FsrcnnConfig {
    fn default() -> Self {
        Self::with_width(56)
    }
}

impl FsrcnnConfig {
    pub fn with_width(d: usize) -> Self {
        FsrcnnConfig {
            d,
            s: default_shrink(),
            m: default_mapping(),
            scale: default_scale(),
            channels: default_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s < 1 || self.d < self.s || self.scale < 1 || self.channels < 1 {
            return Err(Error::InvalidArgument(format!(
                "invalid FSRCNN config {self:?}: need d >= s >= 1, scale >= 1, channels >= 1"
            )));
        }
        Ok(())
    }
}

/// Feature extraction (5x5, d) -> shrink (1x1, s) -> m x mapping (3x3, s)
/// -> expand (1x1, d) -> 9x9 deconvolution with stride `scale`.
pub fn build_fsrcnn(cfg: &FsrcnnConfig) -> Result<Network> {
    cfg.validate()?;
    let conv = |cin, cout, k: usize| Layer::Conv {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride: 1,
        padding: k / 2,
    };
    let mut layers = vec![
        conv(cfg.channels, cfg.d, 5),
        Layer::Prelu { channels: cfg.d },
        conv(cfg.d, cfg.s, 1),
        Layer::Prelu { channels: cfg.s },
    ];
    for _ in 0..cfg.m {
        layers.push(conv(cfg.s, cfg.s, 3));
        layers.push(Layer::Prelu { channels: cfg.s });
    }
    layers.push(conv(cfg.s, cfg.d, 1));
    layers.push(Layer::Prelu { channels: cfg.d });
    layers.push(Layer::ConvTranspose {
        in_channels: cfg.d,
        out_channels: cfg.channels,
        kernel: 9,
        stride: cfg.scale,
        padding: 4,
        output_padding: cfg.scale - 1,
    });
    Ok(Network::new(layers))
}
