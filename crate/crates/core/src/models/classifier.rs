use serde::{Deserialize, Serialize};

use super::{Layer, Network, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Five 3x3 conv + ReLU layers, global average pooling, a fully connected
/// layer to `classes` logits, and a softmax.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_strides")]
    pub strides: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_widths() -> Vec<usize> {
    vec![16, 32, 32, 32, 32]
}
fn default_strides() -> Vec<usize> {
    vec![1, 2, 1, 2, 1]
}
fn default_kernel() -> usize {
    3
}
fn default_classes() -> usize {
    3
}
fn default_in_channels() -> usize {
    1
}

impl Default for ClassConfig {
    fn default() -> Self {
        ClassConfig {
            widths: default_widths(),
            strides: default_strides(),
            kernel: default_kernel(),
            classes: default_classes(),
            in_channels: default_in_channels(),
        }
    }
}

impl ClassConfig {
    pub fn with_classes(classes: usize) -> Self {
        ClassConfig {
            classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 5 || self.strides.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "class module needs exactly five conv layers, got {} widths and {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.contains(&0)
            || self.strides.contains(&0)
            || self.kernel == 0
            || self.classes < 2
            || self.in_channels == 0
        {
            return Err(Error::InvalidArgument(format!("invalid class module config {self:?}")));
        }
        Ok(())
    }
}

pub fn build_class_module(cfg: &ClassConfig) -> Result<Network> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(13);
    let mut cin = cfg.in_channels;
    for (&w, &s) in cfg.widths.iter().zip(&cfg.strides) {
        layers.push(Layer::Conv {
            in_channels: cin,
            out_channels: w,
            kernel: cfg.kernel,
            stride: s,
            padding: cfg.kernel / 2,
        });
        layers.push(Layer::Relu);
        cin = w;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear {
        in_features: cin,
        out_features: cfg.classes,
    });
    layers.push(Layer::Softmax);
    Ok(Network::new(layers))
}

/// The tile classifier together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassModule {
    pub config: ClassConfig,
    pub network: Network,
    pub params: ParamSet,
}

impl ClassModule {
    pub fn new(config: ClassConfig, seed: u64) -> Result<Self> {
        let network = build_class_module(&config)?;
        let params = network.init(seed);
        Ok(ClassModule {
            config,
            network,
            params,
        })
    }

    pub fn with_params(config: ClassConfig, params: ParamSet) -> Result<Self> {
        let network = build_class_module(&config)?;
        network.check_params(&params)?;
        Ok(ClassModule {
            config,
            network,
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// `[N, M]` probabilities for a batch of `[N, C, h, w]` tiles.
    pub fn probabilities(&self, tiles: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.network.infer(&self.params, tiles)
    }

    pub fn flops(&self, tile_shape: &[usize]) -> Result<u64> {
        self.network.flops(tile_shape)
    }
}
