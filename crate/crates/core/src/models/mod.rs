//! Network definitions.
//!
//! Every network is a flat [`Layer`] list. The same list drives parameter
//! initialization, the differentiable forward pass, static shape inference and
//! FLOPs counting, so the cost model can never drift from what actually runs.
//!
//! FLOPs convention (per sample):
//!
//! * convolution: `2 * K * K * Cin * Cout * Hout * Wout`, plus `Cout * Hout * Wout` for the bias
//! * transposed convolution: counted as the equivalent convolution over its
//!   output grid, i.e. the same formula with the transposed conv's output size
//! * activation (PReLU, ReLU, softmax): 1 per element
//! * global average pooling: 1 per input element
//! * fully connected: `2 * In * Out + Out`

mod classifier;
mod container;
mod fsrcnn;

pub use classifier::{build_class_module, ClassConfig, ClassModule};
pub use container::{Branch, ModelDescriptor, SrContainer};
pub use fsrcnn::{build_fsrcnn, FsrcnnConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// PReLU slopes start here.
pub const PRELU_INIT: f32 = 0.25;

/// Standard deviation of the final transposed-conv weights at init.
pub const DECONV_INIT_STD: f64 = 1e-3;

/// Standard deviation of fully connected weights at init. Small, so the
/// class module starts out close to uniform.
pub const LINEAR_INIT_STD: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    Prelu {
        channels: usize,
    },
    Relu,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

impl Layer {
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            Layer::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![in_channels, out_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            Layer::Prelu { channels } => vec![("slope", vec![channels])],
            Layer::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            Layer::Relu | Layer::GlobalAvgPool | Layer::Softmax => vec![],
        }
    }

    /// Per-sample output shape and FLOPs for a per-sample input shape.
    fn propagate(&self, shape: &[usize]) -> Result<(Vec<usize>, u64)> {
        let numel: usize = shape.iter().product();
        let spatial = |op: &'static str| -> Result<(usize, usize, usize)> {
            match *shape {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::shape(op, format!("expected [C, H, W], got {shape:?}"))),
            }
        };
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = spatial("conv")?;
                if c != in_channels || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::shape(
                        "conv",
                        format!("layer {self:?} cannot take input {shape:?}"),
                    ));
                }
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                let out = (out_channels * ho * wo) as u64;
                let macs = (kernel * kernel * in_channels) as u64 * out;
                Ok((vec![out_channels, ho, wo], 2 * macs + out))
            }
            Layer::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
            } => {
                let (c, h, w) = spatial("conv_transpose")?;
                let side = |d: usize| ((d - 1) * stride + kernel + output_padding).checked_sub(2 * padding);
                let (Some(ho), Some(wo)) = (side(h), side(w)) else {
                    return Err(Error::shape("conv_transpose", format!("input {shape:?} too small")));
                };
                if c != in_channels {
                    return Err(Error::shape(
                        "conv_transpose",
                        format!("layer {self:?} cannot take input {shape:?}"),
                    ));
                }
                let out = (out_channels * ho * wo) as u64;
                let macs = (kernel * kernel * in_channels) as u64 * out;
                Ok((vec![out_channels, ho, wo], 2 * macs + out))
            }
            Layer::Prelu { channels } => {
                if shape.first() != Some(&channels) {
                    return Err(Error::shape("prelu", format!("{channels} slopes for {shape:?}")));
                }
                Ok((shape.to_vec(), numel as u64))
            }
            Layer::Relu | Layer::Softmax => Ok((shape.to_vec(), numel as u64)),
            Layer::GlobalAvgPool => {
                let (c, _, _) = spatial("global_avg_pool")?;
                Ok((vec![c], numel as u64))
            }
            Layer::Linear {
                in_features,
                out_features,
            } => {
                if shape != [in_features] {
                    return Err(Error::shape("linear", format!("{in_features} inputs for {shape:?}")));
                }
                Ok((vec![out_features], (2 * in_features * out_features + out_features) as u64))
            }
        }
    }
}

/// Named parameter tensors, in the order the owning network consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamSet {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(ParamSet { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.cast(), trainable))
            .collect()
    }

    pub fn map_tensors(&mut self, mut f: impl FnMut(&str, &mut Tensor<f32>)) {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            f(n, t);
        }
    }
}

/// A feed-forward stack of layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.param_shapes()
                    .into_iter()
                    .map(move |(n, s)| (format!("{i}.{n}"), s))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Seeded initialization: Kaiming-normal (fan-in) for convolutions and
    /// fully connected layers, a small Gaussian for transposed convolutions,
    /// zero biases and PReLU slopes of 0.25.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, shape) in layer.param_shapes() {
                let t = match (layer, name) {
                    (Layer::Prelu { .. }, _) => Tensor::full(&shape, PRELU_INIT),
                    (_, "bias") => Tensor::zeros(&shape),
                    (Layer::ConvTranspose { .. }, _) => gaussian(&mut rng, &shape, DECONV_INIT_STD),
                    (Layer::Conv { .. }, _) => {
                        let fan_in = shape[1] * shape[2] * shape[3];
                        gaussian(&mut rng, &shape, (2.0 / fan_in as f64).sqrt())
                    }
                    _ => gaussian(&mut rng, &shape, LINEAR_INIT_STD),
                };
                names.push(format!("{i}.{name}"));
                tensors.push(t);
            }
        }
        ParamSet { names, tensors }
    }

    /// Parameters with the right names and shapes but every value zero.
    pub fn zeros(&self) -> ParamSet {
        let (names, tensors) = self
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .unzip();
        ParamSet { names, tensors }
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "network expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&params.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Differentiable forward pass of a batch. `params` come from
    /// [`ParamSet::bind`] in declaration order.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, input: Var, params: &[Var]) -> Result<Var> {
        let mut x = input;
        let mut p = params.iter().copied();
        let mut next = |what: &str| {
            p.next()
                .ok_or_else(|| Error::InvalidArgument(format!("missing {what} parameter")))
        };
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv {
                    stride, padding, ..
                } => {
                    let (w, b) = (next("conv weight")?, next("conv bias")?);
                    tape.conv2d(x, w, Some(b), stride, padding)?
                }
                Layer::ConvTranspose {
                    stride,
                    padding,
                    output_padding,
                    ..
                } => {
                    let (w, b) = (next("deconv weight")?, next("deconv bias")?);
                    tape.conv_transpose2d(x, w, Some(b), stride, padding, output_padding)?
                }
                Layer::Prelu { .. } => {
                    let a = next("prelu slope")?;
                    tape.prelu(x, a)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Linear { .. } => {
                    let (w, b) = (next("linear weight")?, next("linear bias")?);
                    tape.linear(x, w, Some(b))?
                }
                Layer::Softmax => tape.softmax(x)?,
            };
        }
        Ok(x)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, params: &ParamSet, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false)?;
        let x = tape.constant(input.clone())?;
        let y = self.forward(&mut tape, x, &vars)?;
        Ok(tape.value(y).clone())
    }

    /// Per-sample output shape for a per-sample `[C, H, W]` input.
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        self.profile(input_shape).map(|(s, _)| s)
    }

    /// FLOPs for one sample of shape `[C, H, W]`.
    pub fn flops(&self, input_shape: &[usize]) -> Result<u64> {
        self.profile(input_shape).map(|(_, f)| f)
    }

    fn profile(&self, input_shape: &[usize]) -> Result<(Vec<usize>, u64)> {
        let mut shape = input_shape.to_vec();
        let mut total = 0;
        for layer in &self.layers {
            let (next, f) = layer.propagate(&shape)?;
            shape = next;
            total += f;
        }
        Ok((shape, total))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_flops_example() {
        let net = Network::new(vec![Layer::Conv {
            in_channels: 12,
            out_channels: 12,
            kernel: 3,
            stride: 1,
            padding: 1,
        }]);
        assert_eq!(net.flops(&[12, 32, 32]).unwrap(), 2_666_496);
    }

    #[test]
    fn shape_errors_are_reported() {
        let net = Network::new(vec![Layer::Conv {
            in_channels: 3,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        }]);
        assert!(net.flops(&[1, 8, 8]).is_err());
        assert!(net.flops(&[3, 8]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let net = build_fsrcnn(&FsrcnnConfig::with_width(16)).unwrap();
        assert_eq!(net.init(3), net.init(3));
        assert_ne!(net.init(3), net.init(4));
        net.check_params(&net.init(3)).unwrap();
    }
}
