use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{build_fsrcnn, ClassConfig, FsrcnnConfig, Network, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One SR branch: architecture plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub config: FsrcnnConfig,
    pub network: Network,
    pub params: ParamSet,
}

impl Branch {
    pub fn new(config: FsrcnnConfig, seed: u64) -> Result<Self> {
        let network = build_fsrcnn(&config)?;
        let params = network.init(seed);
        Ok(Branch {
            config,
            network,
            params,
        })
    }

    pub fn with_params(config: FsrcnnConfig, params: ParamSet) -> Result<Self> {
        let network = build_fsrcnn(&config)?;
        network.check_params(&params)?;
        Ok(Branch {
            config,
            network,
            params,
        })
    }

    pub fn flops(&self, tile_shape: &[usize]) -> Result<u64> {
        self.network.flops(tile_shape)
    }
}

/// Counts tiles pushed through each branch.
#[derive(Debug, Default)]
pub struct PassCounter(Vec<AtomicU64>);

impl PassCounter {
    fn new(n: usize) -> Self {
        PassCounter((0..n).map(|_| AtomicU64::new(0)).collect())
    }

    pub fn snapshot(&self) -> Vec<u64> {
        self.0.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset(&self) {
        self.0.iter().for_each(|c| c.store(0, Ordering::Relaxed));
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        PassCounter::new(self.0.len())
    }
}

/// Ordered SR branches of nondecreasing cost; the last one is the base network.
#[derive(Clone, Debug)]
pub struct SrContainer {
    branches: Vec<Branch>,
    passes: PassCounter,
}

impl PartialEq for SrContainer {
    fn eq(&self, other: &Self) -> bool {
        self.branches == other.branches
    }
}

impl SrContainer {
    pub fn new(configs: &[FsrcnnConfig], seed: u64) -> Result<Self> {
        let branches = configs
            .iter()
            .enumerate()
            .map(|(j, c)| Branch::new(*c, seed.wrapping_add(j as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_branches(branches)
    }

    pub fn from_branches(branches: Vec<Branch>) -> Result<Self> {
        if branches.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an SR container needs at least two branches, got {}",
                branches.len()
            )));
        }
        let first = branches[0].config;
        if branches
            .iter()
            .any(|b| b.config.scale != first.scale || b.config.channels != first.channels)
        {
            return Err(Error::InvalidArgument(
                "all branches must share scale and channel count".into(),
            ));
        }
        let tile = [first.channels, 32, 32];
        let costs = branches
            .iter()
            .map(|b| b.flops(&tile))
            .collect::<Result<Vec<_>>>()?;
        if costs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(format!(
                "branch costs must be nondecreasing, got {costs:?}"
            )));
        }
        let passes = PassCounter::new(branches.len());
        Ok(SrContainer { branches, passes })
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn scale(&self) -> usize {
        self.branches[0].config.scale
    }

    pub fn channels(&self) -> usize {
        self.branches[0].config.channels
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, j: usize) -> Result<&Branch> {
        self.branches.get(j).ok_or(Error::IndexOutOfRange {
            index: j,
            len: self.branches.len(),
        })
    }

    pub fn branch_mut(&mut self, j: usize) -> Result<&mut Branch> {
        let len = self.branches.len();
        self.branches
            .get_mut(j)
            .ok_or(Error::IndexOutOfRange { index: j, len })
    }

    /// Tile-forward passes executed per branch since the last reset.
    pub fn passes(&self) -> &PassCounter {
        &self.passes
    }

    /// Runs branch `j` (0-based) on a `[N, C, h, w]` batch.
    pub fn forward_branch(&self, j: usize, tiles: &Tensor<f32>) -> Result<Tensor<f32>> {
        let branch = self.branch(j)?;
        let out = branch.network.infer(&branch.params, tiles)?;
        self.passes.0[j].fetch_add(tiles.shape()[0] as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// Every branch's output, in container order.
    pub fn forward_all(&self, tiles: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        (0..self.len()).map(|j| self.forward_branch(j, tiles)).collect()
    }

    pub fn branch_flops(&self, tile_shape: &[usize]) -> Result<Vec<u64>> {
        self.branches.iter().map(|b| b.flops(tile_shape)).collect()
    }
}

/// Architecture description stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    #[serde(rename = "type")]
    pub kind: String,
    pub widths: Vec<usize>,
    #[serde(rename = "M")]
    pub branches: usize,
    pub scale: usize,
    pub channels: usize,
    pub shrink: usize,
    pub mapping_layers: Vec<usize>,
    pub class_module: ClassConfig,
}

impl ModelDescriptor {
    pub const KIND: &'static str = "classsr-fsrcnn";

    pub fn new(branches: &[FsrcnnConfig], class_module: &ClassConfig) -> Result<Self> {
        let first = branches
            .first()
            .ok_or_else(|| Error::InvalidArgument("no branches".into()))?;
        Ok(ModelDescriptor {
            kind: Self::KIND.to_string(),
            widths: branches.iter().map(|b| b.d).collect(),
            branches: branches.len(),
            scale: first.scale,
            channels: first.channels,
            shrink: first.s,
            mapping_layers: branches.iter().map(|b| b.m).collect(),
            class_module: class_module.clone(),
        })
    }

    pub fn branch_configs(&self) -> Result<Vec<FsrcnnConfig>> {
        if self.kind != Self::KIND
            || self.widths.len() != self.branches
            || self.mapping_layers.len() != self.branches
        {
            return Err(Error::InvalidArgument(format!("inconsistent model descriptor {self:?}")));
        }
        Ok(self
            .widths
            .iter()
            .zip(&self.mapping_layers)
            .map(|(&d, &m)| FsrcnnConfig {
                d,
                s: self.shrink,
                m,
                scale: self.scale,
                channels: self.channels,
            })
            .collect())
    }
}
