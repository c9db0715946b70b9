use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{Branch, ClassConfig, ClassModule, FsrcnnConfig, ModelDescriptor, ParamSet, SrContainer};
use crate::tensor::{AdamState, Checkpoint, Tensor};

const DESCRIPTOR: &str = "model.descriptor";
const ITERATION: &str = "state.iteration";
const RNG: &str = "state.rng";

/// Everything needed to continue training: weights, optimizer moments,
/// the iteration counter and the sampling RNG.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub container: SrContainer,
    pub class_module: ClassModule,
    pub sr_adam: Vec<AdamState>,
    pub class_adam: AdamState,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.container == other.container
            && self.class_module == other.class_module
            && self.sr_adam == other.sr_adam
            && self.class_adam == other.class_adam
            && self.iteration == other.iteration
            && self.rng == other.rng
    }
}

impl TrainState {
    /// Branch `j` is initialized from `seed + j`, the class module from
    /// `seed + 1000`, and the RNG from `seed`.
    pub fn new(branches: &[FsrcnnConfig], class: ClassConfig, seed: u64) -> Result<Self> {
        if class.classes != branches.len() {
            return Err(Error::InvalidArgument(format!(
                "{} classes for {} branches",
                class.classes,
                branches.len()
            )));
        }
        let container = SrContainer::new(branches, seed)?;
        let class_module = ClassModule::new(class, seed.wrapping_add(1000))?;
        Ok(Self::assemble(container, class_module, ChaCha8Rng::seed_from_u64(seed)))
    }

    fn assemble(container: SrContainer, class_module: ClassModule, rng: ChaCha8Rng) -> Self {
        let sr_adam = container
            .branches()
            .iter()
            .map(|b| AdamState::new(b.params.tensors()))
            .collect();
        let class_adam = AdamState::new(class_module.params.tensors());
        TrainState {
            container,
            class_module,
            sr_adam,
            class_adam,
            iteration: 0,
            rng,
        }
    }

    pub fn descriptor(&self) -> Result<ModelDescriptor> {
        let cfgs: Vec<FsrcnnConfig> = self.container.branches().iter().map(|b| b.config).collect();
        ModelDescriptor::new(&cfgs, &self.class_module.config)
    }

    /// Zeroes every optimizer moment and the iteration counter.
    pub fn reset_optimizers(&mut self) {
        for (adam, b) in self.sr_adam.iter_mut().zip(self.container.branches()) {
            *adam = AdamState::new(b.params.tensors());
        }
        self.class_adam = AdamState::new(self.class_module.params.tensors());
        self.iteration = 0;
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_bytes(DESCRIPTOR, serde_json::to_vec(&self.descriptor()?)?)?;
        for (j, b) in self.container.branches().iter().enumerate() {
            insert_params(&mut ck, &format!("branch{j}"), &b.params)?;
            insert_adam(&mut ck, &format!("adam.branch{j}"), &self.sr_adam[j])?;
        }
        insert_params(&mut ck, "class", &self.class_module.params)?;
        insert_adam(&mut ck, "adam.class", &self.class_adam)?;
        ck.insert_u64(ITERATION, vec![self.iteration])?;
        let seed = self.rng.get_seed();
        let mut words: Vec<u64> = seed
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let pos = self.rng.get_word_pos();
        words.extend([(pos >> 64) as u64, pos as u64, self.rng.get_stream()]);
        ck.insert_u64(RNG, words)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let descriptor: ModelDescriptor = serde_json::from_slice(ck.bytes(DESCRIPTOR)?)?;
        let branches = descriptor
            .branch_configs()?
            .into_iter()
            .enumerate()
            .map(|(j, cfg)| {
                let net = crate::models::build_fsrcnn(&cfg)?;
                Branch::with_params(cfg, read_params(ck, &format!("branch{j}"), &net.param_shapes())?)
            })
            .collect::<Result<Vec<_>>>()?;
        let container = SrContainer::from_branches(branches)?;
        let class_net = crate::models::build_class_module(&descriptor.class_module)?;
        let class_module = ClassModule::with_params(
            descriptor.class_module.clone(),
            read_params(ck, "class", &class_net.param_shapes())?,
        )?;
        let words = ck.u64s(RNG)?;
        if words.len() != 7 {
            return Err(Error::Checkpoint(format!("rng state has {} words", words.len())));
        }
        let mut seed = [0u8; 32];
        for (i, w) in words[..4].iter().enumerate() {
            seed[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(words[6]);
        rng.set_word_pos(((words[4] as u128) << 64) | words[5] as u128);
        let mut state = Self::assemble(container, class_module, rng);
        for j in 0..state.container.len() {
            state.sr_adam[j] = read_adam(ck, &format!("adam.branch{j}"), state.sr_adam[j].clone())?;
        }
        state.class_adam = read_adam(ck, "adam.class", state.class_adam.clone())?;
        state.iteration = *ck
            .u64s(ITERATION)?
            .first()
            .ok_or_else(|| Error::Checkpoint("empty iteration entry".into()))?;
        Ok(state)
    }
}

fn insert_params(ck: &mut Checkpoint, prefix: &str, params: &ParamSet) -> Result<()> {
    for (name, t) in params.names().iter().zip(params.tensors()) {
        ck.insert_tensor(format!("{prefix}.{name}"), t)?;
    }
    Ok(())
}

fn read_params(ck: &Checkpoint, prefix: &str, shapes: &[(String, Vec<usize>)]) -> Result<ParamSet> {
    let tensors = shapes
        .iter()
        .map(|(name, shape)| {
            let t = ck.tensor_f32(&format!("{prefix}.{name}"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{prefix}.{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    ParamSet::new(shapes.iter().map(|(n, _)| n.clone()).collect(), tensors)
}

fn insert_adam(ck: &mut Checkpoint, prefix: &str, adam: &AdamState) -> Result<()> {
    for (k, (m, v)) in adam.first_moment.iter().zip(&adam.second_moment).enumerate() {
        ck.insert_tensor(format!("{prefix}.m{k}"), &Tensor::new(vec![m.len()], m.clone())?)?;
        ck.insert_tensor(format!("{prefix}.v{k}"), &Tensor::new(vec![v.len()], v.clone())?)?;
    }
    ck.insert_u64(format!("{prefix}.step"), vec![adam.step_count])
}

fn read_adam(ck: &Checkpoint, prefix: &str, mut adam: AdamState) -> Result<AdamState> {
    for k in 0..adam.first_moment.len() {
        for (tag, slot) in [("m", &mut adam.first_moment[k]), ("v", &mut adam.second_moment[k])] {
            let t = ck.tensor_f32(&format!("{prefix}.{tag}{k}"))?;
            if t.len() != slot.len() {
                return Err(Error::Checkpoint(format!("{prefix}.{tag}{k} has the wrong length")));
            }
            *slot = t.into_data();
        }
    }
    adam.step_count = *ck
        .u64s(&format!("{prefix}.step"))?
        .first()
        .ok_or_else(|| Error::Checkpoint(format!("empty {prefix}.step")))?;
    Ok(adam)
}
