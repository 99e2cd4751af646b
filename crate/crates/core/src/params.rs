//! Named parameter tensors and their binding onto a tape.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::rng::{normal_vec, SeedRng};

/// Freezable unit of the model. A parameter's group is the first component
/// of its dotted name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    VisionEncoder,
    VisionProjector,
    Lm,
    LqFormer,
    Denoiser,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::VisionEncoder,
        Group::VisionProjector,
        Group::Lm,
        Group::LqFormer,
        Group::Denoiser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::VisionEncoder => "vision_encoder",
            Group::VisionProjector => "vision_projector",
            Group::Lm => "lm",
            Group::LqFormer => "lqformer",
            Group::Denoiser => "denoiser",
        }
    }

    pub fn of(param: &str) -> Option<Group> {
        let head = param.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.name() == head)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type GroupSet = BTreeSet<Group>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

/// How a fresh tensor is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Identity,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if Group::of(name).is_none() {
            return Err(Error::Argument(format!("parameter `{name}` has no known group prefix")));
        }
        if self.index.contains_key(name) {
            return Err(Error::Argument(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers `name` with values drawn from a stream keyed by the name,
    /// so initial values do not depend on registration order.
    pub fn init(&mut self, rng: &SeedRng, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = make(rng, name, shape, init)?;
        self.insert(name, t)
    }

    /// Overwrites an existing parameter with a fresh draw under `rng`.
    pub fn reinit(&mut self, rng: &SeedRng, id: ParamId, init: Init) -> Result<()> {
        let shape = self.values[id.0].shape().to_vec();
        self.values[id.0] = make(rng, &self.names[id.0], &shape, init)?;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        Group::of(&self.names[id.0]).expect("validated on insert")
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

fn make(rng: &SeedRng, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => normal_vec(&mut rng.split_str(name).stream(), n, std),
        Init::Identity => {
            if shape.len() != 2 {
                return Err(Error::Argument(format!("identity init needs a matrix, `{name}` is {shape:?}")));
            }
            let mut d = vec![0.0; n];
            for i in 0..shape[0].min(shape[1]) {
                d[i * shape[1] + i] = 1.0;
            }
            d
        }
    };
    Tensor::new(shape.to_vec(), data)
}

/// Parameters placed on a tape, trainable groups as gradient leaves.
pub struct Binding {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl Binding {
    pub fn new(tape: &mut Tape, store: &ParamStore, trainable: &GroupSet) -> Result<Self> {
        let mut vars = Vec::with_capacity(store.len());
        let mut flags = Vec::with_capacity(store.len());
        for (id, _, value) in store.iter() {
            let train = trainable.contains(&store.group(id));
            vars.push(tape.leaf(value.clone(), train)?);
            flags.push(train);
        }
        Ok(Binding {
            vars,
            trainable: flags,
        })
    }

    /// Everything bound as a constant.
    pub fn frozen(tape: &mut Tape, store: &ParamStore) -> Result<Self> {
        Self::new(tape, store, &GroupSet::new())
    }

    /// Frozen binding in which the listed parameters are replaced by the
    /// given vars, for finite-difference checks on whole modules.
    pub fn frozen_with(tape: &mut Tape, store: &ParamStore, overrides: &[(ParamId, Var)]) -> Result<Self> {
        let mut b = Self::frozen(tape, store)?;
        for &(id, v) in overrides {
            if tape.shape(v) != store.get(id).shape() {
                return Err(Error::Dimension(format!(
                    "override for `{}` has shape {:?}, expected {:?}",
                    store.name(id),
                    tape.shape(v),
                    store.get(id).shape()
                )));
            }
            b.vars[id.0] = v;
        }
        Ok(b)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }
}
