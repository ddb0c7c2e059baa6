//! Parameter shape declarations and their initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Name, shape and initializer of one parameter, without its storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let n = self.numel();
        let data = match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("spec shape")
    }
}

pub fn count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

pub fn shapes(specs: &[ParamSpec]) -> Vec<(String, Vec<usize>)> {
    specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect()
}

/// Samples every spec in declaration order into `store`.
pub fn init_into(store: &mut ParamStore, specs: &[ParamSpec], rng: &mut ChaCha8Rng, frozen: bool) -> Result<()> {
    for s in specs {
        store.insert(s.name.clone(), s.sample(rng), frozen)?;
    }
    Ok(())
}
