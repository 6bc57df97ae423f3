use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// What a parameter is, which fixes its initialization and whether it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv kernel or dense matrix; He-normal with the given fan-in.
    Weight {
        fan_in: usize,
    },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameters in insertion order. Batch-norm running statistics live here too,
/// flagged as buffers so the optimizer skips them.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let mut tensor = Tensor::zeros(shape);
        tensor.set_requires_grad(!kind.is_buffer());
        self.params.insert(name.to_string(), Param { tensor, kind });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    fn expect_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was never registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, p)| !p.kind.is_buffer())
            .map(|(k, p)| (k, &p.tensor))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases, unit gammas, zero
    /// betas, running mean 0 and running variance 1. A pure function of the
    /// registered shapes and `seed`.
    pub fn init(&mut self, seed: u64) {
        let mut rng = SplitMix64::stream(seed, 0x1417);
        for p in self.params.values_mut() {
            let data = p.tensor.data_mut();
            match p.kind {
                ParamKind::Weight { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    data.iter_mut()
                        .for_each(|v| *v = T::lit(rng.normal() * std));
                }
                ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => data.fill(T::zero()),
                ParamKind::Gamma | ParamKind::RunningVar => data.fill(T::one()),
            }
            p.tensor.zero_grad();
        }
    }

    /// Puts a parameter on the tape; trainable ones receive gradient.
    pub fn bind(&mut self, tape: &mut Tape<T>, name: &str) -> Var {
        tape.watch(self.expect_mut(name))
    }

    /// Mutable running statistics of a batch-norm layer.
    pub(crate) fn running_stats(&mut self, mean: &str, var: &str) -> (&mut [T], &mut [T]) {
        let [m, v] = self
            .params
            .get_disjoint_mut([mean, var])
            .map(|p| p.unwrap_or_else(|| panic!("missing batch-norm buffer")));
        (m.tensor.data_mut(), v.tensor.data_mut())
    }

    /// Moves gradients from `tape` into each bound parameter and unbinds it.
    pub fn collect_grads(&mut self, tape: &Tape<T>) {
        for p in self.params.values_mut() {
            if p.tensor.node().is_some_and(|v| v.index() < tape.len()) {
                tape.write_grad(&mut p.tensor);
            }
            p.tensor.set_node(None);
        }
    }

    /// Detaches every parameter from the tape without touching gradients.
    pub fn unbind(&mut self) {
        self.params
            .values_mut()
            .for_each(|p| p.tensor.set_node(None));
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies values from `entries`, which must cover every registered name with the
    /// same shape. Fails on the first registered parameter that is missing or differs.
    pub fn load_values<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    ) -> Result<()> {
        let lookup: IndexMap<&str, &Tensor<T>> = entries.into_iter().collect();
        for (name, p) in &self.params {
            match lookup.get(name.as_str()) {
                None => {
                    return Err(Error::ParamMismatch {
                        name: name.clone(),
                        msg: "missing from checkpoint".into(),
                    })
                }
                Some(t) if t.shape() != p.tensor.shape() => {
                    return Err(Error::ParamMismatch {
                        name: name.clone(),
                        msg: format!(
                            "checkpoint shape {:?} does not match model shape {:?}",
                            t.shape(),
                            p.tensor.shape()
                        ),
                    })
                }
                Some(_) => {}
            }
        }
        for (name, p) in self.params.iter_mut() {
            p.tensor
                .data_mut()
                .copy_from_slice(lookup[name.as_str()].data());
            p.tensor.zero_grad();
        }
        Ok(())
    }

    /// Same parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}
