//! Named parameter registry with a frozen/trainable partition.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of the parameter set. Only `Backbone` is frozen during
/// fine-tuning; the other groups make up the trainable set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Adapter,
    PatchEmbed,
    PromptEncoder,
    Decoder,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub group: ParamGroup,
    /// Fixed buffers (e.g. the positional-encoding projection) are grouped
    /// with their module but never updated.
    pub trainable: bool,
    tensor: Tensor,
    var: Option<Var>,
}

impl Param {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn var(&self) -> Option<&Var> {
        self.var.as_ref()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Variables updated by the optimizer.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .values()
            .filter(|p| p.trainable)
            .filter_map(|p| p.var.clone())
            .collect()
    }

    /// `(name, var)` pairs of trainable parameters in a given group.
    pub fn group_vars(&self, group: ParamGroup) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == group && p.trainable)
            .filter_map(|(n, p)| p.var.clone().map(|v| (n.clone(), v)))
            .collect()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .filter_map(|(n, p)| p.var.clone().map(|v| (n.clone(), v)))
            .collect()
    }

    /// Detached copies of every parameter in a group.
    pub fn snapshot(&self, group: ParamGroup) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, p)| Ok((n.clone(), p.tensor.copy()?.detach())))
            .collect()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), p.tensor.clone()))
            .collect()
    }

    pub fn total_elements(&self, group: ParamGroup) -> usize {
        self.params
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.elem_count())
            .sum()
    }
}

/// Creates parameters either from a seeded initializer or from supplied
/// tensors, registering each under its dotted name.
pub(crate) struct ParamBuilder<'a> {
    pub(crate) store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    source: Option<&'a HashMap<String, Tensor>>,
    strict: bool,
    pub(crate) device: Device,
    pub(crate) dtype: DType,
}

impl<'a> ParamBuilder<'a> {
    pub(crate) fn new(
        rng: &'a mut ChaCha8Rng,
        source: Option<&'a HashMap<String, Tensor>>,
        strict: bool,
        device: Device,
        dtype: DType,
    ) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            rng,
            source,
            strict,
            device,
            dtype,
        }
    }

    pub(crate) fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        trainable: bool,
    ) -> Result<Tensor> {
        // draw even when loading so that unrelated initializers stay aligned
        let fresh = self.init_values(shape, init);
        let tensor = match self.source.and_then(|s| s.get(name)) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(Error::IncompatibleWeights(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.dims()
                    )));
                }
                t.to_device(&self.device)?.to_dtype(self.dtype)?.copy()?
            }
            None if self.strict => {
                return Err(Error::IncompatibleWeights(format!("missing parameter {name}")));
            }
            None => Tensor::from_vec(fresh, shape, &self.device)?.to_dtype(self.dtype)?,
        };
        let (tensor, var) = if trainable {
            let var = Var::from_tensor(&tensor)?;
            (var.as_tensor().clone(), Some(var))
        } else {
            (tensor, None)
        };
        self.store.params.insert(
            name.to_string(),
            Param {
                group,
                trainable,
                tensor: tensor.clone(),
                var,
            },
        );
        Ok(tensor)
    }

    fn init_values(&mut self, shape: &[usize], init: Init) -> Vec<f64> {
        let n: usize = shape.iter().product();
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
        }
    }
}
