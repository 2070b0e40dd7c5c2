//! Named trainable parameters and seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Error, Result};

/// Ordered map from dotted parameter name to its variable.
///
/// Cloning is shallow: clones share storage with the original.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.vars.iter().map(|(k, v)| (k, v.shape().dims().to_vec())))
            .finish()
    }
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Var)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn element_count(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, v)| v.elem_count()).sum()
    }

    /// Copies every tensor into fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { vars })
    }

    /// Flattened f32 contents of one parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        let var = self.get(name).ok_or_else(|| CheckpointError::ParameterMismatch {
            name: name.to_string(),
            reason: "unknown parameter".into(),
        })?;
        Ok(var.as_tensor().flatten_all()?.to_vec1()?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// U(-bound, bound)
    Uniform(f64),
    Const(f32),
}

pub(crate) enum Source<'a> {
    Init(&'a mut ChaCha8Rng),
    Load(&'a ParamStore),
}

/// Creates (or looks up) parameters under a hierarchical name prefix.
pub(crate) struct Builder<'a> {
    source: Source<'a>,
    out: ParamStore,
    path: Vec<String>,
    device: Device,
}

impl<'a> Builder<'a> {
    pub fn new(source: Source<'a>, device: &Device) -> Self {
        Self {
            source,
            out: ParamStore::default(),
            path: Vec::new(),
            device: device.clone(),
        }
    }

    pub fn push(&mut self, segment: impl Into<String>) {
        self.path.push(segment.into());
    }

    pub fn pop(&mut self) {
        self.path.pop();
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scoped<T>(
        &mut self,
        segment: impl Into<String>,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        self.push(segment);
        let out = f(self);
        self.pop();
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self
            .path
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(name))
            .collect::<Vec<_>>()
            .join(".");
        let var = match &mut self.source {
            Source::Init(rng) => {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = match init {
                    Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect(),
                    Init::Const(c) => vec![c; n],
                };
                Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?
            }
            Source::Load(store) => {
                let var = store
                    .get(&full)
                    .ok_or_else(|| CheckpointError::ParameterMismatch {
                        name: full.clone(),
                        reason: "missing from parameter set".into(),
                    })?;
                if var.dims() != shape {
                    return Err(CheckpointError::ParameterMismatch {
                        name: full,
                        reason: format!("shape {:?}, expected {:?}", var.dims(), shape),
                    }
                    .into());
                }
                if var.dtype() != DType::F32 {
                    return Err(CheckpointError::ParameterMismatch {
                        name: full,
                        reason: format!("dtype {:?}, expected f32", var.dtype()),
                    }
                    .into());
                }
                var.clone()
            }
        };
        let tensor = var.as_tensor().clone();
        if self.out.vars.insert(full.clone(), var).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{full}`")));
        }
        Ok(tensor)
    }

    /// Finishes construction; in load mode, rejects parameters that were never requested.
    pub fn finish(self) -> Result<ParamStore> {
        if let Source::Load(store) = &self.source {
            if let Some(extra) = store.names().find(|n| self.out.get(n).is_none()) {
                return Err(CheckpointError::ParameterMismatch {
                    name: extra.to_string(),
                    reason: "not part of the constructed model".into(),
                }
                .into());
            }
        }
        Ok(self.out)
    }
}
