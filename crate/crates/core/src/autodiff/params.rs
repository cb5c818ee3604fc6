use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_FORMAT: &str = "maneuver-graph-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A learned tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named parameters, iterated in lexicographic name order.
///
/// Names are dotted paths such as `mrgcn.0.W_r.top_left` or `lstm.W_x`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Parameter { value, grad: None });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone())))
            .collect()
    }

    /// Adds `scale · ∂loss/∂param` into each parameter's gradient buffer.
    pub fn accumulate(
        &mut self,
        bound: &BTreeMap<String, Var>,
        grads: &Gradients,
        scale: f64,
    ) -> Result<(), TensorError> {
        for (name, var) in bound {
            let param = self
                .params
                .get_mut(name)
                .ok_or_else(|| TensorError::State(format!("unknown parameter {name}")))?;
            let Some(g) = grads.get(*var) else { continue };
            let acc = param.grad.get_or_insert_with(|| Tensor::zeros(param.value.shape()));
            for (a, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += scale * gi;
            }
        }
        Ok(())
    }

    /// Adds precomputed per-parameter gradients, as produced by [`Self::collect_grads`].
    pub fn accumulate_named(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        scale: f64,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            let param = self
                .params
                .get_mut(name)
                .ok_or_else(|| TensorError::State(format!("unknown parameter {name}")))?;
            let acc = param.grad.get_or_insert_with(|| Tensor::zeros(param.value.shape()));
            for (a, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += scale * gi;
            }
        }
        Ok(())
    }

    /// Pulls each bound parameter's gradient out of `grads`.
    pub fn collect_grads(
        bound: &BTreeMap<String, Var>,
        grads: &mut Gradients,
    ) -> BTreeMap<String, Tensor> {
        bound
            .iter()
            .filter_map(|(name, var)| grads.take(*var).map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn to_checkpoint(&self, model_config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model_config,
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TensorError> {
        ckpt.validate()?;
        let mut store = Self::new();
        for (name, t) in &ckpt.params {
            store.insert(name.clone(), Tensor::new(t.shape().to_vec(), t.data().to_vec())?);
        }
        Ok(store)
    }
}

/// On-disk parameter snapshot: `{format, version, model_config, params: {name: {shape, data}}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model_config: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(TensorError::State(format!("unknown checkpoint format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(TensorError::State(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
