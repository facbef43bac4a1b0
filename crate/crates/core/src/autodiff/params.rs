use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::tensor::{Tensor, TensorError, TensorResult};

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    pub grad: Option<Tensor>,
}

/// Named parameter container. Names are slash-separated paths whose first
/// segment is the parameter group (`encoder/`, `base/`, `lora/`, `role/`,
/// `prefix/`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen: false,
            grad: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.by_name
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, id)| *id)
            .collect()
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for id in self.ids_with_prefix(prefix) {
            self.params[id.0].frozen = frozen;
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the stored gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> TensorResult<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(TensorError::Dimension {
                op: "accumulate_grad",
                left: p.value.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> TensorResult<()> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::Dimension {
                op: "assign",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian payloads of every
    /// parameter under `prefix` (all parameters for `""`).
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for id in self.ids_with_prefix(prefix) {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn num_values(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix)
            .iter()
            .map(|id| self.params[id.0].value.numel())
            .sum()
    }

    /// Copies values of all parameters under `prefix` out of the store.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.ids_with_prefix(prefix)
            .into_iter()
            .map(|id| (self.params[id.0].name.clone(), self.params[id.0].value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(String, Tensor)]) -> TensorResult<()> {
        for (name, value) in snapshot {
            self.assign(name, value.clone())?;
        }
        Ok(())
    }
}
