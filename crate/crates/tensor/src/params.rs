use std::collections::HashMap;

use crate::error::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Named trainable parameters in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        crate::tape::check_shape(shape, value.len())?;
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            grad: vec![0.0; value.len()],
            value,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    /// Overwrites values from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(TensorError::Invalid("parameter stores differ in size".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(TensorError::Shape {
                    op: "copy_values_from",
                    lhs: dst.shape.clone(),
                    rhs: src.shape.clone(),
                });
            }
            dst.value.copy_from_slice(&src.value);
        }
        Ok(())
    }
}
