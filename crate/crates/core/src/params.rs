//! Named parameter collections shared by the trainer and the codec.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// What a parameter tensor is for. The discriminant is the wire role byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Convolution kernel, shape `(n, s, s, m)`.
    Kernel = 0,
    Bias = 1,
    /// Dense layer weights, shape `(in, out)`.
    WeightMatrix = 2,
}

impl Role {
    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::Kernel),
            1 => Some(Role::Bias),
            2 => Some(Role::WeightMatrix),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("parameter sets differ in length: {left} vs {right} entries")]
    EntryCount { left: usize, right: usize },
    #[error("entry {index}: `{left}` does not line up with `{right}`")]
    EntryMismatch { index: usize, left: String, right: String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("entry `{name}`: {source}")]
    Tensor {
        name: String,
        #[source]
        source: TensorError,
    },
}

/// Ordered, uniquely named parameter tensors of one model.
///
/// Gradients use the same type; congruence (same names, roles and shapes in
/// the same order) is checked by every binary operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
}

impl ModelParams {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self, ParamsError> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(ParamsError::DuplicateName(e.name.clone()));
            }
        }
        Ok(ModelParams { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zeros_like(&self) -> ModelParams {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry { name: e.name.clone(), role: e.role, tensor: Tensor::zeros(e.tensor.shape().clone()) })
            .collect();
        ModelParams { entries }
    }

    /// Same names, roles and shapes in the same order.
    pub fn check_congruent(&self, other: &ModelParams) -> Result<(), ParamsError> {
        if self.entries.len() != other.entries.len() {
            return Err(ParamsError::EntryCount { left: self.entries.len(), right: other.entries.len() });
        }
        for (index, (a, b)) in self.entries.iter().zip(&other.entries).enumerate() {
            if a.name != b.name || a.role != b.role || a.tensor.shape() != b.tensor.shape() {
                return Err(ParamsError::EntryMismatch { index, left: describe(a), right: describe(b) });
            }
        }
        Ok(())
    }

    pub(crate) fn zip_map(
        &self,
        other: &ModelParams,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
    ) -> Result<ModelParams, ParamsError> {
        self.check_congruent(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| {
                let tensor =
                    f(&a.tensor, &b.tensor).map_err(|source| ParamsError::Tensor { name: a.name.clone(), source })?;
                Ok(ParamEntry { name: a.name.clone(), role: a.role, tensor })
            })
            .collect::<Result<_, ParamsError>>()?;
        Ok(ModelParams { entries })
    }

    pub fn add(&self, other: &ModelParams) -> Result<ModelParams, ParamsError> {
        self.zip_map(other, Tensor::add)
    }

    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams, ParamsError> {
        self.zip_map(other, Tensor::sub)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    /// Bit patterns of every value, for bitwise comparisons in tests and logs.
    pub fn to_bits(&self) -> Vec<u32> {
        self.entries.iter().flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits())).collect()
    }
}

fn describe(e: &ParamEntry) -> String {
    format!("{} {:?} {}", e.name, e.role, e.tensor.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(name: &str, role: Role, dims: &[usize]) -> ParamEntry {
        ParamEntry { name: name.into(), role, tensor: Tensor::zeros(crate::tensor::Shape::new(dims).unwrap()) }
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = ModelParams::new(vec![entry("a", Role::Bias, &[2]), entry("a", Role::Bias, &[2])]);
        assert_eq!(err.unwrap_err(), ParamsError::DuplicateName("a".into()));
    }

    #[test]
    fn congruence_checks_shape_and_role() {
        let a = ModelParams::new(vec![entry("w", Role::WeightMatrix, &[2, 3])]).unwrap();
        let b = ModelParams::new(vec![entry("w", Role::WeightMatrix, &[3, 2])]).unwrap();
        let c = ModelParams::new(vec![entry("w", Role::Bias, &[2, 3])]).unwrap();
        assert!(a.check_congruent(&a.zeros_like()).is_ok());
        assert!(matches!(a.check_congruent(&b), Err(ParamsError::EntryMismatch { .. })));
        assert!(matches!(a.check_congruent(&c), Err(ParamsError::EntryMismatch { .. })));
        assert!(matches!(a.check_congruent(&ModelParams::new(vec![]).unwrap()), Err(ParamsError::EntryCount { .. })));
    }

    #[test]
    fn role_bytes_roundtrip() {
        for r in [Role::Kernel, Role::Bias, Role::WeightMatrix] {
            assert_eq!(Role::from_byte(r.to_byte()), Some(r));
        }
        assert_eq!(Role::from_byte(3), None);
    }
}
