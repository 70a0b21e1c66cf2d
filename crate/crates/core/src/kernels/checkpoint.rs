//! Versioned JSON container for parameters and buffers.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{KernelError, Param};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A named tensor stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn from_array(name: impl Into<String>, a: &Array2<f64>) -> Self {
        Self {
            name: name.into(),
            shape: a.shape().to_vec(),
            values: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>, KernelError> {
        let [r, c] = self.shape[..] else {
            return Err(KernelError::Checkpoint(format!(
                "tensor `{}` is not 2-D: {:?}",
                self.name, self.shape
            )));
        };
        Array2::from_shape_vec((r, c), self.values.clone())
            .map_err(|e| KernelError::Checkpoint(format!("tensor `{}`: {e}", self.name)))
    }
}

/// Serialized model: config and auxiliary metadata as free-form JSON, plus
/// parameter tensors and non-learnable buffers (batch-norm running stats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub params: Vec<TensorRecord>,
    #[serde(default)]
    pub buffers: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: kind.into(),
            config,
            metadata: serde_json::Value::Null,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn push_params<'a>(&mut self, params: impl IntoIterator<Item = &'a Param>) {
        self.params.extend(
            params
                .into_iter()
                .map(|p| TensorRecord::from_array(&p.name, &p.value)),
        );
    }

    /// Copies stored values into `params`, matching by name and shape.
    pub fn load_params<'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut Param>,
    ) -> Result<(), KernelError> {
        let mut params: Vec<&mut Param> = params.into_iter().collect();
        if params.len() != self.params.len() {
            return Err(KernelError::Checkpoint(format!(
                "expected {} parameter tensors, checkpoint has {}",
                params.len(),
                self.params.len()
            )));
        }
        for p in params.iter_mut() {
            let rec = self
                .params
                .iter()
                .find(|r| r.name == p.name)
                .ok_or_else(|| {
                    KernelError::Checkpoint(format!("missing parameter `{}`", p.name))
                })?;
            let value = rec.to_array()?;
            if value.shape() != p.value.shape() {
                return Err(KernelError::ShapeMismatch {
                    op: "checkpoint",
                    expected: p.value.shape().to_vec(),
                    found: value.shape().to_vec(),
                });
            }
            p.value = value;
            p.zero_grad();
        }
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&TensorRecord, KernelError> {
        self.buffers
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| KernelError::Checkpoint(format!("missing buffer `{name}`")))
    }

    pub fn to_json(&self) -> Result<String, KernelError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, KernelError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(KernelError::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_bit_exact() {
        let p = Param::new(
            "w",
            array![[0.1, 1.0 / 3.0], [-2.5e-300, std::f64::consts::PI]],
        );
        let mut ck = Checkpoint::new("test", serde_json::json!({"dim": 2}));
        ck.push_params([&p]);
        ck.buffers
            .push(TensorRecord::from_array("bn.mean", &array![[1e-17, 7.0]]));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut q = Param::zeros("w", 2, 2);
        back.load_params([&mut q]).unwrap();
        assert_eq!(q.value, p.value);
    }

    #[test]
    fn mismatches_are_errors() {
        let p = Param::zeros("w", 2, 2);
        let mut ck = Checkpoint::new("test", serde_json::Value::Null);
        ck.push_params([&p]);
        let mut wrong = Param::zeros("w", 3, 2);
        assert!(ck.load_params([&mut wrong]).is_err());
        let mut renamed = Param::zeros("v", 2, 2);
        assert!(ck.load_params([&mut renamed]).is_err());
        let mut text = ck.to_json().unwrap();
        text = text.replace("\"format_version\":1", "\"format_version\":99");
        assert!(Checkpoint::from_json(&text).is_err());
    }
}
