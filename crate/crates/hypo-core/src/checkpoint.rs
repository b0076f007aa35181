//! JSON checkpointing with bit-exact round trips.
//!
//! Doubles are written in shortest-round-trip decimal form and parsed back
//! exactly, so save -> load reproduces identical bits; resuming a run from a
//! checkpoint must continue exactly where the uninterrupted run would be.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HypoError, Result};
use crate::geometry::UnitVector;
use crate::model::{LinearHead, MlpEncoder, PrototypeBank, PrototypeMode};

/// Which objective produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Hypo,
    Erm,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "hypo" => Ok(Method::Hypo),
            "erm" => Ok(Method::Erm),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

/// Serialized RNG position: the ChaCha seed plus the stream word offset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RngState {
    pub seed: Vec<u8>,
    /// u128 kept as a decimal string; JSON numbers cap at 64 bits.
    pub word_pos: String,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            word_pos: rng.get_word_pos().to_string(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed.len() != 32 {
            return Err(HypoError::SchemaError(format!(
                "rng seed must be 32 bytes, got {}",
                self.seed.len()
            )));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&self.seed);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| HypoError::SchemaError(format!("bad rng word_pos: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// SGD momentum buffers; mirrored parameter shapes.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OptimizerState {
    pub weight_momentum: Vec<Vec<Vec<f64>>>,
    pub bias_momentum: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_weight_momentum: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_bias_momentum: Option<Vec<f64>>,
}

/// One trained (or initial) model plus everything needed to resume training
/// bit-for-bit: parameters, prototypes or head, momentum buffers, RNG state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub method: Method,
    pub layer_dims: Vec<usize>,
    /// Row-major nested arrays, one per layer, shape (fan_out, fan_in).
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    /// Prototype rows; empty for the cross-entropy baseline.
    pub prototypes: Vec<Vec<f64>>,
    pub mode: PrototypeMode,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_biases: Option<Vec<f64>>,
    pub optimizer: OptimizerState,
    pub rng_state: RngState,
    pub epoch: usize,
}

pub const SCHEMA_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.schema_version != SCHEMA_VERSION {
            return Err(HypoError::SchemaError(format!(
                "unsupported checkpoint schema_version {}",
                ckpt.schema_version
            )));
        }
        Ok(ckpt)
    }

    pub fn encoder(&self) -> Result<MlpEncoder> {
        let weights: Vec<Array2<f64>> = self
            .weights
            .iter()
            .map(|w| nested_to_matrix(w))
            .collect::<Result<_>>()?;
        let biases: Vec<Array1<f64>> = self.biases.iter().map(|b| Array1::from(b.clone())).collect();
        MlpEncoder::from_parts(self.layer_dims.clone(), weights, biases)
    }

    pub fn bank(&self) -> Result<Option<PrototypeBank>> {
        if self.prototypes.is_empty() {
            return Ok(None);
        }
        let rows: Vec<UnitVector> = self
            .prototypes
            .iter()
            .map(|r| UnitVector::new(Array1::from(r.clone())))
            .collect::<Result<_>>()?;
        Ok(Some(PrototypeBank::from_rows(rows, self.mode, self.alpha)?))
    }

    pub fn head(&self) -> Result<Option<LinearHead>> {
        match (&self.head_weights, &self.head_biases) {
            (Some(w), Some(b)) => Ok(Some(LinearHead {
                weights: nested_to_matrix(w)?,
                biases: Array1::from(b.clone()),
            })),
            (None, None) => Ok(None),
            _ => Err(HypoError::SchemaError(
                "head weights and biases must both be present or both absent".into(),
            )),
        }
    }

    /// Number of classes this checkpoint classifies into.
    pub fn num_classes(&self) -> usize {
        if !self.prototypes.is_empty() {
            self.prototypes.len()
        } else {
            self.head_weights.as_ref().map_or(0, |w| w.len())
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }
}

pub fn matrix_to_nested(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn nested_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(HypoError::SchemaError("empty matrix in checkpoint".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(HypoError::SchemaError("ragged matrix in checkpoint".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat)
        .map_err(|e| HypoError::SchemaError(format!("bad matrix shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        // Values chosen to stress decimal serialization: denormals, values
        // with no short decimal form, and negative zero survive exactly.
        let awkward = [
            0.1,
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            2.2250738585072014e-308,
            -0.0,
            1e300,
            0.95f64.powi(7),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
        rng.set_word_pos(12345);
        let ckpt = Checkpoint {
            schema_version: SCHEMA_VERSION,
            method: Method::Hypo,
            layer_dims: vec![2, 3, 2],
            weights: vec![
                vec![awkward[..2].to_vec(), awkward[2..4].to_vec(), awkward[4..6].to_vec()],
                vec![vec![awkward[6], 1.5], vec![-2.5, 0.75], vec![0.0, -1.0]]
                    [..2]
                    .to_vec(),
            ],
            biases: vec![vec![0.1, 0.2, 0.3], vec![-0.4, 0.5]],
            prototypes: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            mode: PrototypeMode::Ema,
            alpha: 0.95,
            head_weights: None,
            head_biases: None,
            optimizer: OptimizerState {
                weight_momentum: vec![vec![vec![0.0; 2]; 3], vec![vec![1e-17; 2]; 2]],
                bias_momentum: vec![vec![0.0; 3], vec![0.0; 2]],
                head_weight_momentum: None,
                head_bias_momentum: None,
            },
            rng_state: RngState::capture(&rng),
            epoch: 42,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 42);
        for (a, b) in ckpt.weights.iter().flatten().flatten().zip(loaded.weights.iter().flatten().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ckpt.biases.iter().flatten().zip(loaded.biases.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let restored = loaded.rng_state.restore().unwrap();
        assert_eq!(restored.get_word_pos(), 12345);
        let mut orig = rng.clone();
        let mut back = restored.clone();
        assert_eq!(
            rand::Rng::random::<u64>(&mut orig),
            rand::Rng::random::<u64>(&mut back)
        );
    }

    #[test]
    fn rng_state_survives_partial_consumption() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..13 {
            let _ = rand::Rng::random::<f64>(&mut rng);
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        for _ in 0..50 {
            assert_eq!(
                rand::Rng::random::<u64>(&mut rng),
                rand::Rng::random::<u64>(&mut restored)
            );
        }
    }
}
