//! Versioned JSON checkpoints with `f64` values stored as hex bit patterns,
//! so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, NnError, Result, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// 16 lowercase hex digits per value (big-endian `f64::to_bits`).
    pub data: String,
}

impl HexTensor {
    pub fn encode(name: &str, t: &Tensor) -> Self {
        let mut data = String::with_capacity(16 * t.len());
        for v in t.data() {
            data.push_str(&format!("{:016x}", v.to_bits()));
        }
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        if self.data.len() % 16 != 0 {
            return Err(NnError::Checkpoint(format!("{}: ragged hex payload", self.name)));
        }
        let vals = (0..self.data.len() / 16)
            .map(|i| {
                u64::from_str_radix(&self.data[16 * i..16 * (i + 1)], 16)
                    .map(f64::from_bits)
                    .map_err(|e| NnError::Checkpoint(format!("{}: {e}", self.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(self.shape.clone(), vals)
    }
}

/// Header plus tensors in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
    pub init_scheme: String,
    /// Model-specific header fields.
    #[serde(default)]
    pub header: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<HexTensor>,
}

pub const INIT_SCHEME: &str = "glorot_uniform; lstm_forget_bias=1.0; zero_bias";

impl Checkpoint {
    pub fn new(kind: &str, layers: Vec<LayerSpec>, seed: u64, tensors: Vec<(String, &Tensor)>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            layers,
            seed,
            init_scheme: INIT_SCHEME.to_string(),
            header: BTreeMap::new(),
            tensors: tensors.iter().map(|(n, t)| HexTensor::encode(n, t)).collect(),
        }
    }

    /// Copies stored tensors into `targets`, checking names' count and shapes.
    pub fn load_into(&self, targets: Vec<&mut Tensor>) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", self.format_version)));
        }
        if targets.len() != self.tensors.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} tensors, checkpoint has {}",
                targets.len(),
                self.tensors.len()
            )));
        }
        for (dst, src) in targets.into_iter().zip(&self.tensors) {
            let t = src.decode()?;
            if !dst.same_shape(&t) {
                return Err(NnError::Checkpoint(format!("{}: shape {:?} vs {:?}", src.name, t.shape(), dst.shape())));
            }
            *dst = t;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> std::io::Result<Result<Self>> {
        Ok(Self::from_json(&std::fs::read_to_string(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{Network, Parameterized};
    use crate::seed;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hex_roundtrip_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..40)) {
            let t = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
            let back = HexTensor::encode("t", &t).decode().unwrap();
            for (a, b) in back.data().iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn network_roundtrip() {
        let net = Network::mlp(&[3, 5, 2], &mut seed::rng(3)).unwrap();
        let ck = Checkpoint::new("mlp", net.specs().to_vec(), 3, net.state());
        let json = ck.to_json();
        let back = Checkpoint::from_json(&json).unwrap();
        let mut other = Network::mlp(&[3, 5, 2], &mut seed::rng(99)).unwrap();
        back.load_into(other.state_mut()).unwrap();
        for ((_, a), (_, b)) in net.params().iter().zip(other.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = Network::mlp(&[3, 5, 2], &mut seed::rng(3)).unwrap();
        let ck = Checkpoint::new("mlp", net.specs().to_vec(), 3, net.state());
        let mut other = Network::mlp(&[3, 4, 2], &mut seed::rng(3)).unwrap();
        assert!(ck.load_into(other.state_mut()).is_err());
    }
}
