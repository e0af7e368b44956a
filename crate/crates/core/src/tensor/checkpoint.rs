use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Serialized tensor: shape plus base64 of the little-endian f64 bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data_f64_le: String,
}

pub fn encode_f64_le(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64_le(s: &str) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("byte length {} is not a multiple of 8", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data_f64_le: encode_f64_le(t.data()),
        }
    }
}

impl TryFrom<&TensorRecord> for Tensor {
    type Error = String;

    fn try_from(r: &TensorRecord) -> Result<Self, Self::Error> {
        Tensor::new(r.shape.clone(), decode_f64_le(&r.data_f64_le)?).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_bytes_round_trip(v in proptest::collection::vec(any::<f64>(), 1..64)) {
            let back = decode_f64_le(&encode_f64_le(&v)).unwrap();
            prop_assert_eq!(
                back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn rejects_truncated() {
        let s = STANDARD.encode([0u8; 7]);
        assert!(decode_f64_le(&s).is_err());
    }
}
