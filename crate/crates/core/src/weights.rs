//! Bit-exact weight blobs: little-endian floats, base64 encoded so they can
//! sit inside JSON checkpoints without decimal round-off.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

macro_rules! blob {
    ($name:ident, $ty:ty, $width:expr) => {
        #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn from_slice(values: &[$ty]) -> Self {
                let mut bytes = Vec::with_capacity(values.len() * $width);
                for v in values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                Self(STANDARD.encode(bytes))
            }

            pub fn decode(&self) -> Result<Vec<$ty>, String> {
                let bytes = STANDARD.decode(&self.0).map_err(|e| e.to_string())?;
                if bytes.len() % $width != 0 {
                    return Err(format!("blob length {} is not a multiple of {}", bytes.len(), $width));
                }
                Ok(bytes
                    .chunks_exact($width)
                    .map(|c| <$ty>::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            }
        }
    };
}

blob!(F32Blob, f32, 4);
blob!(F64Blob, f64, 8);

/// Hex SHA-256 over the little-endian bytes of every slice, in order.
pub fn checksum_f32<'a>(parts: impl IntoIterator<Item = &'a [f32]>) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        for v in part {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

pub fn checksum_f64<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        for v in part {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_blobs_are_bit_exact(values in proptest::collection::vec(any::<f32>(), 0..64)) {
            let back = F32Blob::from_slice(&values).decode().unwrap();
            prop_assert_eq!(values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_truncated_blob() {
        let blob: F64Blob = serde_json::from_str("\"AAAA\"").unwrap();
        assert!(blob.decode().is_err());
    }
}
