//! Versioned binary container for named `f64` tensors plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   b"CCFT"
//! version  u32
//! hlen     u64       length of the JSON header
//! header   hlen bytes {"metadata": {..}, "tensors": [{"name", "shape", "offset"}]}
//! data     f64 * n   tensor payloads; `offset` counts elements from the data start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CCFT";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, Value>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn extend(&mut self, tensors: impl IntoIterator<Item = (String, ArrayD<f64>)>) {
        self.tensors.extend(tensors);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("archive shorter than its fixed header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad archive magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::FormatVersion {
                found: version,
                supported: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let rest = &bytes[16..];
        if hlen > rest.len() as u64 {
            return Err(Error::Format("header length exceeds archive size".into()));
        }
        let (header, data) = rest.split_at(hlen as usize);
        let header: Header = serde_json::from_slice(header)?;
        if data.len() % 8 != 0 {
            return Err(Error::Format("payload is not a whole number of f64 values".into()));
        }
        let total = (data.len() / 8) as u64;
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            if e.shape.len() > MAX_RANK {
                return Err(Error::Format(format!("tensor `{}` has rank {}", e.name, e.shape.len())));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::Format(format!("tensor `{}` size overflows", e.name)))?;
            let end = e
                .offset
                .checked_add(count)
                .filter(|&end| end <= total)
                .ok_or_else(|| Error::Format(format!("tensor `{}` extends past the payload", e.name)))?;
            let start = e.offset as usize * 8;
            let values: Vec<f64> = data[start..end as usize * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| Error::Format(err.to_string()))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::decode(&fs::read(path)?)
    }
}

/// Write through a temporary sibling file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.set_meta("arch", &"convnet").unwrap();
        a.set_meta("classes", &vec!["a", "b"]).unwrap();
        a.insert("w", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1., 2., 3., 4., 5., 6.]).unwrap());
        a.insert("b", ArrayD::from_shape_vec(IxDyn(&[0]), vec![]).unwrap());
        a.insert("s", ArrayD::from_elem(IxDyn(&[]), -0.5));
        a
    }

    #[test]
    fn round_trip() {
        let a = sample();
        let back = TensorArchive::decode(&a.encode()).unwrap();
        assert_eq!(a, back);
        assert_eq!(back.meta::<String>("arch").unwrap(), "convnet");
    }

    #[test]
    fn rejects_version_and_truncation() {
        let mut bytes = sample().encode();
        assert!(TensorArchive::decode(&bytes[..bytes.len() - 4]).is_err());
        bytes[4] = 9;
        assert!(matches!(
            TensorArchive::decode(&bytes),
            Err(Error::FormatVersion { found: 9, .. })
        ));
        assert!(TensorArchive::decode(b"CCFT").is_err());
        assert!(TensorArchive::decode(b"XXXX\x01\0\0\0\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn rejects_out_of_bounds_entries() {
        let header = br#"{"metadata":{},"tensors":[{"name":"x","shape":[4],"offset":1}]}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 32]);
        assert!(TensorArchive::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn decode_never_panics(data in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = TensorArchive::decode(&data);
        }

        #[test]
        fn encode_decode_identity(values in proptest::collection::vec(-1e6f64..1e6, 0..40)) {
            let mut a = TensorArchive::new();
            a.insert("v", ArrayD::from_shape_vec(IxDyn(&[values.len()]), values).unwrap());
            prop_assert_eq!(TensorArchive::decode(&a.encode()).unwrap(), a);
        }
    }
}
