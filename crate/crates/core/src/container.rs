//! `NTC1` named-tensor container.
//!
//! Layout:
//!
//! ```text
//! "NTC1" | u64 LE header length | UTF-8 JSON header | tensor bytes
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype": "f32", "shape": [..], "data_offsets": [begin, end]}` where the
//! offsets are relative to the start of the data section, and the reserved key
//! `__meta__` to a string→string object. Tensors are stored back to back in
//! name order as row-major little-endian `f32`; the last `end` is the length of
//! the data section, which runs to the end of the file.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{digest_tensors, Float, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"NTC1";
pub const META_KEY: &str = "__meta__";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub meta: BTreeMap<String, String>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add every tensor of `params` under `prefix` (joined with a dot when non-empty).
    pub fn insert_params<T: Float, P: ParamSet<T>>(&mut self, prefix: &str, params: &P) {
        for (name, t) in params.named() {
            let key = if prefix.is_empty() { name } else { format!("{prefix}.{name}") };
            self.tensors.insert(key, t.cast());
        }
    }

    /// Tensors stored under `prefix.`, with the prefix stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("metadata key `{key}` missing")))
    }

    /// Digest of the tensor payload (names, shapes, values); metadata excluded.
    pub fn content_digest(&self) -> String {
        digest_tensors(self.tensors.iter().map(|(k, v)| (k.clone(), v)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name == META_KEY {
                return Err(Error::Format(format!("tensor name `{META_KEY}` is reserved")));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Format(format!("tensor `{name}` shape/data length mismatch")));
            }
            let end = offset + 4 * t.data.len();
            header.insert(
                name.clone(),
                json!({ "dtype": "f32", "shape": t.shape, "data_offsets": [offset, end] }),
            );
            offset = end;
        }
        header.insert(
            META_KEY.to_string(),
            Value::Object(self.meta.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect()),
        );
        let header_bytes = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| Error::Format(format!("header serialization: {e}")))?;
        let mut out = Vec::with_capacity(12 + header_bytes.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing NTC1 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let data_start = 12usize
            .checked_add(header_len)
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
        let header: Value = serde_json::from_slice(&bytes[12..data_start])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(Error::Format("header must be a JSON object".into()));
        };
        let data = &bytes[data_start..];

        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        for (name, entry) in header {
            if name == META_KEY {
                let Value::Object(m) = entry else {
                    return Err(Error::Format("__meta__ must be an object".into()));
                };
                for (k, v) in m {
                    let Value::String(s) = v else {
                        return Err(Error::Format(format!("metadata `{k}` must be a string")));
                    };
                    meta.insert(k, s);
                }
                continue;
            }
            let dtype = entry.get("dtype").and_then(Value::as_str);
            if dtype != Some("f32") {
                return Err(Error::Format(format!("tensor `{name}` has unsupported dtype {dtype:?}")));
            }
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(|v| v.as_u64().map(|x| x as usize)).collect())
                .ok_or_else(|| Error::Format(format!("tensor `{name}` has a malformed shape")))?;
            let offsets: Vec<usize> = entry
                .get("data_offsets")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(|v| v.as_u64().map(|x| x as usize)).collect())
                .filter(|o: &Vec<usize>| o.len() == 2)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` has malformed data_offsets")))?;
            entries.push((name, shape, offsets[0], offsets[1]));
        }

        entries.sort_by_key(|e| e.2);
        let mut cursor = 0usize;
        let mut tensors = BTreeMap::new();
        for (name, shape, begin, end) in entries {
            if begin != cursor || end < begin {
                return Err(Error::Format(format!("tensor `{name}` offsets overlap or leave a gap")));
            }
            if end - begin != 4 * shape.iter().product::<usize>() {
                return Err(Error::Format(format!("tensor `{name}` byte range does not match its shape")));
            }
            if end > data.len() {
                return Err(Error::Format(format!("tensor `{name}` extends past end of file")));
            }
            let values = data[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Tensor { shape, data: values });
            cursor = end;
        }
        if cursor != data.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("ntc.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run the upstream command first".into(),
            });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.tensors.insert("b".into(), Tensor { shape: vec![2, 2], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5] });
        c.tensors.insert("a".into(), Tensor { shape: vec![3], data: vec![0.1, 0.2, 0.3] });
        c.meta.insert("step".into(), "12".into());
        c
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"NTC1");
        let hl = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert_eq!(header["a"]["data_offsets"], json!([0, 12]));
        assert_eq!(header["b"]["data_offsets"], json!([12, 28]));
        assert_eq!(header["b"]["shape"], json!([2, 2]));
        assert_eq!(header["__meta__"]["step"], json!("12"));
        assert_eq!(bytes.len(), 12 + hl + 28);
        assert_eq!(&bytes[12 + hl..12 + hl + 4], &0.1f32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(TensorContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TensorContainer::from_bytes(&extra).is_err());
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(TensorContainer::from_bytes(&bad_magic).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9]{1,4})?", prop::collection::vec(any::<u32>(), 0..20), 0..6),
            meta in prop::collection::btree_map("[a-z_]{1,8}", ".{0,12}", 0..4),
        ) {
            let mut c = TensorContainer::new();
            for (k, bits) in tensors {
                let n = bits.len();
                c.tensors.insert(k, Tensor { shape: vec![n], data: bits.into_iter().map(f32::from_bits).collect() });
            }
            c.meta = meta;
            let bytes = c.to_bytes().unwrap();
            let back = TensorContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back.meta, &c.meta);
            prop_assert_eq!(back.tensors.len(), c.tensors.len());
            for (k, t) in &c.tensors {
                let b = &back.tensors[k];
                prop_assert_eq!(&b.shape, &t.shape);
                let lhs: Vec<u32> = b.data.iter().map(|x| x.to_bits()).collect();
                let rhs: Vec<u32> = t.data.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(lhs, rhs);
            }
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
