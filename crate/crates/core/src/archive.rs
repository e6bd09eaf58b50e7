//! Named-tensor archive: a safetensors file with `F64` arrays and one JSON
//! metadata entry under the key `msgdn`.
//!
//! Tensor order and metadata layout are fixed, so saving the same content
//! twice yields byte-identical files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const METADATA_KEY: &str = "msgdn";

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Archive {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), t.shape().to_vec(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, raw)| {
                TensorView::new(Dtype::F64, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Other(format!("tensor `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert(METADATA_KEY.to_string(), self.metadata.to_string());
        safetensors::serialize(views, &Some(meta))
            .map_err(|e| Error::Other(format!("serialising archive: {e}")))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Archive {
            path: origin.to_path_buf(),
            reason,
        };
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| bad(format!("invalid header: {e}")))?;
        let metadata = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| bad(format!("missing `{METADATA_KEY}` metadata")))?;
        let metadata: serde_json::Value =
            serde_json::from_str(metadata).map_err(|e| bad(format!("metadata: {e}")))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(bad(format!("tensor `{name}` has dtype {:?}, expected F64", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Tensor::new(view.shape().to_vec(), data)?);
        }
        Ok(Archive { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Tensors whose names start with `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_section<'a>(&mut self, prefix: &str, items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) {
        for (k, v) in items {
            self.tensors.insert(format!("{prefix}.{k}"), v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Archive::new(serde_json::json!({"kind": "test", "n": 3}));
        a.tensors.insert("b.w".into(), Tensor::new([2, 2], vec![1.0, -0.5, 1e-300, 3.25]).unwrap());
        a.tensors.insert("a".into(), Tensor::scalar(f64::MIN_POSITIVE));
        let p1 = dir.path().join("one.safetensors");
        let p2 = dir.path().join("two.safetensors");
        a.save(&p1).unwrap();
        let back = Archive::load(&p1).unwrap();
        assert_eq!(back, a);
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(back.section("b")["w"].data()[3], 3.25);
    }

    #[test]
    fn garbage_is_rejected() {
        let err = Archive::from_bytes(b"not an archive", Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Archive { .. }));
    }
}
