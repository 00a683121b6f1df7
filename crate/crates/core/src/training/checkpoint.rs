use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const FORMAT: &str = "commonspace-checkpoint/1";

/// One named weight array; `data` is base64 of little-endian f64s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

/// Self-describing weight container shared by every trained module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    pub config_hash: String,
    /// Architecture description needed to rebuild the module.
    pub metadata: serde_json::Value,
    pub param_hash: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_module(kind: &str, metadata: serde_json::Value, module: &dyn Module, config_hash: &str) -> Self {
        let tensors = module
            .named_params()
            .into_iter()
            .map(|(name, p)| NamedTensor { name, shape: p.value().shape().to_vec(), data: B64.encode(p.value().to_le_bytes()) })
            .collect();
        Self {
            format: FORMAT.into(),
            kind: kind.into(),
            config_hash: config_hash.into(),
            metadata,
            param_hash: module.param_hash(),
            tensors,
        }
    }

    /// Copies the stored weights into `module`, whose parameter names and
    /// shapes must match exactly.
    pub fn load_into(&self, module: &mut dyn Module) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", self.format)));
        }
        let expected: Vec<(String, Vec<usize>)> =
            module.named_params().into_iter().map(|(n, p)| (n, p.value().shape().to_vec())).collect();
        let stored: Vec<(String, Vec<usize>)> = self.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != stored {
            return Err(Error::Checkpoint(format!("{}: parameter layout differs from the module", self.kind)));
        }
        let mut decoded = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let bytes = B64.decode(&t.data).map_err(|e| Error::Checkpoint(format!("{}: {e}", t.name)))?;
            let tensor = Tensor::from_le_bytes(t.shape.clone(), &bytes)
                .ok_or_else(|| Error::Checkpoint(format!("{}: byte length does not match shape", t.name)))?;
            decoded.push(tensor);
        }
        let mut it = decoded.into_iter();
        module.visit_mut("", &mut |_, p| p.set(it.next().expect("layout checked")));
        if module.param_hash() != self.param_hash {
            return Err(Error::Checkpoint(format!("{}: parameter hash mismatch after load", self.kind)));
        }
        Ok(())
    }

    pub fn metadata_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.metadata.clone())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }
}

/// Writes to a sibling temporary file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Conv2d;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Conv2d::new(3, 4, 3, 1, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/conv.json");
        Checkpoint::from_module("conv", serde_json::json!({"k": 3}), &a, "abc").write(&path).unwrap();
        let mut b = Conv2d::new(3, 4, 3, 1, &mut rng);
        assert_ne!(a.param_hash(), b.param_hash());
        let ck = Checkpoint::read(&path).unwrap();
        ck.load_into(&mut b).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_eq!(ck.metadata["k"], 3);
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Conv2d::new(3, 4, 3, 1, &mut rng);
        let mut b = Conv2d::new(3, 5, 3, 1, &mut rng);
        let ck = Checkpoint::from_module("conv", serde_json::Value::Null, &a, "");
        assert!(matches!(ck.load_into(&mut b), Err(Error::Checkpoint(_))));
        let mut bad = ck.clone();
        bad.tensors[0].data = B64.encode([0u8; 3]);
        let mut c = a.clone();
        assert!(bad.load_into(&mut c).is_err());
    }
}
