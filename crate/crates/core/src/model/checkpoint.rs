//! Binary checkpoint container.
//!
//! Layout: the four bytes `TPRK`, a little-endian `u32` format version, a
//! little-endian `u32` byte length followed by that many bytes of JSON
//! metadata, then every tensor of the manifest as raw little-endian values in
//! manifest order. Model tensors come first; auxiliary tensors such as a
//! classifier head follow them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, Model, ModelConfig, Real};
use crate::error::{Error, Result};
use crate::text::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPRK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl ManifestEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
    /// Free-form run information (method, task, templates, fingerprint).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A tensor stored alongside the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub model: Model<F>,
    pub vocab: Vocab,
    pub extra: serde_json::Value,
    pub aux: Vec<NamedTensor<F>>,
}

impl<F: Real> Checkpoint<F> {
    pub fn new(model: Model<F>, vocab: Vocab) -> Self {
        Checkpoint {
            model,
            vocab,
            extra: serde_json::Value::Null,
            aux: Vec::new(),
        }
    }

    pub fn aux_tensor(&self, name: &str) -> Option<&NamedTensor<F>> {
        self.aux.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = F::PRECISION.dtype().to_string();
        let mut tensors: Vec<ManifestEntry> = self
            .model
            .layout()
            .tensors
            .iter()
            .map(|t| ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: dtype.clone(),
            })
            .collect();
        tensors.extend(self.aux.iter().map(|t| ManifestEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: dtype.clone(),
        }));
        let mut config = self.model.config().clone();
        config.precision = F::PRECISION;
        let meta = CheckpointMeta {
            config,
            vocab: self.vocab.to_json(),
            tensors,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let payload = self.model.params.len() + self.aux.iter().map(|t| t.data.len()).sum::<usize>();
        let mut out = Vec::with_capacity(12 + json.len() + payload * F::PRECISION.bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for &x in &self.model.params {
            x.write_le(&mut out);
        }
        for t in &self.aux {
            for &x in &t.data {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: String| Error::checkpoint(path, m);
        if bytes.len() < 12 {
            return Err(err(format!("file is {} bytes, too short for a header", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err(format!("bad magic bytes {:?}, expected \"TPRK\"", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let meta_end = 12 + meta_len;
        if bytes.len() < meta_end {
            return Err(err("metadata block is truncated".into()));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(&bytes[12..meta_end]).map_err(|e| err(format!("metadata is not valid JSON: {e}")))?;
        if meta.config.precision != F::PRECISION {
            return Err(err(format!(
                "checkpoint stores {} tensors but {} was requested",
                meta.config.precision.dtype(),
                F::PRECISION.dtype()
            )));
        }
        let vocab = Vocab::from_json(meta.vocab.clone())?;
        if vocab.len() != meta.config.vocab_size {
            return Err(err(format!(
                "vocabulary has {} entries but config says {}",
                vocab.len(),
                meta.config.vocab_size
            )));
        }
        meta.config.validate()?;
        let layout = Layout::new(&meta.config);
        if meta.tensors.len() < layout.tensors.len() {
            return Err(err(format!(
                "manifest lists {} tensors, the model needs {}",
                meta.tensors.len(),
                layout.tensors.len()
            )));
        }
        for (want, got) in layout.tensors.iter().zip(&meta.tensors) {
            if want.name != got.name || want.shape != got.shape {
                return Err(err(format!(
                    "tensor {} has shape {:?} in the manifest but {} {:?} in the model",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        if let Some(bad) = meta.tensors.iter().find(|t| t.dtype != F::PRECISION.dtype()) {
            return Err(err(format!("tensor {} has dtype {}", bad.name, bad.dtype)));
        }
        let width = F::PRECISION.bytes();
        let total: usize = meta.tensors.iter().map(ManifestEntry::len).sum();
        let body = &bytes[meta_end..];
        if body.len() < total * width {
            return Err(err(format!(
                "tensor block is truncated: {} bytes present, {} expected",
                body.len(),
                total * width
            )));
        }
        if body.len() > total * width {
            return Err(err(format!(
                "{} trailing bytes after the tensor block",
                body.len() - total * width
            )));
        }
        let mut values = body.chunks_exact(width).map(F::read_le);
        let params: Vec<F> = values.by_ref().take(layout.total).collect();
        if params.iter().any(|x| !x.is_finite()) {
            return Err(err("model parameters contain non-finite values".into()));
        }
        let aux = meta.tensors[layout.tensors.len()..]
            .iter()
            .map(|t| NamedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: values.by_ref().take(t.len()).collect(),
            })
            .collect();
        let model = Model::from_params(meta.config, params)?;
        Ok(Checkpoint {
            model,
            vocab,
            extra: meta.extra,
            aux,
        })
    }
}

pub fn save_checkpoint<F: Real>(checkpoint: &Checkpoint<F>, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Reads only the metadata block, e.g. to find out the stored precision.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint(path, "not a checkpoint file"));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = (12 + meta_len).min(bytes.len());
    serde_json::from_slice(&bytes[12..end]).map_err(|e| Error::checkpoint(path, format!("metadata is not valid JSON: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitMode;
    use std::collections::HashMap;

    fn vocab(n: usize) -> Vocab {
        let mut counts = HashMap::new();
        for i in 0..n {
            counts.insert(format!("w{i}"), 1usize);
        }
        Vocab::from_counts(&counts, [])
    }

    fn small() -> Checkpoint<f32> {
        let v = vocab(20);
        let mut cfg = ModelConfig::with_vocab(v.len());
        cfg.d_model = 8;
        cfg.d_ffn = 8;
        let model = Model::init(cfg, 9, InitMode::Random).unwrap();
        Checkpoint::new(model, v)
    }

    #[test]
    fn round_trip_preserves_bits() {
        let ck = small();
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(
            ck.model.params.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            back.model.params.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.vocab, ck.vocab);
    }

    #[test]
    fn aux_tensors_round_trip() {
        let mut ck = small();
        ck.aux.push(NamedTensor {
            name: "head.w".into(),
            shape: vec![2, 3],
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5],
        });
        ck.extra = serde_json::json!({"method": "classification"});
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.aux, ck.aux);
        assert_eq!(back.extra, ck.extra);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = small().to_bytes();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad, p), Err(Error::Checkpoint { message, .. }) if message.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad, p), Err(Error::Checkpoint { message, .. }) if message.contains("version")));
        let bad = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::<f32>::from_bytes(bad, p), Err(Error::Checkpoint { message, .. }) if message.contains("truncated")));
        assert!(Checkpoint::<f64>::from_bytes(&bytes, p).is_err());
    }

    #[test]
    fn shape_disagreement_is_reported() {
        let ck = small();
        let bytes = ck.to_bytes();
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
        meta["tensors"][1]["shape"] = serde_json::json!([7]);
        let json = serde_json::to_vec(&meta).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + meta_len..]);
        let e = Checkpoint::<f32>::from_bytes(&out, Path::new("mem")).unwrap_err();
        assert!(e.to_string().contains("shape"), "{e}");
    }

    #[test]
    fn file_size_is_header_plus_four_bytes_per_parameter() {
        let v = vocab(40);
        let cfg = ModelConfig::with_vocab(v.len());
        let n = cfg.param_count();
        let ck = Checkpoint::new(Model::<f32>::init(cfg, 0, InitMode::Random).unwrap(), v);
        let bytes = ck.to_bytes();
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + meta_len + 4 * n);
    }
}
