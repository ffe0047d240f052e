//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! "GDC1"
//! u32 header length, header JSON {"model": ModelConfig, "vocab": [word, ...]}
//! u32 parameter count
//! per parameter: u32 name length, name, u32 rank, u64 dims..., f64 values...
//! ```

use std::path::Path;

use groupcap_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Captioner, ModelConfig};
use crate::corpus::{write_file, Vocabulary};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GDC1";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vec<String>,
}

pub fn write_checkpoint(model: &Captioner, vocab: &Vocabulary) -> Result<Vec<u8>> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary of {} words for a model of {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        vocab: vocab.tokens().to_vec(),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("dimension {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model from its stored config, then overwrites every
/// parameter with the stored values.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(Captioner, Vocabulary)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let hlen = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    let mut model = Captioner::new(header.model)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint("vocabulary size disagrees with the model config".into()));
    }
    let count = r.u32()?;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, model has {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if model.params.value(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {shape:?}, model expects {:?}",
                model.params.value(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let p = model.params.get_mut(id);
        p.value = Tensor::new(shape, data)?;
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok((model, vocab))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Captioner, vocab: &Vocabulary) -> Result<()> {
    write_file(path.as_ref(), &write_checkpoint(model, vocab)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Captioner, Vocabulary)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
