//! Dataset files: JSON Lines with either inline region features or row
//! references into a little-endian `GDF1` sidecar.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use groupcap_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{tokenize, Dataset, ImageRecord};
use crate::{Error, Result};

const SIDECAR_MAGIC: &[u8; 4] = b"GDF1";

#[derive(Serialize, Deserialize)]
struct Row {
    image_id: String,
    features: FeatureField,
    captions: Vec<String>,
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FeatureField {
    Inline(Vec<Vec<f64>>),
    Ref {
        #[serde(rename = "ref")]
        row_offset: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStorage {
    Inline,
    /// Features go to `<stem>.gdf` next to the JSON Lines file.
    Sidecar,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("gdf")
}

/// Loads and validates a dataset, building the vocabulary with `min_freq`.
pub fn load_dataset(path: impl AsRef<Path>, min_freq: usize) -> Result<Dataset> {
    let records = read_records(path.as_ref())?;
    Dataset::from_records(records, min_freq)
}

/// Reads and validates records without building a vocabulary.
pub fn read_records(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sidecar: Option<HashMap<usize, Tensor>> = None;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: lineno + 1,
            source,
        })?;
        let record_name = value
            .get("image_id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("line {}", lineno + 1), str::to_string);
        for field in ["image_id", "features", "captions", "embedding"] {
            if value.get(field).is_none() {
                return Err(Error::load(record_name, field, "missing"));
            }
        }
        let row: Row = serde_json::from_value(value).map_err(|e| Error::load(record_name.clone(), "record", e.to_string()))?;
        let features = match row.features {
            FeatureField::Inline(rows) => {
                Tensor::from_rows(&rows).map_err(|e| Error::load(&row.image_id, "features", e.to_string()))?
            }
            FeatureField::Ref { row_offset } => {
                if sidecar.is_none() {
                    sidecar = Some(read_sidecar(&sidecar_path(path))?);
                }
                sidecar
                    .as_ref()
                    .and_then(|s| s.get(&row_offset))
                    .cloned()
                    .ok_or_else(|| Error::load(&row.image_id, "features", format!("no sidecar block at row {row_offset}")))?
            }
        };
        let captions = row.captions.iter().map(|c| tokenize(c)).collect();
        records.push(ImageRecord {
            image_id: row.image_id,
            features,
            captions,
            embedding: row.embedding,
        });
    }
    validate_records(&mut records)?;
    Ok(records)
}

/// Checks record invariants and normalizes embeddings to unit length.
pub fn validate_records(records: &mut [ImageRecord]) -> Result<()> {
    let width = records.first().map(|r| r.features.cols());
    let emb_width = records.first().map(|r| r.embedding.len());
    let mut seen = HashMap::new();
    for r in records.iter_mut() {
        let id = r.image_id.clone();
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::load(id, "image_id", "duplicate image id"));
        }
        if r.features.rank() != 2 || r.features.rows() == 0 {
            return Err(Error::load(id, "features", "need at least one region row"));
        }
        if Some(r.features.cols()) != width {
            return Err(Error::load(
                id,
                "features",
                format!("width {} differs from {}", r.features.cols(), width.unwrap_or(0)),
            ));
        }
        if !r.features.is_finite() {
            return Err(Error::load(id, "features", "non-finite value"));
        }
        if r.captions.is_empty() {
            return Err(Error::load(id, "captions", "no captions"));
        }
        if let Some(i) = r.captions.iter().position(Vec::is_empty) {
            return Err(Error::load(id, "captions", format!("caption {i} is empty after tokenization")));
        }
        if Some(r.embedding.len()) != emb_width || r.embedding.is_empty() {
            return Err(Error::load(id, "embedding", "inconsistent or empty embedding"));
        }
        let norm = r.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::load(id, "embedding", "zero or non-finite embedding"));
        }
        for v in &mut r.embedding {
            *v /= norm;
        }
    }
    Ok(())
}

/// Writes records as JSON Lines, one object per image, in order.
pub fn save_dataset(path: impl AsRef<Path>, records: &[ImageRecord], storage: FeatureStorage) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let mut blob = Vec::new();
    let mut row_offset = 0usize;
    if storage == FeatureStorage::Sidecar {
        blob.extend_from_slice(SIDECAR_MAGIC);
    }
    for r in records {
        let features = match storage {
            FeatureStorage::Inline => FeatureField::Inline(r.features.to_rows()),
            FeatureStorage::Sidecar => {
                let (n, d) = (r.features.rows(), r.features.cols());
                blob.extend_from_slice(&(n as u32).to_le_bytes());
                blob.extend_from_slice(&(d as u32).to_le_bytes());
                for v in r.features.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                let f = FeatureField::Ref { row_offset };
                row_offset += n;
                f
            }
        };
        let row = Row {
            image_id: r.image_id.clone(),
            features,
            captions: r.captions.iter().map(|c| c.join(" ")).collect(),
            embedding: r.embedding.clone(),
        };
        serde_json::to_writer(&mut out, &row).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
    }
    write_file(path, &out)?;
    if storage == FeatureStorage::Sidecar {
        write_file(&sidecar_path(path), &blob)?;
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Parses a sidecar into blocks keyed by their cumulative starting row.
fn read_sidecar(path: &Path) -> Result<HashMap<usize, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::load(path.display().to_string(), "features", msg.to_string());
    if bytes.get(..4) != Some(SIDECAR_MAGIC) {
        return Err(bad("sidecar lacks GDF1 header"));
    }
    let mut pos = 4;
    let mut row_offset = 0;
    let mut blocks = HashMap::new();
    let take_u32 = |pos: &mut usize| -> Result<usize> {
        let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated block header"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    while pos < bytes.len() {
        let n = take_u32(&mut pos)?;
        let d = take_u32(&mut pos)?;
        let len = n * d * 8;
        let raw = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated feature block"))?;
        pos += len;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.insert(row_offset, Tensor::new(vec![n, d], data)?);
        row_offset += n;
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::UNK;
    use proptest::prelude::*;

    fn record(id: &str, width: usize, caps: &[&str]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            features: Tensor::new(vec![2, width], (0..2 * width).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap(),
            captions: caps.iter().map(|c| tokenize(c)).collect(),
            embedding: vec![3.0, 4.0],
        }
    }

    #[test]
    fn two_image_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![record("a", 3, &["a red dog", "a dog"]), record("b", 3, &["a cat", "the cat sits"])];
        save_dataset(&path, &recs, FeatureStorage::Inline).unwrap();
        let ds = load_dataset(&path, 2).unwrap();
        assert_eq!(ds.records.len(), 2);
        // counts: a:3 dog:2 cat:2 red:1 the:1 sits:1
        assert_eq!(ds.vocab.tokens(), ["a", "cat", "dog"]);
        assert_eq!(ds.vocab.id("red"), UNK);
        assert!((ds.records[0].embedding[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![record("good", 8, &["a dog"]), record("odd", 7, &["a dog"])];
        save_dataset(&path, &recs, FeatureStorage::Inline).unwrap();
        match read_records(&path) {
            Err(Error::Load { record, field, .. }) => {
                assert_eq!(record, "odd");
                assert_eq!(field, "features");
            }
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_and_empty_caption_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, r#"{"image_id":"x","features":[[1.0]],"embedding":[1.0]}"#).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Load { field: "captions", .. })));
        fs::write(&path, r#"{"image_id":"x","features":[[1.0]],"captions":["?!"],"embedding":[1.0]}"#).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Load { field: "captions", .. })));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut recs = vec![record("a", 3, &["a dog"]), record("b", 3, &["a cat"])];
        recs[1].features = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        save_dataset(&path, &recs, FeatureStorage::Sidecar).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains(r#""features":{"ref":2}"#), "{text}");
        let back = read_records(&path).unwrap();
        assert_eq!(back[0].features, recs[0].features);
        assert_eq!(back[1].features, recs[1].features);
        let blob = fs::read(sidecar_path(&path)).unwrap();
        assert_eq!(&blob[..4], b"GDF1");
        assert_eq!(blob.len(), 4 + (8 + 6 * 8) + (8 + 3 * 8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_is_bit_exact(
            feats in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..5),
            sidecar in any::<bool>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            let recs = vec![ImageRecord {
                image_id: "img".into(),
                features: Tensor::from_rows(&feats).unwrap(),
                captions: vec![tokenize("A photo, of a Dog"), tokenize("dog dog")],
                embedding: vec![1.0, 0.0],
            }];
            let storage = if sidecar { FeatureStorage::Sidecar } else { FeatureStorage::Inline };
            save_dataset(&path, &recs, storage).unwrap();
            let back = read_records(&path).unwrap();
            prop_assert_eq!(back[0].features.data(), recs[0].features.data());
            prop_assert_eq!(&back[0].captions, &recs[0].captions);
        }
    }
}
