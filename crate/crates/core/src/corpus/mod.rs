//! Image records, tokenization, vocabulary, distinctive word sets, dataset
//! files and the synthetic corpus generator.

mod distinct;
mod io;
pub mod synth;
mod tokenize;
pub mod vocab;

use std::collections::HashMap;

use groupcap_tensor::Tensor;

pub use distinct::{distinctive_words, DistinctiveWordSet};
pub(crate) use io::write_file;
pub use io::{load_dataset, read_records, save_dataset, sidecar_path, validate_records, FeatureStorage};
pub use tokenize::tokenize;
pub use vocab::Vocabulary;

use crate::Result;

/// Default minimum token count for a word to enter the vocabulary.
pub const DEFAULT_MIN_FREQ: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    /// Region features, `N_k × d`.
    pub features: Tensor,
    /// Tokenized ground-truth captions.
    pub captions: Vec<Vec<String>>,
    /// Unit-norm retrieval embedding.
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub vocab: Vocabulary,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn from_records(mut records: Vec<ImageRecord>, min_freq: usize) -> Result<Self> {
        validate_records(&mut records)?;
        let vocab = Vocabulary::build(records.iter().flat_map(|r| r.captions.iter().flatten()), min_freq)?;
        Ok(Self::with_vocab(records, vocab))
    }

    /// Uses an existing vocabulary, e.g. one restored from a checkpoint.
    pub fn with_vocab(records: Vec<ImageRecord>, vocab: Vocabulary) -> Self {
        let index = records.iter().enumerate().map(|(i, r)| (r.image_id.clone(), i)).collect();
        Self { records, vocab, index }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.position(image_id).map(|i| &self.records[i])
    }

    pub fn feature_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.features.cols())
    }

    /// Captions of record `i` as vocabulary ids.
    pub fn encoded_captions(&self, i: usize) -> Vec<Vec<usize>> {
        self.records[i].captions.iter().map(|c| self.vocab.encode(c)).collect()
    }
}
