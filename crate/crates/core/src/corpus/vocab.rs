use std::collections::{BTreeMap, HashMap};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token/id mapping with the four reserved ids first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Keeps every token seen at least `min_freq` times, ordered alphabetically.
    pub fn build<'a, I>(tokens: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let kept = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq.max(1))
            .map(|(t, _)| t.to_string());
        Self::from_tokens(kept.collect())
    }

    /// Rebuilds a vocabulary from its non-reserved tokens in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        if id_to_token.len() < 5 {
            return Err(Error::Config("vocabulary has no tokens above the frequency threshold".into()));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, dropping reserved ids other than UNK.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !is_reserved(i) || i == UNK)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[RESERVED.len()..]
    }
}

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn min_frequency_maps_rare_tokens_to_unk() {
        let corpus = toks("a dog a cat a dog bird");
        let v = Vocabulary::build(&corpus, 2).unwrap();
        // a:3 dog:2 cat:1 bird:1
        assert_eq!(v.tokens(), ["a", "dog"]);
        assert_eq!(v.encode(&toks("a cat dog")), vec![4, UNK, 5]);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS]), ["a", "dog"]);
    }

    #[test]
    fn too_small_vocabulary_is_rejected() {
        assert!(Vocabulary::build(&toks("x y z"), 2).is_err());
    }
}
