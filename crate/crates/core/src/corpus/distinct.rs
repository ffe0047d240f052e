use std::collections::BTreeSet;

use super::vocab::{is_reserved, UNK};

/// Words found in the target's captions and in none of the similar images'.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DistinctiveWordSet {
    pub words: BTreeSet<usize>,
}

impl DistinctiveWordSet {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.words.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().copied()
    }
}

fn word_set<'a>(captions: impl IntoIterator<Item = &'a Vec<usize>>) -> BTreeSet<usize> {
    captions.into_iter().flatten().copied().collect()
}

/// Set difference of the target's caption words and the union of every
/// similar image's caption words. Reserved ids and UNK never qualify.
pub fn distinctive_words(target: &[Vec<usize>], similar: &[&[Vec<usize>]]) -> DistinctiveWordSet {
    let others = word_set(similar.iter().flat_map(|caps| caps.iter()));
    let words = word_set(target)
        .into_iter()
        .filter(|&w| !is_reserved(w) && w != UNK && !others.contains(&w))
        .collect();
    DistinctiveWordSet { words }
}
