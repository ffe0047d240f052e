use std::collections::{HashMap, HashSet};
use std::hash::Hash;

/// Highest n-gram order scored.
pub const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

/// N-gram counts in order of first occurrence, so floating-point sums over
/// them do not depend on hash iteration order.
type Counts<T> = Vec<(Vec<T>, f64)>;

fn ngram_counts<T: Clone + Eq + Hash>(tokens: &[T], n: usize) -> Counts<T> {
    let mut out: Counts<T> = Vec::new();
    let mut index: HashMap<&[T], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            match index.get(w) {
                Some(&i) => out[i].1 += 1.0,
                None => {
                    index.insert(w, out.len());
                    out.push((w.to_vec(), 1.0));
                }
            }
        }
    }
    out
}

/// Document frequencies over a reference corpus, where each document is one
/// image's set of reference captions.
#[derive(Clone, Debug)]
pub struct NGramStats<T: Eq + Hash> {
    df: [HashMap<Vec<T>, usize>; MAX_N],
    docs: usize,
}

impl<T: Clone + Eq + Hash> NGramStats<T> {
    pub fn build<'a, I, D>(documents: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a Vec<T>>,
        T: 'a,
    {
        let mut df: [HashMap<Vec<T>, usize>; MAX_N] = Default::default();
        let mut docs = 0;
        for doc in documents {
            docs += 1;
            let mut seen: [HashSet<Vec<T>>; MAX_N] = Default::default();
            for caption in doc {
                for (n, set) in seen.iter_mut().enumerate() {
                    set.extend(ngram_counts(caption, n + 1).into_iter().map(|(g, _)| g));
                }
            }
            for (n, set) in seen.into_iter().enumerate() {
                for g in set {
                    *df[n].entry(g).or_insert(0) += 1;
                }
            }
        }
        Self { df, docs }
    }

    pub fn documents(&self) -> usize {
        self.docs
    }

    pub fn document_frequency(&self, ngram: &[T]) -> usize {
        match ngram.len() {
            n @ 1..=MAX_N => self.df[n - 1].get(ngram).copied().unwrap_or(0),
            _ => 0,
        }
    }

    fn tfidf(&self, tokens: &[T]) -> ([Counts<T>; MAX_N], [f64; MAX_N]) {
        let log_docs = (self.docs.max(1) as f64).ln();
        let mut vecs: [Counts<T>; MAX_N] = Default::default();
        let mut norms = [0.0; MAX_N];
        for n in 0..MAX_N {
            let mut v = ngram_counts(tokens, n + 1);
            for (g, w) in v.iter_mut() {
                let df = self.df[n].get(g).copied().unwrap_or(0).max(1) as f64;
                *w *= log_docs - df.ln();
                norms[n] += *w * *w;
            }
            norms[n] = norms[n].sqrt();
            vecs[n] = v;
        }
        (vecs, norms)
    }

    /// CIDEr-D of `candidate` against `references`: per order, the clipped
    /// TF-IDF cosine with a Gaussian length penalty, averaged over orders and
    /// references and scaled by 10. Empty candidates or reference lists score 0.
    pub fn cider(&self, candidate: &[T], references: &[Vec<T>]) -> f64 {
        if candidate.is_empty() || references.is_empty() {
            return 0.0;
        }
        let (hv, hn) = self.tfidf(candidate);
        let mut total = 0.0;
        for r in references {
            let (rv, rn) = self.tfidf(r);
            let delta = candidate.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            let mut per_order = 0.0;
            for n in 0..MAX_N {
                if hn[n] == 0.0 || rn[n] == 0.0 {
                    continue;
                }
                let reference: HashMap<&[T], f64> = rv[n].iter().map(|(g, w)| (g.as_slice(), *w)).collect();
                let dot: f64 = hv[n]
                    .iter()
                    .filter_map(|(g, h)| reference.get(g.as_slice()).map(|&rw| h.min(rw) * rw))
                    .sum();
                per_order += penalty * dot / (hn[n] * rn[n]);
            }
            total += per_order / MAX_N as f64;
        }
        10.0 * total / references.len() as f64
    }
}
