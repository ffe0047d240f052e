use std::collections::HashMap;
use std::hash::Hash;

fn counts<T: Clone + Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-`max_n` in `[0, 1]`: geometric mean of corpus-level clipped
/// n-gram precisions for orders `1..=max_n`, times the brevity penalty. The
/// effective reference length per sentence is the closest reference length,
/// the shorter one on ties.
pub fn bleu<T: Clone + Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], max_n: usize) -> f64 {
    assert_eq!(candidates.len(), references.len(), "unaligned BLEU corpora");
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, refs) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap_or(0);
        for n in 1..=max_n {
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, k) in counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in counts(c, n) {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}
