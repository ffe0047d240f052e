//! Caption accuracy (CIDEr-D, BLEU) and distinctiveness (CIDErBtw, CIDErRank,
//! DisWordRate) metrics, and the evaluation report.

mod bleu;
mod cider;

use std::fmt;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bleu::bleu;
pub use cider::{NGramStats, MAX_N};

use crate::corpus::{distinctive_words, Dataset, DistinctiveWordSet};
use crate::grouping::{GroupIndex, SimilarImageGroup};
use crate::{Error, Result};

/// Per-image CIDEr scores of one candidate against every group member, and
/// the target's rank among them.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupScores {
    pub s: Vec<f64>,
    /// 1-based; ties favour the target.
    pub rank: usize,
}

/// Mean CIDEr of `candidate` against the captions of every group member
/// except `target`. Lower is more distinctive.
pub fn cider_btw<T: Clone + Eq + Hash>(
    stats: &NGramStats<T>,
    candidate: &[T],
    group_refs: &[&[Vec<T>]],
    target: usize,
) -> f64 {
    let others: Vec<f64> = group_refs
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != target)
        .map(|(_, refs)| stats.cider(candidate, refs))
        .collect();
    if others.is_empty() {
        0.0
    } else {
        others.iter().sum::<f64>() / others.len() as f64
    }
}

/// `s_k` averages single-reference CIDEr over image `k`'s captions.
pub fn cider_rank<T: Clone + Eq + Hash>(
    stats: &NGramStats<T>,
    candidate: &[T],
    group_refs: &[&[Vec<T>]],
    target: usize,
) -> GroupScores {
    let s: Vec<f64> = group_refs
        .iter()
        .map(|refs| {
            if refs.is_empty() {
                return 0.0;
            }
            refs.iter().map(|r| stats.cider(candidate, std::slice::from_ref(r))).sum::<f64>() / refs.len() as f64
        })
        .collect();
    let rank = 1 + s.iter().enumerate().filter(|&(k, &v)| k != target && v > s[target]).count();
    GroupScores { s, rank }
}

/// Best fraction, over the target's captions, of that caption's distinctive
/// words that the candidate also uses. `None` when no target caption contains
/// a distinctive word, in which case the image is left out of corpus averages.
pub fn dis_word_rate(candidate: &[usize], target_caps: &[Vec<usize>], wd: &DistinctiveWordSet) -> Option<f64> {
    let mut best: Option<f64> = None;
    for cap in target_caps {
        let mut in_ref: Vec<usize> = cap.iter().copied().filter(|w| wd.contains(*w)).collect();
        in_ref.sort_unstable();
        in_ref.dedup();
        if in_ref.is_empty() {
            continue;
        }
        let hit = in_ref.iter().filter(|w| candidate.contains(w)).count();
        let rate = hit as f64 / in_ref.len() as f64;
        best = Some(best.map_or(rate, |b: f64| b.max(rate)));
    }
    best
}

/// One generated caption, as written by `caption` and read by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub image_id: String,
    pub caption: String,
    pub tokens: Vec<String>,
    /// Set when decoding stopped immediately, producing no words.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

pub fn captions_to_jsonl(lines: &[CaptionLine]) -> Vec<u8> {
    let mut out = Vec::new();
    for l in lines {
        serde_json::to_writer(&mut out, l).expect("caption serializes");
        out.push(b'\n');
    }
    out
}

pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionLine>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

/// Corpus scores. Every value except `cider_rank` is scaled by 100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "CIDEr")]
    pub cider: f64,
    #[serde(rename = "BLEU3")]
    pub bleu3: f64,
    #[serde(rename = "BLEU4")]
    pub bleu4: f64,
    #[serde(rename = "CIDErBtw")]
    pub cider_btw: f64,
    #[serde(rename = "CIDErRank")]
    pub cider_rank: f64,
    #[serde(rename = "DisWordRate")]
    pub dis_word_rate: f64,
    pub n_images: usize,
    pub n_excluded_diswordrate: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("CIDEr", format!("{:.2}", self.cider)),
            ("BLEU3", format!("{:.2}", self.bleu3)),
            ("BLEU4", format!("{:.2}", self.bleu4)),
            ("CIDErBtw", format!("{:.2}", self.cider_btw)),
            ("CIDErRank", format!("{:.3}", self.cider_rank)),
            ("DisWordRate", format!("{:.2}", self.dis_word_rate)),
            ("n_images", self.n_images.to_string()),
            ("n_excluded_diswordrate", self.n_excluded_diswordrate.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<24}{v:>10}")?;
        }
        writeln!(f, "(CIDErBtw: per-image mean over GT, then mean over similar images)")
    }
}

/// Scores `captions` against the dataset's ground truth. Each image is scored
/// within the group that [`GroupIndex`] assigns it; document frequencies come
/// from all of the dataset's captions.
pub fn evaluate(dataset: &Dataset, groups: &[SimilarImageGroup], captions: &[CaptionLine]) -> Result<EvalReport> {
    if captions.is_empty() {
        return Err(Error::Argument("no captions to evaluate".into()));
    }
    let stats = NGramStats::build(dataset.records.iter().map(|r| &r.captions));
    let index = GroupIndex::new(groups);
    let mut cider_sum = 0.0;
    let mut btw_sum = 0.0;
    let mut rank_sum = 0.0;
    let (mut dwr_sum, mut excluded) = (0.0, 0usize);
    let mut cands = Vec::with_capacity(captions.len());
    let mut refs = Vec::with_capacity(captions.len());
    for line in captions {
        let pos = dataset
            .position(&line.image_id)
            .ok_or_else(|| Error::load(&line.image_id, "image_id", "not in the dataset"))?;
        let (gi, target) = index
            .locate(&line.image_id)
            .ok_or_else(|| Error::Grouping(format!("image `{}` is in no group", line.image_id)))?;
        let members: Vec<usize> = groups[gi]
            .members
            .iter()
            .map(|m| dataset.position(m).ok_or_else(|| Error::load(m, "members", "group member not in the dataset")))
            .collect::<Result<_>>()?;
        let group_refs: Vec<&[Vec<String>]> = members.iter().map(|&m| dataset.records[m].captions.as_slice()).collect();

        cider_sum += stats.cider(&line.tokens, &dataset.records[pos].captions);
        btw_sum += cider_btw(&stats, &line.tokens, &group_refs, target);
        rank_sum += cider_rank(&stats, &line.tokens, &group_refs, target).rank as f64;

        let encoded: Vec<Vec<Vec<usize>>> = members.iter().map(|&m| dataset.encoded_captions(m)).collect();
        let similar: Vec<&[Vec<usize>]> = encoded
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != target)
            .map(|(_, c)| c.as_slice())
            .collect();
        let wd = distinctive_words(&encoded[target], &similar);
        match dis_word_rate(&dataset.vocab.encode(&line.tokens), &encoded[target], &wd) {
            Some(r) => dwr_sum += r,
            None => excluded += 1,
        }
        cands.push(line.tokens.clone());
        refs.push(dataset.records[pos].captions.clone());
    }
    let n = captions.len() as f64;
    let included = captions.len() - excluded;
    Ok(EvalReport {
        cider: 100.0 * cider_sum / n,
        bleu3: 100.0 * bleu(&cands, &refs, 3),
        bleu4: 100.0 * bleu(&cands, &refs, 4),
        cider_btw: 100.0 * btw_sum / n,
        cider_rank: rank_sum / n,
        dis_word_rate: if included == 0 { 0.0 } else { 100.0 * dwr_sum / included as f64 },
        n_images: captions.len(),
        n_excluded_diswordrate: excluded,
    })
}
