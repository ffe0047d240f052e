//! Similar-image groups built from retrieval embeddings.
//!
//! Groups are formed by repeatedly drawing a random seed image from the pool,
//! retrieving its `k` nearest neighbours among the images still in the pool,
//! and removing all `k + 1`. Images left over once fewer than `k + 1` remain
//! each become the target of their own group, with neighbours drawn from the
//! whole dataset.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_file, ImageRecord};
use crate::{Error, Result};

/// Default group size minus one.
pub const DEFAULT_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarImageGroup {
    pub epoch: usize,
    /// Member ids; position 0 is the seed target.
    pub members: Vec<String>,
    pub leftover: bool,
}

impl SimilarImageGroup {
    pub fn k(&self) -> usize {
        self.members.len().saturating_sub(1)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` pool entries most cosine-similar to `target`, best first; equal
/// similarities are ordered by ascending id.
pub fn knn_retrieve(target: &[f64], pool: &[(&str, &[f64])], k: usize) -> Result<Vec<String>> {
    if pool.len() < k {
        return Err(Error::Grouping(format!("pool of {} cannot supply {k} neighbours", pool.len())));
    }
    let mut scored: Vec<(f64, &str)> = pool.iter().map(|&(id, e)| (cosine(target, e), id)).collect();
    scored.sort_by(|a, b| rank_order(a.0, a.1, b.0, b.1));
    Ok(scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
}

fn rank_order(sa: f64, ida: &str, sb: f64, idb: &str) -> Ordering {
    sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| ida.cmp(idb))
}

fn nearest(records: &[ImageRecord], target: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let t = &records[target].embedding;
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&c| c != target)
        .map(|&c| (cosine(t, &records[c].embedding), c))
        .collect();
    scored.sort_by(|a, b| rank_order(a.0, &records[a.1].image_id, b.0, &records[b.1].image_id));
    scored.into_iter().take(k).map(|(_, c)| c).collect()
}

/// Builds one epoch's groups. Deterministic for a given `seed`.
pub fn build_groups(records: &[ImageRecord], k: usize, seed: u64, epoch: usize) -> Result<Vec<SimilarImageGroup>> {
    if k == 0 {
        return Err(Error::Grouping("k must be at least 1".into()));
    }
    if records.len() < k + 1 {
        return Err(Error::Grouping(format!("{} images cannot form a group of {}", records.len(), k + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..records.len()).collect();
    let mut groups = Vec::new();
    let ids = |idx: &[usize]| idx.iter().map(|&i| records[i].image_id.clone()).collect::<Vec<_>>();
    while pool.len() > k {
        let target = pool.remove(rng.gen_range(0..pool.len()));
        let neighbours = nearest(records, target, &pool, k);
        pool.retain(|p| !neighbours.contains(p));
        let mut members = vec![target];
        members.extend(neighbours);
        groups.push(SimilarImageGroup {
            epoch,
            members: ids(&members),
            leftover: false,
        });
    }
    let everyone: Vec<usize> = (0..records.len()).collect();
    for target in pool {
        let mut members = vec![target];
        members.extend(nearest(records, target, &everyone, k));
        groups.push(SimilarImageGroup {
            epoch,
            members: ids(&members),
            leftover: true,
        });
    }
    Ok(groups)
}

/// Maps each image to the group it is evaluated in: the leftover group it
/// seeds if there is one, otherwise the regular group that contains it.
#[derive(Clone, Debug)]
pub struct GroupIndex {
    by_image: HashMap<String, (usize, usize)>,
}

impl GroupIndex {
    pub fn new(groups: &[SimilarImageGroup]) -> Self {
        let mut by_image = HashMap::new();
        for (gi, g) in groups.iter().enumerate() {
            if g.leftover {
                by_image.insert(g.members[0].clone(), (gi, 0));
            } else {
                for (pos, m) in g.members.iter().enumerate() {
                    by_image.entry(m.clone()).or_insert((gi, pos));
                }
            }
        }
        Self { by_image }
    }

    /// `(group index, member position)` for an image.
    pub fn locate(&self, image_id: &str) -> Option<(usize, usize)> {
        self.by_image.get(image_id).copied()
    }
}

pub fn write_groups(path: impl AsRef<Path>, groups: &[SimilarImageGroup]) -> Result<()> {
    write_file(path.as_ref(), &groups_to_jsonl(groups))
}

pub fn groups_to_jsonl(groups: &[SimilarImageGroup]) -> Vec<u8> {
    let mut out = Vec::new();
    for g in groups {
        serde_json::to_writer(&mut out, g).expect("group serializes");
        out.push(b'\n');
    }
    out
}

pub fn read_groups(path: impl AsRef<Path>) -> Result<Vec<SimilarImageGroup>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut groups = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let g: SimilarImageGroup = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        if g.members.len() < 2 {
            return Err(Error::Grouping(format!("line {}: group needs at least two members", i + 1)));
        }
        groups.push(g);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use groupcap_tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn records(embeddings: Vec<Vec<f64>>) -> Vec<ImageRecord> {
        embeddings
            .into_iter()
            .enumerate()
            .map(|(i, e)| ImageRecord {
                image_id: format!("img{i:03}"),
                features: Tensor::zeros(&[1, 1]),
                captions: vec![vec!["x".into()]],
                embedding: e,
            })
            .collect()
    }

    fn random_records(n: usize, seed: u64) -> Vec<ImageRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        records((0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
    }

    #[test]
    fn exact_match_ranks_first() {
        let pool = [("b", &[0.0, 1.0][..]), ("a", &[0.6, 0.8][..]), ("c", &[1.0, 0.0][..])];
        assert_eq!(knn_retrieve(&[0.6, 0.8], &pool, 1).unwrap(), ["a"]);
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let pool = [("z", &[0.0, 1.0, 0.0][..]), ("m", &[0.0, 0.0, 1.0][..])];
        assert_eq!(knn_retrieve(&[1.0, 0.0, 0.0], &pool, 1).unwrap(), ["m"]);
    }

    #[test]
    fn pool_too_small() {
        let pool = [("a", &[1.0][..])];
        assert!(matches!(knn_retrieve(&[1.0], &pool, 2), Err(Error::Grouping(_))));
    }

    #[test]
    fn knn_matches_full_sort() {
        let recs = random_records(11, 9);
        let pool: Vec<(&str, &[f64])> = recs[1..].iter().map(|r| (r.image_id.as_str(), r.embedding.as_slice())).collect();
        let got = knn_retrieve(&recs[0].embedding, &pool, 3).unwrap();
        let mut all: Vec<(f64, &str)> = pool.iter().map(|(id, e)| (cosine(&recs[0].embedding, e), *id)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let want: Vec<&str> = all.iter().take(3).map(|x| x.1).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn twelve_images_make_two_disjoint_groups() {
        let recs = random_records(12, 1);
        let groups = build_groups(&recs, 5, 42, 0).unwrap();
        assert_eq!(groups.len(), 2);
        assert!(groups.iter().all(|g| !g.leftover && g.members.len() == 6));
        let all: HashSet<&String> = groups.iter().flat_map(|g| &g.members).collect();
        assert_eq!(all.len(), 12);
    }

    #[test]
    fn fourteen_images_leave_two_leftover_groups() {
        let recs = random_records(14, 2);
        let groups = build_groups(&recs, 5, 42, 3).unwrap();
        let regular: Vec<_> = groups.iter().filter(|g| !g.leftover).collect();
        let leftover: Vec<_> = groups.iter().filter(|g| g.leftover).collect();
        assert_eq!((regular.len(), leftover.len()), (2, 2));
        let covered: HashSet<&String> = regular.iter().flat_map(|g| &g.members).collect();
        assert_eq!(covered.len(), 12);
        for g in &leftover {
            assert!(!covered.contains(&g.members[0]));
            assert_eq!(g.members.len(), 6);
        }
        assert!(groups.iter().all(|g| g.epoch == 3));
    }

    #[test]
    fn deterministic_per_seed() {
        let recs = random_records(30, 3);
        assert_eq!(build_groups(&recs, 5, 1, 0).unwrap(), build_groups(&recs, 5, 1, 0).unwrap());
        assert_ne!(build_groups(&recs, 5, 1, 0).unwrap(), build_groups(&recs, 5, 2, 0).unwrap());
    }

    #[test]
    fn too_few_images() {
        assert!(matches!(build_groups(&random_records(5, 0), 5, 0, 0), Err(Error::Grouping(_))));
    }

    /// Replays the construction and checks each regular group's neighbours
    /// against the pool as it stood when the group was formed.
    fn replay_ok(recs: &[ImageRecord], groups: &[SimilarImageGroup], k: usize) -> bool {
        let pos: HashMap<&str, usize> = recs.iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect();
        let mut pool: HashSet<usize> = (0..recs.len()).collect();
        for g in groups.iter().filter(|g| !g.leftover) {
            let t = pos[g.members[0].as_str()];
            pool.remove(&t);
            let mut cands: Vec<usize> = pool.iter().copied().collect();
            cands.sort();
            let want = nearest(recs, t, &cands, k);
            let got: Vec<usize> = g.members[1..].iter().map(|m| pos[m.as_str()]).collect();
            if want != got {
                return false;
            }
            for m in &got {
                pool.remove(m);
            }
        }
        true
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn coverage_disjointness_and_replay(n in 2usize..40, k in 1usize..6, seed in any::<u64>()) {
            prop_assume!(n > k);
            let recs = random_records(n, seed ^ 0x5eed);
            let groups = build_groups(&recs, k, seed, 0).unwrap();
            let mut seen = HashSet::new();
            for g in groups.iter().filter(|g| !g.leftover) {
                prop_assert_eq!(g.members.len(), k + 1);
                for m in &g.members {
                    prop_assert!(seen.insert(m.clone()), "{} twice", m);
                }
            }
            for g in &groups {
                let distinct: HashSet<&String> = g.members.iter().collect();
                prop_assert_eq!(distinct.len(), k + 1);
            }
            let idx = GroupIndex::new(&groups);
            for r in &recs {
                prop_assert!(idx.locate(&r.image_id).is_some());
            }
            prop_assert!(replay_ok(&recs, &groups, k));
        }
    }
}
