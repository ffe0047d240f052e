//! Synthetic corpora with one planted image-unique region per image.
//!
//! Shared concepts are split into themes of `n_regions - 1` concepts. Every
//! image belongs to one theme, gets one region near each of the theme's
//! concept centers, and one region near its own unique concept center at a
//! random position. Captions mention concepts through templates; only some of
//! an image's captions mention the unique concept, so its word is distinctive
//! within any group of theme-mates but not dominant in the captions.

use groupcap_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{tokenize, ImageRecord};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub n_regions: usize,
    pub dim: usize,
    pub n_concepts: usize,
    pub captions_per_image: usize,
    /// How many of an image's captions mention its unique concept.
    pub unique_mentions: usize,
    /// Per-coordinate standard deviation of region noise around a center.
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_images: usize, n_regions: usize, dim: usize, n_concepts: usize) -> Self {
        Self {
            seed,
            n_images,
            n_regions,
            dim,
            n_concepts,
            captions_per_image: 5,
            unique_mentions: 2,
            noise: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Argument(m));
        if self.n_images == 0 || self.dim == 0 {
            return fail("n_images and dim must be at least 1".into());
        }
        if self.n_regions < 2 {
            return fail("n_regions must be at least 2 (one shared, one unique)".into());
        }
        if self.n_concepts < self.n_images + self.n_regions - 1 {
            return fail(format!(
                "n_concepts = {} cannot reserve one unique concept per image ({}) plus {} shared concepts",
                self.n_concepts,
                self.n_images,
                self.n_regions - 1
            ));
        }
        if self.captions_per_image == 0 || self.unique_mentions == 0 || self.unique_mentions > self.captions_per_image {
            return fail("need 1 <= unique_mentions <= captions_per_image".into());
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return fail("noise must be finite and nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub records: Vec<ImageRecord>,
    /// Row index of each image's planted unique region.
    pub unique_region: Vec<usize>,
    pub unique_word: Vec<String>,
    pub theme: Vec<usize>,
    /// Words of each theme's shared concepts.
    pub theme_words: Vec<Vec<String>>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic three-syllable pseudo-word for a concept index.
pub fn concept_word(index: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let space = base * base * base;
    let mut j = (index * 7919 + 131) % space;
    let mut w = String::with_capacity(6);
    for _ in 0..3 {
        let s = j % base;
        j /= base;
        w.push(CONSONANTS[s / VOWELS.len()] as char);
        w.push(VOWELS[s % VOWELS.len()] as char);
    }
    w
}

fn pair_caption(rng: &mut ChaCha8Rng, x: &str, y: &str) -> String {
    match rng.gen_range(0..4) {
        0 => format!("a {x} and a {y}"),
        1 => format!("a {x} next to a {y}"),
        2 => format!("there is a {x} with a {y}"),
        _ => format!("a photo of a {x} and a {y}"),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.n_concepts).map(|_| gaussian(&mut rng, cfg.dim, 1.0)).collect();
    let per_theme = cfg.n_regions - 1;
    let n_themes = (cfg.n_concepts - cfg.n_images) / per_theme;
    let theme_concepts = |t: usize| -> Vec<usize> { (0..per_theme).map(|c| cfg.n_images + t * per_theme + c).collect() };

    let mut out = SyntheticCorpus {
        records: Vec::with_capacity(cfg.n_images),
        unique_region: Vec::with_capacity(cfg.n_images),
        unique_word: Vec::with_capacity(cfg.n_images),
        theme: Vec::with_capacity(cfg.n_images),
        theme_words: (0..n_themes).map(|t| theme_concepts(t).into_iter().map(concept_word).collect()).collect(),
    };
    for img in 0..cfg.n_images {
        let theme = img % n_themes;
        let common = theme_concepts(theme);
        let unique_at = rng.gen_range(0..cfg.n_regions);
        let mut concepts = common.clone();
        concepts.insert(unique_at, img);

        let mut rows = Vec::with_capacity(cfg.n_regions);
        for &c in &concepts {
            let noise = gaussian(&mut rng, cfg.dim, cfg.noise);
            rows.push(centers[c].iter().zip(noise).map(|(a, b)| a + b).collect::<Vec<f64>>());
        }
        let mut embedding = vec![0.0; cfg.dim];
        for &c in &concepts {
            for (e, v) in embedding.iter_mut().zip(&centers[c]) {
                *e += v / cfg.n_regions as f64;
            }
        }
        let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        embedding.iter_mut().for_each(|v| *v /= norm);

        let unique_word = concept_word(img);
        let mut mention_unique = vec![false; cfg.captions_per_image];
        mention_unique[..cfg.unique_mentions].fill(true);
        mention_unique.shuffle(&mut rng);
        let captions = mention_unique
            .iter()
            .map(|&with_unique| {
                let mut pick = common.clone();
                pick.shuffle(&mut rng);
                let first = concept_word(pick[0]);
                let text = if with_unique {
                    if rng.gen_bool(0.5) {
                        pair_caption(&mut rng, &unique_word, &first)
                    } else {
                        pair_caption(&mut rng, &first, &unique_word)
                    }
                } else if pick.len() >= 2 {
                    pair_caption(&mut rng, &first, &concept_word(pick[1]))
                } else {
                    format!("a photo of a {first}")
                };
                tokenize(&text)
            })
            .collect();

        out.records.push(ImageRecord {
            image_id: format!("img{img:04}"),
            features: Tensor::from_rows(&rows)?,
            captions,
            embedding,
        });
        out.unique_region.push(unique_at);
        out.unique_word.push(unique_word);
        out.theme.push(theme);
    }
    Ok(out)
}
