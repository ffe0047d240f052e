use groupcap_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Captioner;
use crate::corpus::vocab::{BOS, EOS};
use crate::gma::argmax;
use crate::{Error, Result};

/// A decoding prefix together with the memory it attends to.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub prefix: Vec<usize>,
    pub memory: Tensor,
}

impl DecoderState {
    pub fn start(memory: Tensor) -> Self {
        Self { prefix: vec![BOS], memory }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Words, without BOS or EOS.
    pub tokens: Vec<usize>,
    /// Log-probability of each chosen token, including EOS when emitted.
    pub log_probs: Vec<f64>,
    /// Whether decoding stopped on EOS rather than the length limit.
    pub ended: bool,
}

impl Decoded {
    /// True when EOS was the first choice.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn score(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// The chosen tokens as teacher-forcing targets, EOS included if emitted.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if self.ended {
            t.push(EOS);
        }
        t
    }
}

impl Captioner {
    /// Next-word log-probabilities after every prefix position, `[len, v]`.
    fn step_log_probs(&self, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let m = g.constant(memory.clone());
        let lp = self.decode_log_probs(&mut g, m, prefix)?;
        Ok(g.value(lp).row(prefix.len() - 1).to_vec())
    }

    /// `P(w_t | prefix, M')` over the whole vocabulary.
    pub fn decode_distribution(&self, state: &DecoderState) -> Result<Vec<f64>> {
        Ok(self.step_log_probs(&state.memory, &state.prefix)?.into_iter().map(f64::exp).collect())
    }

    fn run(&self, memory: &Tensor, mut choose: impl FnMut(&[f64]) -> usize) -> Result<Decoded> {
        let mut prefix = vec![BOS];
        let mut out = Decoded {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            ended: false,
        };
        while out.tokens.len() < self.config.max_len {
            let lp = self.step_log_probs(memory, &prefix)?;
            let w = choose(&lp);
            out.log_probs.push(lp[w]);
            if w == EOS {
                out.ended = true;
                break;
            }
            out.tokens.push(w);
            prefix.push(w);
        }
        Ok(out)
    }

    /// Most probable word at each step; ties go to the lowest id.
    pub fn greedy_decode(&self, memory: &Tensor) -> Result<Decoded> {
        self.run(memory, argmax)
    }

    /// Draws each word from the model distribution. Deterministic per seed.
    pub fn sample_decode(&self, memory: &Tensor, seed: u64) -> Result<Decoded> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.run(memory, |lp| sample(lp, rng.gen::<f64>()))
    }

    /// Beam search ranked by total log-probability while expanding; finished
    /// hypotheses are compared by mean log-probability per step.
    pub fn beam_decode(&self, memory: &Tensor, beam: usize) -> Result<Decoded> {
        if beam == 0 {
            return Err(Error::Argument("beam width must be at least 1".into()));
        }
        struct Hyp {
            prefix: Vec<usize>,
            log_probs: Vec<f64>,
            score: f64,
        }
        let mut live = vec![Hyp {
            prefix: vec![BOS],
            log_probs: Vec::new(),
            score: 0.0,
        }];
        let mut finished: Vec<Decoded> = Vec::new();
        while !live.is_empty() && finished.len() < beam {
            let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
            for (h, hyp) in live.iter().enumerate() {
                let lp = self.step_log_probs(memory, &hyp.prefix)?;
                let mut order: Vec<usize> = (0..lp.len()).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &w in order.iter().take(beam) {
                    cands.push((hyp.score + lp[w], h, w, lp[w]));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (score, h, w, lp) in cands.into_iter().take(beam - finished.len()) {
                let parent = &live[h];
                let mut log_probs = parent.log_probs.clone();
                log_probs.push(lp);
                let words = parent.prefix[1..].to_vec();
                if w == EOS {
                    finished.push(Decoded {
                        tokens: words,
                        log_probs,
                        ended: true,
                    });
                    continue;
                }
                let mut prefix = parent.prefix.clone();
                prefix.push(w);
                if prefix.len() > self.config.max_len {
                    finished.push(Decoded {
                        tokens: prefix[1..].to_vec(),
                        log_probs,
                        ended: false,
                    });
                } else {
                    next.push(Hyp {
                        prefix,
                        log_probs,
                        score,
                    });
                }
            }
            live = next;
        }
        let norm = |d: &Decoded| d.score() / d.log_probs.len() as f64;
        let mut best = 0;
        for i in 1..finished.len() {
            if norm(&finished[i]) > norm(&finished[best]) {
                best = i;
            }
        }
        Ok(finished.swap_remove(best))
    }
}

/// Inverse-CDF draw from log-probabilities with `u ∈ [0, 1)`.
fn sample(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}
