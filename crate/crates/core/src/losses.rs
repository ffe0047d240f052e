//! Cross-entropy, self-critical, distinctive-word and memory-classification
//! losses, and their adaptive combination.

use groupcap_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS};
use crate::corpus::DistinctiveWordSet;
use crate::metrics::NGramStats;
use crate::model::Captioner;
use crate::{Error, Result};

/// Target share of the base loss for each auxiliary term.
pub const AUX_SHARE: f64 = 0.25;
pub const ALPHA_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Xe,
    Rl,
}

/// How the distinctive-word loss sums over timesteps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisLossMode {
    /// Every distinctive word at every step.
    #[default]
    Literal,
    /// Only steps whose ground-truth word is distinctive, on that word.
    Gated,
}

impl std::str::FromStr for DisLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "gated" => Ok(Self::Gated),
            _ => Err(Error::Argument(format!("disloss mode `{s}` is not `literal` or `gated`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_c: f64,
    pub alpha_r: f64,
    pub alpha_d: f64,
    pub alpha_m: f64,
    pub stage: Stage,
}

impl LossWeights {
    /// Stage weights with the auxiliary weights chosen so each auxiliary term
    /// contributes a quarter of the base loss magnitude.
    pub fn adaptive(stage: Stage, base: f64, l_d: f64, l_m: f64) -> Self {
        let (alpha_c, alpha_r) = match stage {
            Stage::Xe => (1.0, 0.0),
            Stage::Rl => (0.0, 1.0),
        };
        Self {
            alpha_c,
            alpha_r,
            alpha_d: AUX_SHARE * base.abs() / (l_d.abs() + ALPHA_EPS),
            alpha_m: AUX_SHARE * base.abs() / (l_m.abs() + ALPHA_EPS),
            stage,
        }
    }
}

/// Loss values of one step or target. `alpha_d`/`alpha_m` are the weights
/// effectively applied (contribution divided by loss, 0 when the loss is 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_xe: f64,
    pub l_r: f64,
    pub l_d: f64,
    pub l_m: f64,
    pub alpha_d: f64,
    pub alpha_m: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_xe, self.l_r, self.l_d, self.l_m, self.alpha_d, self.alpha_m, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Sums losses and total; alphas become contribution-weighted.
    pub fn sum(parts: &[LossBundle]) -> Self {
        let mut out = LossBundle::default();
        let (mut cd, mut cm) = (0.0, 0.0);
        for p in parts {
            out.l_xe += p.l_xe;
            out.l_r += p.l_r;
            out.l_d += p.l_d;
            out.l_m += p.l_m;
            out.total += p.total;
            cd += p.alpha_d * p.l_d;
            cm += p.alpha_m * p.l_m;
        }
        out.alpha_d = if out.l_d == 0.0 { 0.0 } else { cd / out.l_d };
        out.alpha_m = if out.l_m == 0.0 { 0.0 } else { cm / out.l_m };
        out
    }
}

/// One teacher-forced pass: log-probabilities `[T, v]` and the `T` targets.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub log_probs: Var,
    pub targets: Vec<usize>,
}

/// Runs the decoder over `BOS + targets[..T-1]`.
pub fn teacher_force(g: &mut Graph, model: &Captioner, memory: Var, targets: &[usize]) -> Result<TeacherForced> {
    if targets.is_empty() {
        return Err(Error::Decode("teacher forcing needs at least one target".into()));
    }
    let mut prefix = Vec::with_capacity(targets.len());
    prefix.push(BOS);
    prefix.extend_from_slice(&targets[..targets.len() - 1]);
    Ok(TeacherForced {
        log_probs: model.decode_log_probs(g, memory, &prefix)?,
        targets: targets.to_vec(),
    })
}

/// Caption words truncated to the model limit, followed by EOS.
pub fn caption_targets(caption: &[usize], max_len: usize) -> Vec<usize> {
    let mut t: Vec<usize> = caption.iter().copied().take(max_len).collect();
    t.push(EOS);
    t
}

fn mean(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let total = g.add_all(xs)?;
    Ok(g.scale(total, 1.0 / xs.len() as f64))
}

/// `-Σ_t log P(w_t)`, averaged over passes.
pub fn xe_loss(g: &mut Graph, passes: &[TeacherForced]) -> Result<Var> {
    let mut per = Vec::with_capacity(passes.len());
    for p in passes {
        let idx: Vec<(usize, usize)> = p.targets.iter().enumerate().map(|(t, &w)| (t, w)).collect();
        let picked = g.pick(p.log_probs, &idx)?;
        let s = g.sum(picked);
        per.push(g.scale(s, -1.0));
    }
    mean(g, &per)
}

/// Distinctive-word loss averaged over passes, `None` when `wd` is empty.
pub fn dis_word_loss(
    g: &mut Graph,
    passes: &[TeacherForced],
    wd: &DistinctiveWordSet,
    mode: DisLossMode,
) -> Result<Option<Var>> {
    if wd.is_empty() {
        return Ok(None);
    }
    let mut per = Vec::with_capacity(passes.len());
    for p in passes {
        let idx: Vec<(usize, usize)> = match mode {
            DisLossMode::Literal => (0..p.targets.len()).flat_map(|t| wd.iter().map(move |w| (t, w))).collect(),
            DisLossMode::Gated => p
                .targets
                .iter()
                .enumerate()
                .filter(|&(_, &w)| wd.contains(w))
                .map(|(t, &w)| (t, w))
                .collect(),
        };
        if idx.is_empty() {
            per.push(g.constant(Tensor::scalar(0.0)));
            continue;
        }
        let picked = g.pick(p.log_probs, &idx)?;
        let s = g.sum(picked);
        per.push(g.scale(s, -1.0));
    }
    Ok(Some(mean(g, &per)?))
}

/// `-Σ_i log P_M[w_i]`, `None` when `wd` is empty.
pub fn memcls_loss(g: &mut Graph, model: &Captioner, memory: Var, wd: &DistinctiveWordSet) -> Result<Option<Var>> {
    if wd.is_empty() {
        return Ok(None);
    }
    let lp = model.classifier.log_probs(g, &model.params, memory)?;
    let v = g.shape(lp)[0];
    let lp = g.reshape(lp, &[1, v])?;
    let idx: Vec<(usize, usize)> = wd.iter().map(|w| (0, w)).collect();
    let picked = g.pick(lp, &idx)?;
    let s = g.sum(picked);
    Ok(Some(g.scale(s, -1.0)))
}

/// Self-critical term for one target.
#[derive(Clone, Debug)]
pub struct ScstTerm {
    pub loss: Var,
    pub sample_reward: f64,
    pub greedy_reward: f64,
}

/// `-(r(sample) - r(greedy)) · Σ_t log P(sample_t)`, where `r` is CIDEr-D
/// against all references. The rewards are constants.
pub fn scst_loss(
    g: &mut Graph,
    model: &Captioner,
    memory: Var,
    references: &[Vec<usize>],
    stats: &NGramStats<usize>,
    seed: u64,
) -> Result<ScstTerm> {
    let m = g.value(memory).clone();
    let sampled = model.sample_decode(&m, seed)?;
    let greedy = model.greedy_decode(&m)?;
    let sample_reward = stats.cider(&sampled.tokens, references);
    let greedy_reward = stats.cider(&greedy.tokens, references);
    let advantage = sample_reward - greedy_reward;
    let targets = sampled.targets();
    let tf = teacher_force(g, model, memory, &targets)?;
    let idx: Vec<(usize, usize)> = targets.iter().enumerate().map(|(t, &w)| (t, w)).collect();
    let picked = g.pick(tf.log_probs, &idx)?;
    let s = g.sum(picked);
    Ok(ScstTerm {
        loss: g.scale(s, -advantage),
        sample_reward,
        greedy_reward,
    })
}

/// Loss nodes of one target; absent terms count as 0.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_xe: Option<Var>,
    pub l_r: Option<Var>,
    pub l_d: Option<Var>,
    pub l_m: Option<Var>,
}

/// Weighted total for `stage`, with adaptive auxiliary weights treated as
/// constants.
pub fn combine(g: &mut Graph, parts: LossParts, stage: Stage) -> Result<(Var, LossBundle)> {
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let (l_r, l_d, l_m) = (val(parts.l_r), val(parts.l_d), val(parts.l_m));
    let base = match stage {
        Stage::Xe => val(parts.l_xe),
        Stage::Rl => l_r,
    };
    combine_with(g, parts, &LossWeights::adaptive(stage, base, l_d, l_m))
}

/// Weighted total with fixed weights. Terms with a zero weight are left out.
pub fn combine_with(g: &mut Graph, parts: LossParts, w: &LossWeights) -> Result<(Var, LossBundle)> {
    let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let (l_xe, l_r, l_d, l_m) = (val(g, parts.l_xe), val(g, parts.l_r), val(g, parts.l_d), val(g, parts.l_m));
    let mut terms = Vec::with_capacity(4);
    for (part, weight) in [(parts.l_xe, w.alpha_c), (parts.l_r, w.alpha_r), (parts.l_d, w.alpha_d), (parts.l_m, w.alpha_m)] {
        if let Some(v) = part.filter(|_| weight != 0.0) {
            terms.push(if weight == 1.0 { v } else { g.scale(v, weight) });
        }
    }
    let total = if terms.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let t = g.add_all(&terms)?;
        g.reshape(t, &[])?
    };
    let applied = |l: f64, part: Option<Var>, a: f64| if l == 0.0 || part.is_none() { 0.0 } else { a };
    let bundle = LossBundle {
        l_xe,
        l_r,
        l_d,
        l_m,
        alpha_d: applied(l_d, parts.l_d, w.alpha_d),
        alpha_m: applied(l_m, parts.l_m, w.alpha_m),
        total: g.value(total).item(),
    };
    Ok((total, bundle))
}
