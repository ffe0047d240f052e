//! Group-based training: every epoch regroups the images, and each group
//! contributes the summed losses of all its members acting as target.

use groupcap_tensor::{Adam, AdamConfig, Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{distinctive_words, Dataset};
use crate::grouping::{build_groups, SimilarImageGroup, DEFAULT_K};
use crate::losses::{
    caption_targets, combine, dis_word_loss, memcls_loss, scst_loss, teacher_force, xe_loss, DisLossMode, LossBundle,
    LossParts, Stage,
};
use crate::metrics::NGramStats;
use crate::model::Captioner;
use crate::{Error, Result};

/// Which loss terms are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Base loss plus distinctive-word and memory-classification losses.
    #[default]
    Full,
    /// Base loss only.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub xe_epochs: usize,
    pub rl_epochs: usize,
    pub lr: f64,
    /// Learning rate of the self-critical stage; `lr` when unset.
    pub rl_lr: Option<f64>,
    /// Groups per optimizer step.
    pub batch_groups: usize,
    pub k: usize,
    pub seed: u64,
    pub disloss_mode: DisLossMode,
    pub variant: Variant,
    /// Epochs between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            xe_epochs: 15,
            rl_epochs: 5,
            lr: 1e-3,
            rl_lr: Some(2e-5),
            batch_groups: 4,
            k: DEFAULT_K,
            seed: 0,
            disloss_mode: DisLossMode::Literal,
            variant: Variant::Full,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xe_epochs + self.rl_epochs == 0 {
            return Err(Error::Config("at least one training epoch is required".into()));
        }
        if self.batch_groups == 0 || self.k == 0 {
            return Err(Error::Config("batch_groups and k must be at least 1".into()));
        }
        for lr in [Some(self.lr), self.rl_lr].into_iter().flatten() {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("learning rate {lr} is not positive")));
            }
        }
        Ok(())
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.xe_epochs {
            Stage::Xe
        } else {
            Stage::Rl
        }
    }
}

/// One optimizer step's log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    pub l_xe: f64,
    pub l_r: f64,
    pub l_d: f64,
    pub l_m: f64,
    pub alpha_d: f64,
    pub alpha_m: f64,
    pub total: f64,
}

impl StepLog {
    fn new(step: usize, epoch: usize, stage: Stage, b: &LossBundle) -> Self {
        Self {
            step,
            epoch,
            stage,
            l_xe: b.l_xe,
            l_r: b.l_r,
            l_d: b.l_d,
            l_m: b.l_m,
            alpha_d: b.alpha_d,
            alpha_m: b.alpha_m,
            total: b.total,
        }
    }
}

/// Read-only inputs shared by every group of a run.
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    pub encoded: Vec<Vec<Vec<usize>>>,
    pub stats: NGramStats<usize>,
    pub disloss_mode: DisLossMode,
    pub variant: Variant,
}

impl<'a> TrainContext<'a> {
    pub fn new(dataset: &'a Dataset, disloss_mode: DisLossMode, variant: Variant) -> Self {
        let encoded: Vec<Vec<Vec<usize>>> = (0..dataset.len()).map(|i| dataset.encoded_captions(i)).collect();
        let stats = NGramStats::build(&encoded);
        Self {
            dataset,
            encoded,
            stats,
            disloss_mode,
            variant,
        }
    }
}

/// A group's loss graph, ready for one backward pass.
pub struct GroupLoss {
    pub graph: Graph,
    pub total: Var,
    pub bundle: LossBundle,
    pub per_target: Vec<LossBundle>,
}

/// Encodes every member once, then adds up the losses of each member as
/// target. `seed` drives self-critical sampling.
pub fn process_group(
    model: &Captioner,
    ctx: &TrainContext<'_>,
    group: &SimilarImageGroup,
    stage: Stage,
    seed: u64,
) -> Result<GroupLoss> {
    if group.members.len() < 2 {
        return Err(Error::Training(format!("group of {} cannot provide a target and a similar image", group.members.len())));
    }
    let idx: Vec<usize> = group
        .members
        .iter()
        .map(|m| ctx.dataset.position(m).ok_or_else(|| Error::Training(format!("group member `{m}` not in dataset"))))
        .collect::<Result<_>>()?;
    let mut g = Graph::new();
    let memories = idx
        .iter()
        .map(|&i| model.encode_graph(&mut g, &ctx.dataset.records[i].features))
        .collect::<Result<Vec<_>>>()?;
    let full = ctx.variant == Variant::Full;
    let mut totals = Vec::with_capacity(idx.len());
    let mut per_target = Vec::with_capacity(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let (memory, _) = model.target_memory(&mut g, &memories, k)?;
        let captions = &ctx.encoded[i];
        let passes = captions
            .iter()
            .map(|c| teacher_force(&mut g, model, memory, &caption_targets(c, model.config().max_len)))
            .collect::<Result<Vec<_>>>()?;
        let mut parts = LossParts {
            l_xe: Some(xe_loss(&mut g, &passes)?),
            l_r: None,
            l_d: None,
            l_m: None,
        };
        if full {
            let similar: Vec<&[Vec<usize>]> = idx
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, &o)| ctx.encoded[o].as_slice())
                .collect();
            let wd = distinctive_words(captions, &similar);
            parts.l_d = dis_word_loss(&mut g, &passes, &wd, ctx.disloss_mode)?;
            parts.l_m = memcls_loss(&mut g, model, memory, &wd)?;
        }
        if stage == Stage::Rl {
            let target_seed = seed.wrapping_add(k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            parts.l_r = Some(scst_loss(&mut g, model, memory, captions, &ctx.stats, target_seed)?.loss);
        }
        let (t, b) = combine(&mut g, parts, stage)?;
        totals.push(t);
        per_target.push(b);
    }
    let total = g.add_all(&totals)?;
    let bundle = LossBundle::sum(&per_target);
    Ok(GroupLoss {
        graph: g,
        total,
        bundle,
        per_target,
    })
}

/// Receives progress from [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    /// Called when `checkpoint_every` divides the epoch count and after the
    /// last epoch.
    fn on_checkpoint(&mut self, _epochs_done: usize, _model: &Captioner) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects step logs in memory.
#[derive(Default)]
pub struct LogCollector(pub Vec<StepLog>);

impl TrainObserver for LogCollector {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        self.0.push(log.clone());
        Ok(())
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add(epoch as u64)
}

/// Trains `model` in place: cross-entropy epochs, then self-critical epochs.
pub fn train(model: &mut Captioner, dataset: &Dataset, cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<()> {
    cfg.validate()?;
    if dataset.vocab.len() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "dataset vocabulary has {} words, model expects {}",
            dataset.vocab.len(),
            model.config().vocab_size
        )));
    }
    let ctx = TrainContext::new(dataset, cfg.disloss_mode, cfg.variant);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut step = 0;
    let epochs = cfg.xe_epochs + cfg.rl_epochs;
    for epoch in 0..epochs {
        let stage = cfg.stage_of(epoch);
        adam.config.lr = match stage {
            Stage::Xe => cfg.lr,
            Stage::Rl => cfg.rl_lr.unwrap_or(cfg.lr),
        };
        let es = epoch_seed(cfg.seed, epoch);
        let mut groups = build_groups(&dataset.records, cfg.k, es, epoch)?;
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(es ^ 0x5348_5546));
        for batch in groups.chunks(cfg.batch_groups) {
            step += 1;
            model.params.zero_grad();
            let mut bundles = Vec::with_capacity(batch.len());
            for (gi, group) in batch.iter().enumerate() {
                let sample_seed = es.wrapping_mul(1_000_003).wrapping_add((step * 131 + gi) as u64);
                let gl = process_group(model, &ctx, group, stage, sample_seed)?;
                if !gl.bundle.is_finite() {
                    return Err(diagnostic(step, epoch, group, &gl.bundle, model));
                }
                gl.graph.backward(gl.total, &mut model.params)?;
                bundles.push(gl.bundle);
            }
            let bundle = LossBundle::sum(&bundles);
            adam.step(&mut model.params).map_err(|e| Error::Training(format!("step {step}, epoch {epoch}: {e}")))?;
            let log = StepLog::new(step, epoch, stage, &bundle);
            log::debug!(
                "step {step} epoch {epoch} {stage:?} total {:.4} xe {:.4} r {:.4} d {:.4} m {:.4}",
                log.total,
                log.l_xe,
                log.l_r,
                log.l_d,
                log.l_m
            );
            observer.on_step(&log)?;
        }
        let done = epoch + 1;
        if done == epochs || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            observer.on_checkpoint(done, model)?;
        }
    }
    Ok(())
}

fn diagnostic(step: usize, epoch: usize, group: &SimilarImageGroup, bundle: &LossBundle, model: &Captioner) -> Error {
    let (omega, bias) = model.gma.values(&model.params);
    let nonfinite_params: Vec<&str> = model
        .params
        .iter()
        .filter(|(_, p)| !p.value.is_finite())
        .map(|(_, p)| p.name.as_str())
        .collect();
    let snapshot = serde_json::json!({
        "step": step,
        "epoch": epoch,
        "group": group.members,
        "losses": bundle,
        "omega": omega,
        "bias": bias,
        "nonfinite_params": nonfinite_params,
    });
    Error::Training(format!("non-finite loss; snapshot: {snapshot}"))
}
