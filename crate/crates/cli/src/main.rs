//! `groupcap`: synthesize corpora, build similar-image groups, train, caption,
//! evaluate and inspect memory attention.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on data errors.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use groupcap::corpus::synth::{synth_generate, SynthConfig};
use groupcap::corpus::{load_dataset, read_records, save_dataset, Dataset, FeatureStorage};
use groupcap::grouping::{build_groups, groups_to_jsonl, read_groups};
use groupcap::inference::caption_dataset;
use groupcap::metrics::{captions_to_jsonl, evaluate, read_captions};
use groupcap::model::{load_checkpoint, save_checkpoint, Captioner, ModelConfig};
use groupcap::trainer::{train, StepLog, TrainObserver, Variant};
use serde::Serialize;

use config::{FileConfig, StageEpochs, Usage};

#[derive(Parser)]
#[command(name = "groupcap", version, about = "Group-based distinctive image captioning")]
struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with one planted unique region per image.
    Synth(SynthArgs),
    /// Build similar-image groups and write them as JSON Lines.
    Group(GroupArgs),
    /// Train a captioner and write its checkpoint.
    Train(TrainArgs),
    /// Caption every dataset image within its group.
    Caption(CaptionArgs),
    /// Score a caption file and print the metrics report.
    Eval(EvalArgs),
    /// Dump the memory attention of every member of one group.
    GmaInspect(InspectArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with default values for any flag (snake_case keys); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of images.
    #[arg(long)]
    images: Option<usize>,
    /// Regions per image, one of which is unique.
    #[arg(long)]
    regions: Option<usize>,
    /// Region feature width.
    #[arg(long)]
    dim: Option<usize>,
    /// Concept count: one unique concept per image plus shared theme
    /// concepts in multiples of `regions - 1` [default: images + 20 * (regions - 1)].
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    captions_per_image: Option<usize>,
    /// Captions per image that mention the unique concept.
    #[arg(long)]
    unique_mentions: Option<usize>,
    /// Standard deviation of region noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Store features in a binary file next to the JSON Lines output.
    #[arg(long)]
    sidecar: bool,
}

#[derive(Args)]
struct GroupArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset JSON Lines file.
    #[arg(long, visible_alias = "in")]
    dataset: Option<PathBuf>,
    /// Similar images per group.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch index recorded in the groups.
    #[arg(long)]
    epoch: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, visible_alias = "in")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cross-entropy and self-critical epochs, as `xe:rl`.
    #[arg(long)]
    stage_epochs: Option<StageEpochs>,
    /// Learning rate of the cross-entropy stage.
    #[arg(long)]
    lr: Option<f64>,
    /// Learning rate of the self-critical stage [default: --lr].
    #[arg(long)]
    rl_lr: Option<f64>,
    /// Groups per optimizer step.
    #[arg(long)]
    batch_groups: Option<usize>,
    /// `literal` or `gated` distinctive-word loss.
    #[arg(long)]
    disloss_mode: Option<String>,
    /// `full` or `baseline` (cross-entropy only, no memory attention).
    #[arg(long)]
    variant: Option<String>,
    /// Checkpoint path written after training.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write `<checkpoint>.epoch<N>` every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Training log, one JSON object per optimizer step.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Minimum caption frequency for a vocabulary word.
    #[arg(long)]
    min_freq: Option<usize>,
}

#[derive(Args)]
struct CaptionArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, visible_alias = "in")]
    dataset: Option<PathBuf>,
    /// Group file placing each image among its similar images.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Beam width; 1 decodes greedily.
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, visible_alias = "in")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Caption file produced by `caption`.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    min_freq: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, visible_alias = "in")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Zero-based line of the group file.
    #[arg(long)]
    group: Option<usize>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<groupcap::Error> for Failure {
    fn from(e: groupcap::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Group(a) => group(a),
        Command::Train(a) => train_cmd(a),
        Command::Caption(a) => caption(a),
        Command::Eval(a) => eval(a),
        Command::GmaInspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain, skipping causes already spelled out by their wrapper.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn echo<T: Serialize>(command: &str, resolved: &T) {
    log::info!(
        "{command} config: {}",
        serde_json::to_string(resolved).expect("config serializes")
    );
}

/// Writes to `out`, or to standard output.
fn emit(out: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Outcome {
    let file = FileConfig::load(a.common.config.as_deref())?;
    #[derive(Serialize)]
    struct Resolved {
        seed: u64,
        images: usize,
        regions: usize,
        dim: usize,
        concepts: usize,
        captions_per_image: usize,
        unique_mentions: usize,
        noise: f64,
        sidecar: bool,
        out: PathBuf,
    }
    let images = a.images.or(file.images).unwrap_or(120);
    let regions = a.regions.or(file.regions).unwrap_or(4);
    let r = Resolved {
        seed: a.seed.or(file.seed).unwrap_or(0),
        images,
        regions,
        dim: a.dim.or(file.dim).unwrap_or(16),
        concepts: a
            .concepts
            .or(file.concepts)
            .unwrap_or(images + 20 * regions.saturating_sub(1)),
        captions_per_image: a.captions_per_image.or(file.captions_per_image).unwrap_or(5),
        unique_mentions: a.unique_mentions.or(file.unique_mentions).unwrap_or(2),
        noise: a.noise.or(file.noise).unwrap_or(0.1),
        sidecar: a.sidecar || file.sidecar.unwrap_or(false),
        out: config::required(a.common.out.or(file.out), "out")?,
    };
    echo("synth", &r);
    let mut cfg = SynthConfig::new(r.seed, r.images, r.regions, r.dim, r.concepts);
    cfg.captions_per_image = r.captions_per_image;
    cfg.unique_mentions = r.unique_mentions;
    cfg.noise = r.noise;
    let corpus = synth_generate(&cfg).map_err(|e| match e {
        groupcap::Error::Argument(m) => Failure::Usage(m),
        other => other.into(),
    })?;
    let storage = if r.sidecar { FeatureStorage::Sidecar } else { FeatureStorage::Inline };
    save_dataset(&r.out, &corpus.records, storage)?;
    log::info!("wrote {} images to {}", corpus.records.len(), r.out.display());
    Ok(())
}

fn group(a: GroupArgs) -> Outcome {
    let file = FileConfig::load(a.common.config.as_deref())?;
    #[derive(Serialize)]
    struct Resolved {
        dataset: PathBuf,
        k: usize,
        seed: u64,
        epoch: usize,
        out: Option<PathBuf>,
    }
    let r = Resolved {
        dataset: config::required(a.dataset.or(file.dataset), "dataset")?,
        k: a.k.or(file.k).unwrap_or(groupcap::grouping::DEFAULT_K),
        seed: a.seed.or(file.seed).unwrap_or(0),
        epoch: a.epoch.or(file.epoch).unwrap_or(0),
        out: a.common.out.or(file.out),
    };
    echo("group", &r);
    let records = read_records(&r.dataset)?;
    let groups = build_groups(&records, r.k, r.seed, r.epoch)?;
    let leftovers = groups.iter().filter(|g| g.leftover).count();
    log::info!("{} groups ({} leftover)", groups.len(), leftovers);
    emit(r.out.as_deref(), &groups_to_jsonl(&groups))?;
    Ok(())
}

/// Writes step logs and checkpoints while training runs.
struct CliObserver {
    log: Option<fs::File>,
    checkpoint: PathBuf,
    every: usize,
    total_epochs: usize,
    vocab: groupcap::corpus::Vocabulary,
}

impl TrainObserver for CliObserver {
    fn on_step(&mut self, log: &StepLog) -> groupcap::Result<()> {
        if let Some(f) = &mut self.log {
            let mut line = serde_json::to_vec(log).expect("log serializes");
            line.push(b'\n');
            f.write_all(&line)
                .map_err(|e| groupcap::Error::Training(format!("writing training log: {e}")))?;
        }
        if log.step.is_multiple_of(50) {
            log::info!(
                "step {} epoch {} {:?}: total {:.4} (xe {:.4}, r {:.4}, d {:.4}, m {:.4})",
                log.step,
                log.epoch,
                log.stage,
                log.total,
                log.l_xe,
                log.l_r,
                log.l_d,
                log.l_m
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, epochs: usize, model: &Captioner) -> groupcap::Result<()> {
        let (omega, bias) = model.gma.values(&model.params);
        log::info!("epoch {epochs}: omega {omega:.4}, bias {bias:.4}");
        if self.every > 0 && epochs.is_multiple_of(self.every) && epochs != self.total_epochs {
            let mut name = self.checkpoint.clone().into_os_string();
            name.push(format!(".epoch{epochs}"));
            save_checkpoint(PathBuf::from(name), model, &self.vocab)?;
        }
        if epochs == self.total_epochs {
            save_checkpoint(&self.checkpoint, model, &self.vocab)?;
        }
        Ok(())
    }
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let defaults = groupcap::trainer::TrainConfig::default();
    let stages = a.stage_epochs.or(file.stage_epochs).unwrap_or(StageEpochs {
        xe: defaults.xe_epochs,
        rl: defaults.rl_epochs,
    });
    let disloss_mode = match a.disloss_mode.or(file.disloss_mode) {
        Some(s) => s.parse().map_err(|e: groupcap::Error| Usage(e.to_string()))?,
        None => defaults.disloss_mode,
    };
    let variant = match a.variant.or(file.variant).as_deref() {
        None | Some("full") => Variant::Full,
        Some("baseline") => Variant::Baseline,
        Some(other) => return Err(Failure::Usage(format!("variant `{other}` is not `full` or `baseline`"))),
    };
    let cfg = groupcap::trainer::TrainConfig {
        xe_epochs: stages.xe,
        rl_epochs: stages.rl,
        lr: a.lr.or(file.lr).unwrap_or(defaults.lr),
        rl_lr: a.rl_lr.or(file.rl_lr).or(defaults.rl_lr),
        batch_groups: a.batch_groups.or(file.batch_groups).unwrap_or(defaults.batch_groups),
        k: a.k.or(file.k).unwrap_or(defaults.k),
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
        disloss_mode,
        variant,
        checkpoint_every: a.checkpoint_every.or(file.checkpoint_every).unwrap_or(0),
    };
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    let dataset_path = config::required(a.dataset.or(file.dataset), "dataset")?;
    let checkpoint = config::required(a.checkpoint.or(file.checkpoint), "checkpoint")?;
    let log_path = a.log.or(file.log);
    let min_freq = a.min_freq.or(file.min_freq).unwrap_or(2);

    let dataset = load_dataset(&dataset_path, min_freq)?;
    let mut model_cfg = ModelConfig::desk(dataset.feature_dim(), dataset.vocab.len());
    model_cfg.init_seed = cfg.seed;
    if let Some(m) = &file.model {
        m.apply(&mut model_cfg);
    }
    model_cfg.use_gma = variant == Variant::Full;
    model_cfg.validate().map_err(|e| Usage(e.to_string()))?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        dataset: &'a Path,
        checkpoint: &'a Path,
        log: Option<&'a Path>,
        min_freq: usize,
        train: &'a groupcap::trainer::TrainConfig,
        model: &'a ModelConfig,
    }
    echo(
        "train",
        &Resolved {
            dataset: &dataset_path,
            checkpoint: &checkpoint,
            log: log_path.as_deref(),
            min_freq,
            train: &cfg,
            model: &model_cfg,
        },
    );
    let mut model = Captioner::new(model_cfg)?;
    let log = match &log_path {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let mut observer = CliObserver {
        log,
        checkpoint: checkpoint.clone(),
        every: cfg.checkpoint_every,
        total_epochs: cfg.xe_epochs + cfg.rl_epochs,
        vocab: dataset.vocab.clone(),
    };
    train(&mut model, &dataset, &cfg, &mut observer)?;
    log::info!("wrote {}", checkpoint.display());
    Ok(())
}

/// Dataset encoded with the checkpoint's vocabulary.
fn dataset_for(path: &Path, model: &Captioner, vocab: groupcap::corpus::Vocabulary) -> anyhow::Result<Dataset> {
    let records = read_records(path)?;
    if let Some(r) = records.first() {
        anyhow::ensure!(
            r.features.cols() == model.config().feature_dim,
            "dataset features have width {}, the checkpoint expects {}",
            r.features.cols(),
            model.config().feature_dim
        );
    }
    Ok(Dataset::with_vocab(records, vocab))
}

fn caption(a: CaptionArgs) -> Outcome {
    let file = FileConfig::load(a.common.config.as_deref())?;
    #[derive(Serialize)]
    struct Resolved {
        dataset: PathBuf,
        groups: PathBuf,
        checkpoint: PathBuf,
        beam: usize,
        out: Option<PathBuf>,
    }
    let r = Resolved {
        dataset: config::required(a.dataset.or(file.dataset), "dataset")?,
        groups: config::required(a.groups.or(file.groups), "groups")?,
        checkpoint: config::required(a.checkpoint.or(file.checkpoint), "checkpoint")?,
        beam: a.beam.or(file.beam).unwrap_or(1),
        out: a.common.out.or(file.out),
    };
    echo("caption", &r);
    if r.beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    let (model, vocab) = load_checkpoint(&r.checkpoint)?;
    let dataset = dataset_for(&r.dataset, &model, vocab)?;
    let groups = read_groups(&r.groups)?;
    let lines = caption_dataset(&model, &dataset, &groups, r.beam)?;
    let empty = lines.iter().filter(|l| l.empty).count();
    if empty > 0 {
        log::warn!("{empty} captions are empty (EOS chosen first)");
    }
    emit(r.out.as_deref(), &captions_to_jsonl(&lines))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let file = FileConfig::load(a.common.config.as_deref())?;
    #[derive(Serialize)]
    struct Resolved {
        dataset: PathBuf,
        groups: PathBuf,
        captions: PathBuf,
        min_freq: usize,
        out: Option<PathBuf>,
    }
    let r = Resolved {
        dataset: config::required(a.dataset.or(file.dataset), "dataset")?,
        groups: config::required(a.groups.or(file.groups), "groups")?,
        captions: config::required(a.captions.or(file.captions), "captions")?,
        min_freq: a.min_freq.or(file.min_freq).unwrap_or(2),
        out: a.common.out.or(file.out),
    };
    echo("eval", &r);
    let dataset = load_dataset(&r.dataset, r.min_freq)?;
    let groups = read_groups(&r.groups)?;
    let captions = read_captions(&r.captions)?;
    let report = evaluate(&dataset, &groups, &captions)?;
    log::info!("\n{report}");
    let mut line = serde_json::to_vec(&report).context("serializing report")?;
    line.push(b'\n');
    emit(r.out.as_deref(), &line)?;
    Ok(())
}

fn inspect(a: InspectArgs) -> Outcome {
    let file = FileConfig::load(a.common.config.as_deref())?;
    #[derive(Serialize)]
    struct Resolved {
        dataset: PathBuf,
        groups: PathBuf,
        checkpoint: PathBuf,
        group: usize,
        out: Option<PathBuf>,
    }
    let r = Resolved {
        dataset: config::required(a.dataset.or(file.dataset), "dataset")?,
        groups: config::required(a.groups.or(file.groups), "groups")?,
        checkpoint: config::required(a.checkpoint.or(file.checkpoint), "checkpoint")?,
        group: a.group.or(file.group).unwrap_or(0),
        out: a.common.out.or(file.out),
    };
    echo("gma-inspect", &r);
    let (model, vocab) = load_checkpoint(&r.checkpoint)?;
    if !model.config().use_gma {
        return Err(anyhow::anyhow!("the checkpoint was trained without memory attention").into());
    }
    let dataset = dataset_for(&r.dataset, &model, vocab)?;
    let groups = read_groups(&r.groups)?;
    let g = groups
        .get(r.group)
        .with_context(|| format!("group {} requested, the file has {}", r.group, groups.len()))?;
    let features = g
        .members
        .iter()
        .map(|m| dataset.get(m).map(|rec| &rec.features).with_context(|| format!("group member `{m}` not in the dataset")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    #[derive(Serialize)]
    struct Line<'a> {
        group: usize,
        image_id: &'a str,
        target: usize,
        omega: f64,
        bias: f64,
        #[serde(flatten)]
        result: groupcap::gma::GmaResult,
    }
    let (omega, bias) = model.gma.values(&model.params);
    let mut out = Vec::new();
    for (target, id) in g.members.iter().enumerate() {
        let (_, result) = model.group_memory(&features, target)?;
        let line = Line {
            group: r.group,
            image_id: id,
            target,
            omega,
            bias,
            result: result.expect("memory attention enabled"),
        };
        serde_json::to_writer(&mut out, &line).context("serializing attention")?;
        out.push(b'\n');
    }
    emit(r.out.as_deref(), &out)?;
    Ok(())
}
