//! `g2d` — command-line front end for the masked-face verification
//! pipeline: dataset synthesis, staged training, embedding extraction,
//! verification evaluation and the gradient check table.
//!
//! One command sequence reproduces a full experiment from an empty
//! directory, deterministically per seed:
//!
//! ```text
//! g2d --config exp.ini --out run synth
//! g2d --config exp.ini --out run train teacher
//! g2d --config exp.ini --out run train encoder
//! g2d --config exp.ini --out run train reformer
//! g2d --config exp.ini --out run train classifier
//! g2d --config exp.ini --out run embed
//! g2d --config exp.ini --out run eval --protocol mr-mp
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use g2d_core::checks::gradient_suite;
use g2d_core::config::ExperimentConfig;
use g2d_core::dataio;
use g2d_core::metrics::{self, PairItem, Protocol, ScoreSet};
use g2d_core::pipeline::{self, EncoderArtifact, ReformerArtifact, TeacherArtifact};
use g2d_core::synth::{self, Split, SynthesisConfig};
use g2d_core::tensor::Tensor;

#[derive(Parser)]
#[command(name = "g2d", version, about = "Masked-face verification pipeline")]
struct Cli {
    /// INI configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment directory all commands work under.
    #[arg(long, global = true, default_value = "g2d-out")]
    out: PathBuf,

    /// Overwrite outputs that already exist.
    #[arg(long, global = true)]
    force: bool,

    /// Worker threads for dataset synthesis (falls back to $G2D_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural masked-face dataset.
    Synth,
    /// Train one pipeline stage (stages must run in order).
    Train(TrainArgs),
    /// Extract embeddings for evaluation.
    Embed(EmbedArgs),
    /// Build verification pairs, score them and emit the metric report.
    Eval(EvalArgs),
    /// Finite-difference check of every op and loss.
    Gradcheck(GradcheckArgs),
    /// Recompute report/ROC/histogram files from a scores CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// teacher | encoder | reformer | classifier
    stage: Stage,
    /// Ablation: `dis` trains the reformer with the embedding term only;
    /// `ce` trains reformer and classifier jointly with cross-entropy.
    #[arg(long)]
    ablation: Option<Ablation>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Teacher,
    Encoder,
    Reformer,
    Classifier,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    Dis,
    Ce,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Full,
    Dis,
    Ce,
}

impl Variant {
    fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Dis => "dis",
            Variant::Ce => "ce",
        }
    }

    fn reformer_file(self) -> &'static str {
        match self {
            Variant::Full => "reformer.g2dm",
            Variant::Dis => "reformer_dis.g2dm",
            Variant::Ce => "reformer_ce.g2dm",
        }
    }
}

#[derive(Args)]
struct EmbedArgs {
    /// Which trained reformer to embed with.
    #[arg(long, value_enum, default_value_t = Variant::Full)]
    variant: Variant,
    /// Dataset split to embed: val | train | all.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct EvalArgs {
    /// mr-mp | umr-mp
    #[arg(long)]
    protocol: String,
    #[arg(long, value_enum, default_value_t = Variant::Full)]
    variant: Variant,
    /// Embed split to evaluate (must have been embedded).
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Deliberately corrupt the named check (test fixture).
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Existing `score,genuine` CSV.
    #[arg(long)]
    scores: PathBuf,
    /// Histogram bin count (config value when omitted).
    #[arg(long)]
    bins: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    } else if cfg.threads == 0 {
        if let Ok(env) = std::env::var("G2D_THREADS") {
            cfg.threads = env
                .parse()
                .with_context(|| format!("G2D_THREADS must be a number, got '{env}'"))?;
        }
    }
    Ok(cfg)
}

/// Writes the resolved config (with tool version header) into `dir`.
fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.resolved.ini"), cfg.to_ini())
        .with_context(|| format!("writing config echo into {}", dir.display()))?;
    Ok(())
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            path.display()
        );
    }
    Ok(())
}

fn require_artifact(path: &Path, missing: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing stage artifact: {missing} ({}); run the earlier stage first", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cli, &cfg),
        Command::Train(args) => cmd_train(&cli, &cfg, args),
        Command::Embed(args) => cmd_embed(&cli, &cfg, args),
        Command::Eval(args) => cmd_eval(&cli, &cfg, args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Report(args) => cmd_report(&cli, &cfg, args),
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn synthesis_config(cfg: &ExperimentConfig) -> SynthesisConfig {
    SynthesisConfig {
        n_identities: cfg.synthesis.identities,
        views_per_identity: cfg.synthesis.views,
        n_templates: cfg.synthesis.templates,
        image_size: cfg.synthesis.image_size,
        master_seed: cfg.seed,
        threads: cfg.threads.max(1),
    }
}

fn cmd_synth(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let dataset_dir = cli.out.join("dataset");
    refuse_overwrite(&dataset_dir.join("manifest.tsv"), cli.force)?;
    fs::create_dir_all(&dataset_dir)?;
    let rows = synth::synthesize_dataset(&synthesis_config(cfg), &dataset_dir)?;
    echo_config(&dataset_dir, cfg)?;
    println!(
        "synthesized {} items into {}",
        rows.len(),
        dataset_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_dataset(cli: &Cli) -> Result<synth::Dataset> {
    let manifest = cli.out.join("dataset").join("manifest.tsv");
    require_artifact(&manifest, "dataset manifest")?;
    Ok(synth::load_dataset(&manifest)?)
}

fn models_dir(cli: &Cli) -> PathBuf {
    cli.out.join("models")
}

fn save_snapshot(path: &Path, snap: &pipeline::ParamSnapshot) -> Result<()> {
    let mut store = g2d_core::autodiff::ParamStore::new();
    let ids: Vec<_> = snap
        .iter()
        .map(|(name, t)| store.add(name.clone(), t.clone(), false))
        .collect();
    dataio::save_params(path, &store, &ids)?;
    Ok(())
}

fn write_log(path: &Path, logs: &[pipeline::EpochLog]) -> Result<()> {
    fs::write(path, pipeline::log_to_csv(logs))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_teacher_artifact(cli: &Cli, cfg: &ExperimentConfig) -> Result<TeacherArtifact> {
    let path = models_dir(cli).join("teacher.g2dm");
    require_artifact(&path, "trained teacher (models/teacher.g2dm)")?;
    Ok(TeacherArtifact {
        params: dataio::load_params(&path)?,
        cfg: cfg.teacher.clone(),
        n_classes: cfg.synthesis.identities,
        image_size: cfg.synthesis.image_size,
        train_acc: 0.0,
        val_acc: 0.0,
        weak_warning: None,
        log: vec![],
    })
}

fn load_encoder_artifact(cli: &Cli, cfg: &ExperimentConfig) -> Result<EncoderArtifact> {
    let path = models_dir(cli).join("encoder.g2dm");
    require_artifact(&path, "pretrained encoder (models/encoder.g2dm)")?;
    let records = dataio::load_params(&path)?;
    let take = |prefix: &str| -> pipeline::ParamSnapshot {
        records
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .cloned()
            .collect()
    };
    Ok(EncoderArtifact {
        encoder_params: take("encoder."),
        decoder_params: take("decoder."),
        critic_params: take("critic."),
        cfg: cfg.encoder.clone(),
        image_size: cfg.synthesis.image_size,
        init_val_recon: 0.0,
        final_val_recon: 0.0,
        val_unmasked_mae: 0.0,
        log: vec![],
    })
}

fn load_reformer_artifact(
    cli: &Cli,
    cfg: &ExperimentConfig,
    variant: Variant,
) -> Result<ReformerArtifact> {
    let path = models_dir(cli).join(variant.reformer_file());
    require_artifact(
        &path,
        &format!("trained reformer (models/{})", variant.reformer_file()),
    )?;
    Ok(ReformerArtifact {
        params: dataio::load_params(&path)?,
        cfg: cfg.reformer.clone(),
        grid_channels: cfg.encoder.grid_channels,
        log: vec![],
    })
}

fn cmd_train(cli: &Cli, cfg: &ExperimentConfig, args: &TrainArgs) -> Result<()> {
    let ds = load_dataset(cli)?;
    let dir = models_dir(cli);
    fs::create_dir_all(&dir)?;
    echo_config(&dir, cfg)?;
    match (args.stage, args.ablation) {
        (Stage::Teacher, None) => {
            let out = dir.join("teacher.g2dm");
            refuse_overwrite(&out, cli.force)?;
            let art = pipeline::train_teacher(&ds, &cfg.teacher, cfg.seed)?;
            if let Some(w) = &art.weak_warning {
                eprintln!("warning: {w}");
            }
            save_snapshot(&out, &art.params)?;
            write_log(&dir.join("teacher_log.csv"), &art.log)?;
            println!(
                "teacher trained: train acc {:.3}, val acc {:.3}",
                art.train_acc, art.val_acc
            );
        }
        (Stage::Encoder, None) => {
            let out = dir.join("encoder.g2dm");
            refuse_overwrite(&out, cli.force)?;
            let art = pipeline::pretrain_encoder(&ds, &cfg.encoder, cfg.seed)?;
            let mut all = art.encoder_params.clone();
            all.extend(art.decoder_params.iter().cloned());
            all.extend(art.critic_params.iter().cloned());
            save_snapshot(&out, &all)?;
            write_log(&dir.join("encoder_log.csv"), &art.log)?;
            println!(
                "encoder pretrained: val recon {:.2} -> {:.2}, unmasked MAE {:.4}",
                art.init_val_recon, art.final_val_recon, art.val_unmasked_mae
            );
        }
        (Stage::Reformer, ablation @ (None | Some(Ablation::Dis))) => {
            let l1_only = ablation.is_some();
            let name = if l1_only { "reformer_dis.g2dm" } else { "reformer.g2dm" };
            let out = dir.join(name);
            refuse_overwrite(&out, cli.force)?;
            let teacher = load_teacher_artifact(cli, cfg)?;
            let encoder = load_encoder_artifact(cli, cfg)?;
            let art =
                pipeline::train_reformer(&ds, &teacher, &encoder, &cfg.reformer, cfg.seed, l1_only)?;
            save_snapshot(&out, &art.params)?;
            let log_name = if l1_only { "reformer_dis_log.csv" } else { "reformer_log.csv" };
            write_log(&dir.join(log_name), &art.log)?;
            println!("reformer trained ({})", if l1_only { "L1 only" } else { "full distillation" });
        }
        (Stage::Reformer, Some(Ablation::Ce)) => {
            bail!("the CE ablation trains reformer and classifier jointly; run `train classifier --ablation ce`");
        }
        (Stage::Classifier, ablation @ (None | Some(Ablation::Dis))) => {
            let variant = if ablation.is_some() { Variant::Dis } else { Variant::Full };
            let name = match variant {
                Variant::Full => "classifier.g2dm",
                Variant::Dis => "classifier_dis.g2dm",
                Variant::Ce => unreachable!(),
            };
            let out = dir.join(name);
            refuse_overwrite(&out, cli.force)?;
            let encoder = load_encoder_artifact(cli, cfg)?;
            let reformer = load_reformer_artifact(cli, cfg, variant)?;
            let art =
                pipeline::finetune_classifier(&ds, &encoder, &reformer, &cfg.classifier, cfg.seed)?;
            save_snapshot(&out, &art.params)?;
            write_log(&dir.join("classifier_log.csv"), &art.log)?;
            println!("classifier finetuned: train acc {:.3}", art.train_acc);
        }
        (Stage::Classifier, Some(Ablation::Ce)) => {
            let ref_out = dir.join("reformer_ce.g2dm");
            let cls_out = dir.join("classifier_ce.g2dm");
            refuse_overwrite(&ref_out, cli.force)?;
            refuse_overwrite(&cls_out, cli.force)?;
            let encoder = load_encoder_artifact(cli, cfg)?;
            let (ref_art, cls_art) =
                pipeline::train_ce_variant(&ds, &encoder, &cfg.reformer, &cfg.classifier, cfg.seed)?;
            save_snapshot(&ref_out, &ref_art.params)?;
            save_snapshot(&cls_out, &cls_art.params)?;
            write_log(&dir.join("reformer_ce_log.csv"), &ref_art.log)?;
            println!(
                "CE ablation trained: classification train acc {:.3}",
                cls_art.train_acc
            );
        }
        (Stage::Teacher | Stage::Encoder, Some(_)) => {
            bail!("--ablation only applies to the reformer and classifier stages");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

fn split_indices(ds: &synth::Dataset, split: &str) -> Result<Vec<usize>> {
    Ok(match split {
        "all" => (0..ds.items.len()).collect(),
        "train" => ds.indices(Split::Train),
        "val" => ds.indices(Split::Val),
        other => bail!("unknown split '{other}' (expected val, train or all)"),
    })
}

fn cmd_embed(cli: &Cli, cfg: &ExperimentConfig, args: &EmbedArgs) -> Result<()> {
    let ds = load_dataset(cli)?;
    let encoder = load_encoder_artifact(cli, cfg)?;
    let reformer = load_reformer_artifact(cli, cfg, args.variant)?;
    let dir = cli.out.join("embeddings");
    fs::create_dir_all(&dir)?;
    echo_config(&dir, cfg)?;
    let out = dir.join(format!("{}_{}.emb", args.variant.as_str(), args.split));
    refuse_overwrite(&out, cli.force)?;

    let idx = split_indices(&ds, &args.split)?;
    let zero_mask = Tensor::zeros(&[ds.image_size, ds.image_size]);
    let mut embedder = pipeline::Embedder::new(&encoder, &reformer)?;
    // Masked embeddings first, then the unmasked pathway (zero mask).
    let mut inputs: Vec<(&Tensor, &Tensor)> = Vec::with_capacity(idx.len() * 2);
    let mut entries = Vec::with_capacity(idx.len() * 2);
    for &i in &idx {
        inputs.push((&ds.items[i].masked, &ds.items[i].mask));
        entries.push(dataio::EmbeddingEntry {
            identity: ds.items[i].identity,
            view: ds.items[i].view,
            path: format!("images/id{:03}_v{:03}_masked.ppm", ds.items[i].identity, ds.items[i].view),
            masked: true,
        });
    }
    for &i in &idx {
        inputs.push((&ds.items[i].face, &zero_mask));
        entries.push(dataio::EmbeddingEntry {
            identity: ds.items[i].identity,
            view: ds.items[i].view,
            path: format!("images/id{:03}_v{:03}_face.ppm", ds.items[i].identity, ds.items[i].view),
            masked: false,
        });
    }
    let rows = embedder.embed(&inputs);
    dataio::write_embeddings(&out, &dataio::EmbeddingFile { rows, entries })?;
    println!("embedded {} rows into {}", idx.len() * 2, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(cli: &Cli, cfg: &ExperimentConfig, args: &EvalArgs) -> Result<()> {
    let protocol = Protocol::parse(&args.protocol)?;
    let emb_path = cli
        .out
        .join("embeddings")
        .join(format!("{}_{}.emb", args.variant.as_str(), args.split));
    require_artifact(&emb_path, "embeddings (run `embed` first)")?;
    let emb = dataio::read_embeddings(&emb_path)?;

    let items: Vec<PairItem> = emb
        .entries
        .iter()
        .enumerate()
        .map(|(row, e)| PairItem {
            identity: e.identity,
            view: e.view,
            masked: e.masked,
            row,
        })
        .collect();
    let pairs = metrics::build_pairs(
        &items,
        protocol,
        cfg.eval.genuine_pairs,
        cfg.eval.impostor_pairs,
        cfg.seed,
    )?;
    let d = emb.rows.dim(1);
    let row = |r: usize| Tensor::new(vec![d], emb.rows.data()[r * d..(r + 1) * d].to_vec());
    let mut scores = Vec::with_capacity(pairs.pairs.len());
    for p in &pairs.pairs {
        let s = metrics::cosine(&row(p.reference), &row(p.probe))?;
        scores.push((s, p.genuine));
    }
    let set = ScoreSet::new(scores)?;
    let report = metrics::report(&set, cfg.eval.bins)?;

    let dir = cli
        .out
        .join("eval")
        .join(format!("{}_{}", args.variant.as_str(), protocol.as_str()));
    if dir.exists() && !cli.force {
        bail!("{} already exists; pass --force to overwrite", dir.display());
    }
    fs::create_dir_all(&dir)?;
    metrics::write_report_files(&dir, &report)?;
    metrics::write_scores_csv(&dir.join("scores.csv"), &set)?;
    echo_config(&dir, cfg)?;
    println!(
        "{} {}: ACC {:.4} (t={:.4}) EER {:.4} FDR {:.3} FMR100 {:.4} FMR1000 {:.4} AUC {:.4}",
        args.variant.as_str(),
        protocol.as_str(),
        report.acc,
        report.acc_threshold,
        report.eer,
        report.fdr,
        report.fmr100,
        report.fmr1000,
        report.auc
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck / report
// ---------------------------------------------------------------------------

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let results = gradient_suite(args.corrupt.as_deref());
    println!("op,max_rel_err,status");
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{},{:.3e},{}",
            r.name,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
        if !r.pass {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_report(cli: &Cli, cfg: &ExperimentConfig, args: &ReportArgs) -> Result<()> {
    let set = metrics::read_scores_csv(&args.scores)?;
    let report = metrics::report(&set, args.bins.unwrap_or(cfg.eval.bins))?;
    let dir = cli.out.join("report");
    if dir.exists() && !cli.force {
        bail!("{} already exists; pass --force to overwrite", dir.display());
    }
    metrics::write_report_files(&dir, &report)?;
    echo_config(&dir, cfg)?;
    println!(
        "ACC {:.4} EER {:.4} FDR {:.3} (report files in {})",
        report.acc,
        report.eer,
        report.fdr,
        dir.display()
    );
    Ok(())
}
