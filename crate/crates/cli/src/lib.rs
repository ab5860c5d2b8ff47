//! Subcommands of the `focusface` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use focusface::checks::{gradcheck_suite, GRADCHECK_TOLERANCE, POINTS_PER_CHECK};
use focusface::config::{Precision, RunConfig};
use focusface::data::{build_splits, load_corpus, write_corpus, EvalSet, Image, Splits};
use focusface::metrics::{
    evaluate, format_g9, mask_detection_roc, report_json, roc_csv, roc_points, ProtocolMode, RocPoint,
};
use focusface::model::{
    load_checkpoint, paper_scale_descriptor, save_checkpoint, toy_descriptor, Architecture, DualHeadNet, Frozen,
    ModuleRole,
};
use focusface::train::fit;
use focusface::Real;

#[derive(Parser, Debug)]
#[command(name = "focusface", version, about = "Masked face verification toolkit: data, training, evaluation")]
pub struct Cli {
    /// Worker threads for data generation and batched inference
    /// (default: all cores).
    #[arg(long, global = true, env = "FOCUSFACE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus and write it to disk.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset_seed: Option<u64>,
    },
    /// Train a model; writes best/last checkpoints, the log and the config.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a JSON report.
    Eval(EvalArgs),
    /// Per-module parameter counts.
    Paramcount {
        #[arg(long, value_enum, default_value = "paper")]
        scale: Scale,
        /// Report the trainable count with the backbone frozen.
        #[arg(long)]
        freeze: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check analytic gradients of every op and loss against central
    /// differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the ROC curve of a checkpoint as CSV.
    RocExport {
        #[command(flatten)]
        target: EvalTarget,
        /// Destination CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Corpus directory from `gen-data`. Defaults to an in-memory corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// ArcFace-only training of the unmasked branch (lambda = alpha = 0).
    #[arg(long)]
    pub baseline: bool,
    /// Train only the heads. Requires --init-checkpoint.
    #[arg(long, requires = "init_checkpoint")]
    pub freeze_backbone: bool,
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalTarget {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub target: EvalTarget,
    /// Also write the ROC curve here.
    #[arg(long)]
    pub roc_csv: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    Paper,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Um,
    Mm,
    MaskRoc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

/// Configures the global rayon pool. Call once, before any work.
pub fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

/// Runs one command, writing human-readable output to `out`. Returns the
/// process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let threads = cli.threads;
    match cli.command {
        Command::GenData { cfg, out: dir, dataset_seed } => {
            let mut rc = resolve(&cfg)?;
            if let Some(s) = dataset_seed {
                rc.dataset_seed = s;
            }
            rc.threads = threads.or(rc.threads);
            gen_data(&rc, &dir, out)
        }
        Command::Train(args) => train(args, threads, out),
        Command::Eval(args) => eval(args, out),
        Command::Paramcount { scale, freeze, cfg } => paramcount(scale, freeze, &resolve(&cfg)?, out),
        Command::Gradcheck { seed } => gradcheck(seed, out),
        Command::RocExport { target, out: path } => {
            let points = roc_for(&target)?.1;
            fs::write(&path, roc_csv(&points)).with_context(|| format!("writing {}", path.display()))?;
            writeln!(out, "wrote {} ROC points to {}", points.len(), path.display())?;
            Ok(0)
        }
    }
}

/// Config file (if any) plus `--set` overrides.
pub fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        rc.set(k.trim(), v.trim())?;
    }
    Ok(rc)
}

/// Loads the configured corpus or generates it in memory. A loaded corpus
/// overwrites the dataset keys so the echoed config describes it.
fn splits_for(rc: &mut RunConfig) -> Result<Splits> {
    match &rc.corpus {
        Some(dir) => {
            let splits = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
            rc.data = splits.config.clone();
            rc.dataset_seed = splits.dataset_seed;
            Ok(splits)
        }
        None => Ok(build_splits(&rc.data, rc.dataset_seed)?),
    }
}

fn gen_data(rc: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    rc.data.validate()?;
    let splits = build_splits(&rc.data, rc.dataset_seed)?;
    let records = write_corpus(&splits, dir).with_context(|| format!("writing corpus to {}", dir.display()))?;
    let mut echo = rc.clone();
    echo.corpus = Some(dir.to_path_buf());
    fs::write(dir.join("config.txt"), echo.to_text())?;
    writeln!(
        out,
        "identities: train {}, val {}, test {}",
        rc.data.train_identities, rc.data.val_identities, rc.data.test_identities
    )?;
    writeln!(out, "wrote {} images to {}", records.len(), dir.display())?;
    Ok(0)
}

fn train(args: TrainArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<i32> {
    let mut rc = resolve(&args.cfg)?;
    if let Some(c) = args.corpus {
        rc.corpus = Some(c);
    }
    if let Some(o) = args.out {
        rc.out_dir = o;
    }
    if let Some(s) = args.seed {
        rc.train.seed = s;
    }
    if let Some(n) = args.max_iterations {
        rc.train.max_iterations = n;
    }
    if args.baseline {
        rc.train = rc.train.clone().into_baseline();
    }
    if args.freeze_backbone {
        rc.train.freeze_backbone = true;
    }
    if let Some(p) = args.init_checkpoint {
        rc.init_checkpoint = Some(p);
    }
    rc.threads = threads.or(rc.threads);
    rc.validate()?;
    let splits = splits_for(&mut rc)?;

    let init = match &rc.init_checkpoint {
        Some(p) => Some(load_checkpoint::<f64>(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    fs::create_dir_all(&rc.out_dir).with_context(|| format!("creating {}", rc.out_dir.display()))?;
    fs::write(rc.out_dir.join("config.txt"), rc.to_text())?;
    match rc.precision {
        Precision::F64 => train_with::<f64>(&rc, &splits, init, out),
        Precision::F32 => train_with::<f32>(&rc, &splits, init.map(|m| m.cast()), out),
    }
}

fn train_with<T: Real>(
    rc: &RunConfig,
    splits: &Splits,
    init: Option<DualHeadNet<T>>,
    out: &mut dyn Write,
) -> Result<i32> {
    let cfg = &rc.train;
    let mut model = match init {
        Some(m) => m,
        None => DualHeadNet::<T>::new(cfg.model.clone(), splits.train.num_classes, cfg.seed)?,
    };
    model.set_frozen(if cfg.freeze_backbone { Frozen::Backbone } else { Frozen::None });
    writeln!(out, "total_parameters = {}", model.param_count())?;
    writeln!(out, "trainable_parameters = {}", model.trainable_param_count())?;
    writeln!(
        out,
        "mode = {}{}",
        if cfg.baseline { "baseline" } else { "focusface" },
        if cfg.freeze_backbone { ", frozen backbone" } else { "" }
    )?;

    let result = fit(cfg, splits, Some(model))?;
    let dir = &rc.out_dir;
    fs::write(dir.join("train.log"), result.log.to_text())?;
    save_checkpoint(&result.best, &dir.join("best.ckpt"))?;
    save_checkpoint(&result.last, &dir.join("last.ckpt"))?;
    writeln!(out, "best_iteration = {}", result.best_iteration)?;
    writeln!(out, "best_val_um_fmr100 = {}", format_g9(result.best_fmr100))?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(0)
}

fn eval_set(splits: &Splits, split: SplitArg) -> &EvalSet {
    match split {
        SplitArg::Val => &splits.val,
        SplitArg::Test => &splits.test,
    }
}

/// Loads the checkpoint and corpus named by `target` and computes the report
/// and ROC curve of the requested mode.
fn roc_for(target: &EvalTarget) -> Result<(String, Vec<RocPoint>)> {
    let mut rc = resolve(&target.cfg)?;
    if let Some(c) = &target.corpus {
        rc.corpus = Some(c.clone());
    }
    let splits = splits_for(&mut rc)?;
    let model = load_checkpoint::<f64>(&target.checkpoint)
        .with_context(|| format!("loading checkpoint {}", target.checkpoint.display()))?;
    let set = eval_set(&splits, target.split);
    let extra = [
        ("checkpoint", target.checkpoint.display().to_string()),
        ("split", set.split.as_str().to_string()),
    ];
    match target.mode {
        EvalMode::Um | EvalMode::Mm => {
            let mode = if target.mode == EvalMode::Um {
                ProtocolMode::UnmaskedMasked
            } else {
                ProtocolMode::MaskedMasked
            };
            let (scores, report) = evaluate(&model, set, mode)?;
            let json = report_json(&report, mode.label(), &scores, &extra);
            Ok((json, roc_points(&scores)?))
        }
        EvalMode::MaskRoc => {
            let images: Vec<&Image> = set.images.iter().map(|i| &i.image).collect();
            let masked: Vec<bool> = set.images.iter().map(|i| i.masked).collect();
            let roc = mask_detection_roc(&model, &images, &masked)?;
            let mut doc = serde_json::json!({
                "protocol": "mask-roc",
                "auc": roc.auc,
                "images": images.len(),
                "masked": masked.iter().filter(|&&m| m).count(),
            });
            for (k, v) in &extra {
                doc[*k] = serde_json::json!(v);
            }
            let json = serde_json::to_string_pretty(&doc)? + "\n";
            Ok((json, roc.points))
        }
    }
}

fn eval(args: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (json, points) = roc_for(&args.target)?;
    out.write_all(json.as_bytes())?;
    if let Some(p) = &args.json {
        fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &args.roc_csv {
        fs::write(p, roc_csv(&points)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(0)
}

/// Integer with thousands separators.
pub fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn paramcount_table(arch: &Architecture, freeze: bool, out: &mut dyn Write) -> Result<()> {
    let row = |out: &mut dyn Write, label: &str, n: u64| writeln!(out, "{label:<44}{:>14}", grouped(n));
    writeln!(out, "{}", arch.name)?;
    for role in [
        ModuleRole::Backbone,
        ModuleRole::RecognitionEmbedding,
        ModuleRole::MaskEmbedding,
        ModuleRole::ArcFace,
        ModuleRole::MaskClassifier,
    ] {
        row(out, role.label(), arch.count(role))?;
    }
    let scratch = arch.trainable(Frozen::None);
    let frozen = arch.trainable(Frozen::Backbone);
    row(out, "Total (inference)", arch.inference())?;
    row(out, "Total (training from scratch)", scratch)?;
    row(out, "Total (training with frozen backbone)", frozen)?;
    writeln!(
        out,
        "{:<44}{:>13.2}%",
        "Trainable reduction from freezing",
        100.0 * (1.0 - frozen as f64 / scratch as f64)
    )?;
    writeln!(out, "trainable = {}", if freeze { frozen } else { scratch })?;
    Ok(())
}

fn paramcount(scale: Scale, freeze: bool, rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    match scale {
        Scale::Paper => paramcount_table(&paper_scale_descriptor(), freeze, out)?,
        Scale::Toy => {
            let classes = rc.data.train_identities;
            let arch = toy_descriptor(&rc.train.model, classes);
            paramcount_table(&arch, freeze, out)?;
            let frozen = if freeze { Frozen::Backbone } else { Frozen::None };
            let live = DualHeadNet::<f64>::new(rc.train.model.clone(), classes, 0)?.freeze(frozen);
            writeln!(out, "live model: {} parameters, {} trainable", live.param_count(), live.trainable_param_count())?;
            if live.param_count() != arch.trainable(Frozen::None) || live.trainable_param_count() != arch.trainable(frozen) {
                bail!("descriptor and live model disagree");
            }
        }
    }
    Ok(0)
}

fn gradcheck(seed: u64, out: &mut dyn Write) -> Result<i32> {
    let outcomes = gradcheck_suite(seed)?;
    writeln!(out, "{:<18}{:>8}{:>16}  result", "check", "points", "max rel error")?;
    let mut worst: f64 = 0.0;
    for o in &outcomes {
        worst = worst.max(o.max_rel_error);
        writeln!(
            out,
            "{:<18}{:>8}{:>16.3e}  {}",
            o.name,
            o.points,
            o.max_rel_error,
            if o.passed() { "ok" } else { "FAIL" }
        )?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    writeln!(
        out,
        "max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e}, {POINTS_PER_CHECK} points per check, seed {seed})"
    )?;
    if failed > 0 {
        writeln!(out, "{failed} check(s) failed")?;
        return Ok(1);
    }
    writeln!(out, "all {} checks passed", outcomes.len())?;
    Ok(0)
}
