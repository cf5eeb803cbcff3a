//! `fcmf`: command-line entry point binding the core modules into
//! reproducible workflows.
//!
//! One subcommand per workflow: `synth` (planted-signal data), `train`,
//! `eval`, `gradcheck`, `agree` (annotator agreement), `stats`, and
//! `heads-train` (category detection heads). Every artifact directory gets
//! a `manifest.json` with the resolved configuration, seeds, and tool
//! version; outputs contain no timestamps, so re-running a command
//! reproduces its artifacts bit for bit.
//!
//! Exit codes: 0 on success, 1 on validation/usage errors, 2 on runtime
//! failures (I/O, non-finite numbers, a failed gradient check).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::rc::Rc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use fcmf_core::datamodel::dataset::{load_dataset, FeatureStore, DATASET_FILE};
use fcmf_core::datamodel::fcmt;
use fcmf_core::datamodel::stats::{dataset_stats, write_stats_csv};
use fcmf_core::datamodel::synth::{generate_synthetic, SynthConfig};
use fcmf_core::datamodel::types::{
    AspectCategory, MultimodalSample, FEATURE_DIM, GRID_CELLS,
};
use fcmf_core::datamodel::PreprocessOptions;
use fcmf_core::error::{Error, Result};
use fcmf_core::fusion::geometry_matrix;
use fcmf_core::metrics::{agreement_report, write_eval_csv, AspectEvalOptions};
use fcmf_core::model::init_params;
use fcmf_core::numerics::{grad_check, GradCheckConfig, ParamSet, Tensor};
use fcmf_core::perception::{train_category_heads, CategoryHeads, HeadTrainConfig, VisualBatch};
use fcmf_core::rng::{normal_vec, SeedTree};
use fcmf_core::textenc::build_auxiliary_sequence;
use fcmf_core::training::{
    evaluate_split, forward_loss, load_checkpoint, mean_best_f1, preprocess_options,
    prepare_samples, save_checkpoint, split_indices, train_multi, write_history_csv,
    PreparedSample, TrainConfig,
};
use fcmf_core::datamodel::Vocabulary;

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "fcmf", version, about = "Fine-grained cross-modal fusion workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory for artifacts
    #[arg(long, global = true, env = "FCMF_OUT")]
    out: Option<PathBuf>,
    /// Worker-thread cap (recorded in manifests; the pipeline is
    /// deterministic regardless)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted sentiment evidence
    Synth(SynthArgs),
    /// Train the fusion model, one run per seed
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Check model gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Inter-annotator agreement over paired annotation rounds
    Agree(AgreeArgs),
    /// Corpus statistics for a dataset
    Stats(StatsArgs),
    /// Train the image/RoI category detection heads
    HeadsTrain(HeadsTrainArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of reviews to generate
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Fraction of labeled aspects evidenced only by images
    #[arg(long, default_value_t = 0.3)]
    implicit_rate: f64,
    /// Standard deviation of per-coordinate feature noise
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (dataset.jsonl plus features/)
    #[arg(long)]
    data: PathBuf,
    /// JSON config: a bare training config or a manifest carrying one
    /// under a `config` key; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Category-heads directory (from `heads-train`) used to fill in
    /// categories for unannotated images
    #[arg(long)]
    category_heads: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch multiplicative learning-rate decay (1.0 = constant)
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Epochs at the full rate before decay starts
    #[arg(long)]
    lr_hold: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated run seeds, e.g. `1,2,3`
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Attention heads
    #[arg(long)]
    heads: Option<usize>,
    /// Token budget per auxiliary sequence
    #[arg(long)]
    max_len: Option<usize>,
    /// Hidden width
    #[arg(long)]
    d: Option<usize>,
    /// Encoder layers
    #[arg(long)]
    layers: Option<usize>,
    /// Geometric encoding width
    #[arg(long)]
    d_g: Option<usize>,
    /// Global-norm gradient clip
    #[arg(long, conflicts_with = "no_clip")]
    clip_norm: Option<f64>,
    /// Disable gradient clipping
    #[arg(long)]
    no_clip: bool,
    /// Stop a run once dev macro-F1 reaches this value
    #[arg(long)]
    early_stop_f1: Option<f64>,
    /// Ablation: drop image/RoI categories from the auxiliary sentence
    #[arg(long)]
    no_aux_categories: bool,
    /// Ablation: remove the geometric RoI-aware attention path
    #[arg(long)]
    no_geometric: bool,
    /// Ablation: remove all visual representations from the fusion
    #[arg(long)]
    no_visual_features: bool,
    /// Ablation: use raw whitespace tokens instead of preprocessed text
    #[arg(long)]
    no_preprocess: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (dataset.jsonl plus features/)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Category-heads directory used to fill in unannotated images
    #[arg(long)]
    category_heads: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Dev)]
    split: Split,
    /// Leave the none class out of the macro averages
    #[arg(long)]
    exclude_none: bool,
    /// Average over all decisions at once instead of per aspect first
    #[arg(long)]
    flat: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Dev,
    All,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::All => "all",
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Hidden width of the checked model
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Attention heads
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Encoder layers
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Geometric encoding width
    #[arg(long, default_value_t = 16)]
    d_g: usize,
    /// Parameter coordinates to sample
    #[arg(long, default_value_t = 100)]
    coords: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Maximum allowed relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Seed for parameters, inputs, and coordinate sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AgreeArgs {
    /// Annotation round as `first.jsonl=second.jsonl`; repeat per round
    #[arg(long = "pair", value_parser = parse_pair, required = true)]
    pairs: Vec<(PathBuf, PathBuf)>,
    /// Agreement level below which a round is flagged
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset directory or a bare JSONL file
    #[arg(long)]
    data: PathBuf,
    /// Number of most-frequent tokens to report
    #[arg(long, default_value_t = 20)]
    top_tokens: usize,
}

#[derive(Args)]
struct HeadsTrainArgs {
    /// Dataset directory (dataset.jsonl plus features/)
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
}

fn parse_pair(s: &str) -> std::result::Result<(PathBuf, PathBuf), String> {
    match s.split_once('=') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.into(), b.into())),
        _ => Err(format!("expected `first.jsonl=second.jsonl`, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if cli.threads == 0 {
        return Err(Error::config("--threads must be at least 1"));
    }
    match &cli.command {
        Command::Synth(args) => cmd_synth(&require_out(&cli)?, cli.threads, args)?,
        Command::Train(args) => cmd_train(&require_out(&cli)?, cli.threads, args)?,
        Command::Eval(args) => cmd_eval(&require_out(&cli)?, cli.threads, args)?,
        Command::Gradcheck(args) => return cmd_gradcheck(cli.out.as_deref(), cli.threads, args),
        Command::Agree(args) => cmd_agree(&require_out(&cli)?, cli.threads, args)?,
        Command::Stats(args) => cmd_stats(&require_out(&cli)?, cli.threads, args)?,
        Command::HeadsTrain(args) => cmd_heads_train(&require_out(&cli)?, cli.threads, args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn require_out(cli: &Cli) -> Result<PathBuf> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::config("no output directory: pass --out or set FCMF_OUT"))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn cmd_synth(out: &Path, threads: usize, args: &SynthArgs) -> Result<()> {
    let config = SynthConfig {
        seed: args.seed,
        n_samples: args.n,
        implicit_rate: args.implicit_rate,
        noise: args.noise,
    };
    let recipe = generate_synthetic(&config, out)?;
    write_json(
        &out.join(MANIFEST_FILE),
        &json!({
            "tool": "fcmf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": "synth",
            "threads": threads,
            "config": config,
        }),
    )?;
    println!("synthetic dataset: {} samples under {}", recipe.samples.len(), out.display());
    Ok(())
}

/// Defaults, overlaid by the config file when given, overlaid by flags.
fn resolved_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_config_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.lr_decay {
        cfg.lr_decay = v;
    }
    if let Some(v) = args.lr_hold {
        cfg.lr_hold = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = &args.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = args.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = args.heads {
        cfg.heads = v;
    }
    if let Some(v) = args.max_len {
        cfg.n_max = v;
    }
    if let Some(v) = args.d {
        cfg.d = v;
    }
    if let Some(v) = args.layers {
        cfg.layers = v;
    }
    if let Some(v) = args.d_g {
        cfg.d_g = v;
    }
    if args.no_clip {
        cfg.clip_norm = None;
    } else if let Some(v) = args.clip_norm {
        cfg.clip_norm = Some(v);
    }
    if let Some(v) = args.early_stop_f1 {
        cfg.early_stop_f1 = Some(v);
    }
    cfg.ablation.no_aux_categories |= args.no_aux_categories;
    cfg.ablation.no_geometric |= args.no_geometric;
    cfg.ablation.no_visual_features |= args.no_visual_features;
    cfg.ablation.no_preprocess |= args.no_preprocess;
    cfg.validate()?;
    Ok(cfg)
}

fn read_config_file(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let body = value.get("config").cloned().unwrap_or(value);
    serde_json::from_value(body).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn load_category_heads(dir: &Path) -> Result<CategoryHeads> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let names = manifest
        .get("params")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::format(format!("{}: missing params list", path.display())))?;
    let mut params = ParamSet::new();
    for name in names {
        let name = name.as_str().ok_or_else(|| {
            Error::format(format!("{}: params entries must be strings", path.display()))
        })?;
        params.insert(name, fcmt::read_tensor(&dir.join("params").join(format!("{name}.fcmt")))?)?;
    }
    CategoryHeads::new(params)
}

fn cmd_train(out: &Path, threads: usize, args: &TrainArgs) -> Result<()> {
    let cfg = resolved_config(args)?;
    let samples = load_dataset(&args.data.join(DATASET_FILE), &preprocess_options(&cfg.ablation))?;
    let store = FeatureStore::open(&args.data)?;
    let heads = args.category_heads.as_deref().map(load_category_heads).transpose()?;
    write_json(
        &out.join(MANIFEST_FILE),
        &json!({
            "tool": "fcmf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": "train",
            "threads": threads,
            "data": args.data.display().to_string(),
            "config": cfg,
        }),
    )?;
    let runs = train_multi(&samples, &store, heads.as_ref(), &cfg)?;
    let mut rows = Vec::with_capacity(runs.len());
    for ckpt in &runs {
        let seed_dir = out.join(format!("seed-{}", ckpt.master_seed));
        save_checkpoint(ckpt, &seed_dir)?;
        write_history_csv(&ckpt.history, &seed_dir.join("history.csv"))?;
        println!(
            "seed {}: best epoch {} of {}, macro-F1 {:.4}",
            ckpt.master_seed, ckpt.best_epoch, ckpt.epochs_run, ckpt.best_f1
        );
        rows.push(json!({
            "seed": ckpt.master_seed,
            "best_epoch": ckpt.best_epoch,
            "epochs_run": ckpt.epochs_run,
            "best_f1": ckpt.best_f1,
        }));
    }
    let mean = mean_best_f1(&runs);
    write_json(&out.join("summary.json"), &json!({ "runs": rows, "mean_best_f1": mean }))?;
    println!("mean best macro-F1 {mean:.4} over {} seed(s)", runs.len());
    Ok(())
}

fn cmd_eval(out: &Path, threads: usize, args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let samples =
        load_dataset(&args.data.join(DATASET_FILE), &preprocess_options(&ckpt.config.ablation))?;
    let store = FeatureStore::open(&args.data)?;
    let heads = args.category_heads.as_deref().map(load_category_heads).transpose()?;
    let (train_idx, dev_idx) = split_indices(samples.len());
    let chosen = match args.split {
        Split::Train => train_idx,
        Split::Dev => dev_idx,
        Split::All => (0..samples.len()).collect(),
    };
    if chosen.is_empty() {
        return Err(Error::data(format!("the {} split is empty", args.split.name())));
    }
    let refs: Vec<&MultimodalSample> = chosen.iter().map(|&i| &samples[i]).collect();
    let prepared = prepare_samples(&refs, &store, heads.as_ref(), &ckpt.vocab, &ckpt.config)?;
    let dims = ckpt.config.dims(ckpt.vocab.len());
    let options = AspectEvalOptions { exclude_none: args.exclude_none, flat: args.flat };
    let outcome = evaluate_split(&ckpt.params, &dims, &ckpt.config, &prepared, options)?;

    write_eval_csv(&outcome.report, &out.join("eval.csv"))?;
    write_json(
        &out.join("eval.json"),
        &json!({
            "split": args.split.name(),
            "samples": prepared.len(),
            "loss": outcome.loss,
            "report": outcome.report,
        }),
    )?;
    let pred_path = out.join("predictions.csv");
    let mut writer = csv::Writer::from_path(&pred_path)
        .map_err(|e| Error::format(format!("{}: {e}", pred_path.display())))?;
    let mut record = |row: [&str; 4]| -> Result<()> {
        writer.write_record(row).map_err(|e| Error::format(format!("{}: {e}", pred_path.display())))
    };
    record(["sample", "aspect", "gold", "predicted"])?;
    let per_sample = AspectCategory::ALL.len();
    for (i, sample) in prepared.iter().enumerate() {
        for (aspect, gold, pred) in &outcome.decisions[i * per_sample..(i + 1) * per_sample] {
            record([&sample.id, &aspect.to_string(), &gold.to_string(), &pred.to_string()])?;
        }
    }
    writer.flush().map_err(|e| Error::io(&pred_path, e))?;
    write_json(
        &out.join(MANIFEST_FILE),
        &json!({
            "tool": "fcmf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": "eval",
            "threads": threads,
            "data": args.data.display().to_string(),
            "checkpoint": args.checkpoint.display().to_string(),
            "split": args.split.name(),
            "exclude_none": args.exclude_none,
            "flat": args.flat,
            "config": ckpt.config,
        }),
    )?;
    println!(
        "{} split ({} samples): loss {:.4}, macro-P {:.4}, macro-R {:.4}, macro-F1 {:.4}",
        args.split.name(),
        prepared.len(),
        outcome.loss,
        outcome.report.macro_precision,
        outcome.report.macro_recall,
        outcome.report.macro_f1
    );
    Ok(())
}

/// One deterministic in-memory sample exercising every model path: two
/// images, two RoIs each, category segments in the auxiliary sentence, and
/// all six aspect queries.
fn gradcheck_sample(cfg: &TrainConfig, vocab: &Vocabulary, seed: u64) -> Result<PreparedSample> {
    let tree = SeedTree::new(seed);
    let (k, j) = (cfg.k_max, cfg.j_max);
    let mut grids = Vec::with_capacity(k);
    let mut rois = Vec::with_capacity(k);
    let mut boxes = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = tree.stream(&format!("grid/{i}"));
        grids.push(Some(Rc::new(Tensor::new(
            vec![GRID_CELLS, FEATURE_DIM],
            normal_vec(&mut rng, GRID_CELLS * FEATURE_DIM, 0.0, 1.0),
        )?)));
        let mut image_rois = Vec::with_capacity(j);
        let mut image_boxes = Vec::with_capacity(j);
        for r in 0..j {
            let mut rng = tree.stream(&format!("roi/{i}/{r}"));
            image_rois.push(Some(Rc::new(Tensor::new(
                vec![1, FEATURE_DIM],
                normal_vec(&mut rng, FEATURE_DIM, 0.0, 1.0),
            )?)));
            image_boxes.push([
                10.0 * i as f64 + 3.0 * r as f64,
                5.0 + 2.0 * r as f64,
                4.0 + r as f64,
                3.0 + i as f64,
            ]);
        }
        rois.push(image_rois);
        boxes.push(image_boxes);
    }
    let image_categories: BTreeSet<_> = [AspectCategory::Room].into();
    let roi_categories: BTreeSet<_> = [AspectCategory::Food, AspectCategory::Service].into();
    let geometry = boxes
        .iter()
        .map(|b| geometry_matrix(b, cfg.d_g).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let context: Vec<String> =
        ["phòng", "sạch", "đẹp", "nhân", "viên", "thân", "thiện"].map(String::from).to_vec();
    let sequences = AspectCategory::ALL
        .iter()
        .map(|&a| {
            build_auxiliary_sequence(a, &context, &image_categories, &roi_categories, vocab, cfg.n_max)
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = (0..AspectCategory::ALL.len()).map(|i| i % 4).collect();
    Ok(PreparedSample {
        id: "gradcheck-0".into(),
        visual: VisualBatch {
            k_max: k,
            j_max: j,
            grids,
            image_mask: vec![false; k],
            rois,
            roi_mask: vec![vec![false; j]; k],
            boxes,
            image_categories,
            roi_categories,
        },
        geometry,
        sequences,
        targets,
    })
}

fn cmd_gradcheck(out: Option<&Path>, threads: usize, args: &GradcheckArgs) -> Result<ExitCode> {
    let cfg = TrainConfig {
        d: args.d,
        heads: args.heads,
        layers: args.layers,
        d_g: args.d_g,
        dropout: 0.0,
        k_max: 2,
        j_max: 2,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let context = ["phòng", "sạch", "đẹp", "nhân", "viên", "thân", "thiện"];
    let vocab = Vocabulary::build(context);
    let sample = gradcheck_sample(&cfg, &vocab, args.seed)?;
    let dims = cfg.dims(vocab.len());
    let params = init_params(&dims, &SeedTree::new(args.seed))?;
    let tree = SeedTree::new(args.seed);
    let check = GradCheckConfig {
        coords: args.coords,
        eps: args.eps,
        tol: args.tol,
        seed: args.seed,
    };
    let report = grad_check(&params, &check, |g, bound| {
        forward_loss(g, bound, &dims, &cfg, &[&sample], &tree, "gradcheck")
    })?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict} max relative error {:.3e} over {} coordinates (tol {:.1e})",
        report.max_rel_err, report.checked, report.tol
    );
    if let Some(w) = &report.worst {
        println!(
            "worst coordinate {}[{}]: analytic {:.6e}, numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(
            &out.join("gradcheck.json"),
            &json!({
                "passed": report.passed(),
                "checked": report.checked,
                "max_rel_err": report.max_rel_err,
                "tol": report.tol,
            }),
        )?;
        write_json(
            &out.join(MANIFEST_FILE),
            &json!({
                "tool": "fcmf",
                "version": env!("CARGO_PKG_VERSION"),
                "command": "gradcheck",
                "threads": threads,
                "config": {
                    "d": args.d,
                    "heads": args.heads,
                    "layers": args.layers,
                    "d_g": args.d_g,
                    "coords": args.coords,
                    "eps": args.eps,
                    "tol": args.tol,
                    "seed": args.seed,
                },
            }),
        )?;
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_agree(out: &Path, threads: usize, args: &AgreeArgs) -> Result<()> {
    let options = PreprocessOptions::default();
    let mut rounds = Vec::with_capacity(args.pairs.len());
    for (a, b) in &args.pairs {
        rounds.push((load_dataset(a, &options)?, load_dataset(b, &options)?));
    }
    let report = agreement_report(&rounds, args.threshold)?;
    let csv_path = out.join("agreement.csv");
    let mut writer = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::format(format!("{}: {e}", csv_path.display())))?;
    for row in &report {
        writer.serialize(row).map_err(|e| Error::format(format!("{}: {e}", csv_path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    write_json(&out.join("agreement.json"), &json!(report))?;
    write_json(
        &out.join(MANIFEST_FILE),
        &json!({
            "tool": "fcmf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": "agree",
            "threads": threads,
            "threshold": args.threshold,
            "rounds": args.pairs.iter()
                .map(|(a, b)| format!("{}={}", a.display(), b.display()))
                .collect::<Vec<_>>(),
        }),
    )?;
    for row in &report {
        println!(
            "round {}: kappa(aspect) {:.4}, kappa(sentiment) {:.4}, mean IoU {:.4}{}",
            row.round,
            row.kappa_aspect,
            row.kappa_sentiment,
            row.mean_iou,
            if row.flagged { " [flagged]" } else { "" }
        );
    }
    Ok(())
}

fn cmd_stats(out: &Path, threads: usize, args: &StatsArgs) -> Result<()> {
    let path =
        if args.data.is_dir() { args.data.join(DATASET_FILE) } else { args.data.clone() };
    let samples = load_dataset(&path, &PreprocessOptions::default())?;
    let stats = dataset_stats(&samples, args.top_tokens);
    write_stats_csv(&stats, &out.join("stats.csv"))?;
    write_json(&out.join("stats.json"), &json!(stats))?;
    write_json(
        &out.join(MANIFEST_FILE),
        &json!({
            "tool": "fcmf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": "stats",
            "threads": threads,
            "data": path.display().to_string(),
            "top_tokens": args.top_tokens,
        }),
    )?;
    println!(
        "{} reviews, {} images, {} RoIs, mean {:.2} tokens per review",
        stats.reviews, stats.images, stats.rois, stats.mean_tokens
    );
    Ok(())
}

fn cmd_heads_train(out: &Path, threads: usize, args: &HeadsTrainArgs) -> Result<()> {
    let samples =
        load_dataset(&args.data.join(DATASET_FILE), &PreprocessOptions::default())?;
    let store = FeatureStore::open(&args.data)?;
    let cfg = HeadTrainConfig { seed: args.seed, lr: args.lr, epochs: args.epochs };
    let heads = train_category_heads(&samples, &store, &cfg)?;

    let params_dir = out.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut names = Vec::new();
    for (name, tensor) in heads.params().iter() {
        fcmt::write_tensor(&params_dir.join(format!("{name}.fcmt")), tensor)?;
        names.push(name.clone());
    }

    let (mut image_total, mut image_correct) = (0usize, 0usize);
    let (mut roi_total, mut roi_correct) = (0usize, 0usize);
    for sample in &samples {
        for image in &sample.images {
            if let Some(gold) = &image.categories {
                let grid = store.grid(&image.feature_ref)?;
                image_correct += usize::from(heads.image_category_set(&grid)? == *gold);
                image_total += 1;
            }
            for roi in &image.rois {
                if let Some(gold) = roi.category {
                    let features = store.roi(&roi.feature_ref)?;
                    roi_correct += usize::from(heads.roi_category(&features)? == gold);
                    roi_total += 1;
                }
            }
        }
    }
    let ratio = |correct: usize, total: usize| (total > 0).then(|| correct as f64 / total as f64);
    let image_accuracy = ratio(image_correct, image_total);
    let roi_accuracy = ratio(roi_correct, roi_total);
    write_json(
        &out.join("report.json"),
        &json!({
            "image_accuracy": image_accuracy,
            "images_annotated": image_total,
            "roi_accuracy": roi_accuracy,
            "rois_annotated": roi_total,
        }),
    )?;
    write_json(
        &out.join(MANIFEST_FILE),
        &json!({
            "tool": "fcmf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": "heads-train",
            "threads": threads,
            "data": args.data.display().to_string(),
            "config": cfg,
            "params": names,
        }),
    )?;
    println!(
        "category heads trained: image-set accuracy {} over {} images, RoI accuracy {} over {} RoIs",
        image_accuracy.map_or("n/a".into(), |v| format!("{v:.4}")),
        image_total,
        roi_accuracy.map_or("n/a".into(), |v| format!("{v:.4}")),
        roi_total
    );
    Ok(())
}
