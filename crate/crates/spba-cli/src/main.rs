//! Command-line driver for the spba library.
//!
//! Subcommands cover the whole pipeline: `gen-data` (synthetic datasets),
//! `score` (imperceptibility CSV), `inject` (one-shot poisoning with a saved
//! trigger), `train` (the alternating attack optimization), `eval` (report
//! from checkpoint + trigger + test set), `defend` (inference-time defense
//! chains with before/after reports), and `report` (re-emit or merge run
//! records).
//!
//! Configuration precedence is CLI flag > `--config` TOML file > built-in
//! default; the TOML schema mirrors the attack configuration field names
//! 1:1. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
//! `SPBA_THREADS` caps the worker-thread count.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use spba::attack::{build_plans, train as train_attack, PoisonConfig, RunRecord};
use spba::classifier::{load_model, predict, save_model, ModelParams};
use spba::data::{
    generate_shapes, load_dataset, save_dataset, split_train_test, Dataset, ShapeClass,
};
use spba::defenses::{
    augment, baseline_cluster_inject, drop_points, saliency_topk, sor, AugmentKind,
    SALIENCY_DEFAULT_N, SOR_DEFAULT_K, SOR_DEFAULT_SIGMA_MULT,
};
use spba::geometry::{patchify, read_xyz, write_xyz, PointCloud};
use spba::imperceptibility::{score_cloud, select_patches, Selection, SelectionStrategy};
use spba::metrics::{chamfer_x1000, evaluate_with_defense, evaluate_with_plans, AttackReport};
use spba::spectral::{load_trigger, save_trigger};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Format version written into every JSON artifact.
const ARTIFACT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "spba",
    about = "Patch-wise spectral backdoor attacks on 3D point clouds",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic shape dataset and split it.
    GenData(GenDataArgs),
    /// Compute per-patch imperceptibility scores as CSV.
    Score(ScoreArgs),
    /// Poison a dataset (or a single XYZ cloud) with a saved trigger.
    Inject(InjectArgs),
    /// Run the alternating model/trigger optimization.
    Train(TrainArgs),
    /// Evaluate a checkpoint + trigger on a test set.
    Eval(EvalArgs),
    /// Evaluate through an inference-time defense chain.
    Defend(DefendArgs),
    /// Summarize or merge run records.
    Report(ReportArgs),
}

/// Attack configuration sources shared by most subcommands. Flags override
/// the TOML file, which overrides built-in defaults.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file whose keys mirror the attack configuration 1:1.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of patches per cloud.
    #[arg(long)]
    g: Option<usize>,
    /// Points per patch.
    #[arg(long = "kg")]
    k_g: Option<usize>,
    /// Number of poisoned patches.
    #[arg(long)]
    m: Option<usize>,
    /// Curvature-scoring neighbourhood size.
    #[arg(long = "kc")]
    k_c: Option<usize>,
    /// Patch-graph neighbour count.
    #[arg(long = "kp")]
    k_p: Option<usize>,
    /// Patch selection strategy: hpis, lpis, random, or fpsp.
    #[arg(long)]
    strategy: Option<SelectionStrategy>,
    /// Poisoned fraction of the training set (0 disables poisoning).
    #[arg(long)]
    rho: Option<f64>,
    /// Class all poisoned samples are steered toward.
    #[arg(long = "target-class")]
    target_class: Option<usize>,
    /// Euclidean regularizer weight.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Chamfer regularizer weight.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Hausdorff regularizer weight.
    #[arg(long)]
    lambda3: Option<f64>,
    /// Base model learning rate.
    #[arg(long = "lr-model")]
    lr_model: Option<f64>,
    /// Base trigger learning rate.
    #[arg(long = "lr-trigger")]
    lr_trigger: Option<f64>,
    /// Decoupled model weight decay.
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size.
    #[arg(long = "batch")]
    batch_size: Option<usize>,
    /// Classifier hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Train-time augmentation chain, comma-separated (rotz, rot3d, scale,
    /// shift, dropout, jitter). Applied in order to every training input.
    #[arg(long, value_delimiter = ',')]
    augment: Option<Vec<AugmentKind>>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PoisonConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str::<PoisonConfig>(&text).map_err(|e| {
                    CliError::data(format!("invalid config {}: {e}", path.display()))
                })?
            }
            None => PoisonConfig::default(),
        };
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    config.$field = v;
                }
            };
        }
        take!(seed);
        take!(g);
        take!(k_g);
        take!(m);
        take!(k_c);
        take!(k_p);
        take!(strategy);
        take!(rho);
        take!(target_class);
        take!(lambda1);
        take!(lambda2);
        take!(lambda3);
        take!(lr_model);
        take!(lr_trigger);
        take!(weight_decay);
        take!(epochs);
        take!(batch_size);
        take!(hidden);
        if let Some(augment) = &self.augment {
            config.augment = augment.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Comma-separated shape classes (sphere, cube, cylinder, cone).
    #[arg(long, value_delimiter = ',', default_value = "sphere,cube,cylinder,cone")]
    classes: Vec<ShapeClass>,
    /// Samples generated per class before splitting.
    #[arg(long, default_value_t = 125)]
    per_class: usize,
    /// Points per cloud.
    #[arg(long, default_value_t = 512)]
    points: usize,
    /// Gaussian surface-noise sigma applied before normalization.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Fraction of each class held out for the test split.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving train.bin, test.bin, and gen.json.
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset container to score.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path (default: <out-dir>/scores.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Saved trigger to apply.
    #[arg(long)]
    trigger: PathBuf,
    /// Dataset container to poison (with --out).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output dataset container path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single XYZ cloud to poison (with --out-xyz).
    #[arg(long)]
    xyz: Option<PathBuf>,
    /// Output XYZ path.
    #[arg(long)]
    out_xyz: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training dataset container.
    #[arg(long)]
    train: PathBuf,
    /// Held-out test dataset container.
    #[arg(long)]
    test: PathBuf,
    /// Directory receiving model.ckpt, trigger.bin, and run.json.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Saved trigger.
    #[arg(long)]
    trigger: PathBuf,
    /// Test dataset container.
    #[arg(long)]
    data: PathBuf,
    /// Report JSON path (default: <out-dir>/report.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-sample CSV: sample,label,clean_pred,poisoned_pred,cd_x1000.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DefendArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated chain applied in order. Steps: sor, saliency,
    /// cluster (the baseline injection), or an augmentation
    /// (rotz, rot3d, scale, shift, dropout, jitter).
    #[arg(long, value_delimiter = ',', required = true)]
    defense: Vec<String>,
    /// Model checkpoint (report mode; also needed by the saliency step).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Saved trigger (report mode).
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Test dataset container (report mode).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Before/after report JSON (default: <out-dir>/defense.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single XYZ cloud to defend (with --out-xyz).
    #[arg(long)]
    xyz: Option<PathBuf>,
    /// Output XYZ path.
    #[arg(long)]
    out_xyz: Option<PathBuf>,
    /// SOR neighbourhood size.
    #[arg(long, default_value_t = SOR_DEFAULT_K)]
    sor_k: usize,
    /// SOR standard-deviation multiplier.
    #[arg(long, default_value_t = SOR_DEFAULT_SIGMA_MULT)]
    sor_mult: f64,
    /// Points removed by the saliency step.
    #[arg(long, default_value_t = SALIENCY_DEFAULT_N)]
    saliency_n: usize,
    /// Seed for the random augmentation and cluster steps.
    #[arg(long, default_value_t = 0)]
    defense_seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run-record JSON files (repeatable).
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Re-emit all records merged into one JSON document.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// CLI-level error: a message plus the exit code it maps to.
struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 1 }
    }
    fn data(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 2 }
    }
}

impl From<spba::Error> for CliError {
    fn from(err: spba::Error) -> Self {
        CliError {
            code: if err.is_numeric() { 3 } else { 2 },
            message: err.to_string(),
        }
    }
}

fn main() -> ExitCode {
    if let Ok(raw) = std::env::var("SPBA_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = spba::set_thread_count(n) {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: SPBA_THREADS must be a positive integer, got {raw:?}");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Score(args) => score(args),
        Command::Inject(args) => inject(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Defend(args) => defend(args),
        Command::Report(args) => report(args),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("invalid JSON in {}: {e}", path.display())))
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    ensure_dir(&args.out_dir)?;
    let full = generate_shapes(&args.classes, args.per_class, args.points, args.noise, args.seed)?;
    let (train, test) = split_train_test(&full, args.test_fraction, args.seed)?;
    let train_path = args.out_dir.join("train.bin");
    let test_path = args.out_dir.join("test.bin");
    save_dataset(&train, &train_path)?;
    save_dataset(&test, &test_path)?;

    #[derive(Serialize)]
    struct GenRecord<'a> {
        artifact_version: u32,
        command: &'static str,
        classes: Vec<String>,
        per_class: usize,
        points: usize,
        noise: f64,
        test_fraction: f64,
        seed: u64,
        train_samples: usize,
        test_samples: usize,
        train_path: &'a str,
        test_path: &'a str,
    }
    let record = GenRecord {
        artifact_version: ARTIFACT_VERSION,
        command: "gen-data",
        classes: args.classes.iter().map(|c| c.to_string()).collect(),
        per_class: args.per_class,
        points: args.points,
        noise: args.noise,
        test_fraction: args.test_fraction,
        seed: args.seed,
        train_samples: train.len(),
        test_samples: test.len(),
        train_path: "train.bin",
        test_path: "test.bin",
    };
    write_json(&args.out_dir.join("gen.json"), &record)?;
    println!(
        "generated {} train / {} test samples of {} points across {} classes into {}",
        train.len(),
        test.len(),
        args.points,
        args.classes.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn score(args: ScoreArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let dataset = load_dataset(&args.data)?;
    let out = match args.out {
        Some(path) => path,
        None => {
            ensure_dir(&args.out_dir)?;
            args.out_dir.join("scores.csv")
        }
    };

    let mut csv = String::from("sample,patch,pis,selected\n");
    for (i, cloud) in dataset.samples().iter().enumerate() {
        let sample_seed = config.seed.wrapping_add(i as u64);
        let patches = patchify(cloud, config.g, config.k_g, sample_seed)?;
        let map = score_cloud(cloud, &patches, config.k_c)?;
        let selection = select_patches(
            cloud,
            &patches,
            &map,
            config.m,
            config.strategy,
            sample_seed,
        )?;
        let selected: Vec<bool> = match &selection {
            Selection::Patches(indices) => {
                let mut mask = vec![false; patches.len()];
                for &p in indices {
                    mask[p] = true;
                }
                mask
            }
            // the fpsp strategy bypasses patches entirely
            Selection::PointSet(_) => vec![false; patches.len()],
        };
        for (p, pis) in map.patch_scores.iter().enumerate() {
            let _ = writeln!(csv, "{i},{p},{pis},{}", u8::from(selected[p]));
        }
    }
    std::fs::write(&out, csv)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", out.display())))?;

    #[derive(Serialize)]
    struct ScoreRecord<'a> {
        artifact_version: u32,
        command: &'static str,
        config: &'a PoisonConfig,
        data: String,
        samples: usize,
        csv: String,
    }
    let sidecar = out.with_extension("json");
    write_json(
        &sidecar,
        &ScoreRecord {
            artifact_version: ARTIFACT_VERSION,
            command: "score",
            config: &config,
            data: args.data.display().to_string(),
            samples: dataset.len(),
            csv: out.display().to_string(),
        },
    )?;
    println!(
        "scored {} samples x {} patches -> {}",
        dataset.len(),
        config.g,
        out.display()
    );
    Ok(())
}

fn inject(args: InjectArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let trigger = load_trigger(&args.trigger)?;
    match (&args.data, &args.out, &args.xyz, &args.out_xyz) {
        (Some(data), Some(out), None, None) => {
            let dataset = load_dataset(data)?;
            let plans = build_plans(&dataset, &config.poison_params(), config.seed)?;
            let mut poisoned = Vec::with_capacity(dataset.len());
            for (cloud, plan) in dataset.samples().iter().zip(&plans) {
                poisoned.push(plan.apply(cloud, &trigger)?);
            }
            let out_set = Dataset::new(
                poisoned,
                dataset.class_names().to_vec(),
                dataset.split(),
            )?;
            save_dataset(&out_set, out)?;

            #[derive(Serialize)]
            struct InjectRecord<'a> {
                artifact_version: u32,
                command: &'static str,
                config: &'a PoisonConfig,
                trigger: String,
                data: String,
                out: String,
                samples: usize,
            }
            write_json(
                &out.with_extension("json"),
                &InjectRecord {
                    artifact_version: ARTIFACT_VERSION,
                    command: "inject",
                    config: &config,
                    trigger: args.trigger.display().to_string(),
                    data: data.display().to_string(),
                    out: out.display().to_string(),
                    samples: out_set.len(),
                },
            )?;
            println!("poisoned {} samples -> {}", out_set.len(), out.display());
            Ok(())
        }
        (None, None, Some(xyz), Some(out_xyz)) => {
            let cloud = read_xyz(xyz)?;
            let plan = spba::spectral::build_poison_plan(
                &cloud,
                &config.poison_params(),
                config.seed,
            )?;
            let poisoned = plan.apply(&cloud, &trigger)?;
            write_xyz(&poisoned, out_xyz)?;
            println!("poisoned {} points -> {}", poisoned.len(), out_xyz.display());
            Ok(())
        }
        _ => Err(CliError::usage(
            "pass either --data with --out (dataset mode) or --xyz with --out-xyz (single cloud)",
        )),
    }
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let train_set = load_dataset(&args.train)?;
    let test_set = load_dataset(&args.test)?;
    ensure_dir(&args.out_dir)?;

    let run = train_attack(&train_set, &test_set, &config)?;
    for stats in &run.curves {
        eprintln!(
            "epoch {:>3}  model_loss {:.4}  trigger_loss {:.4}  ba {:.4}  asr {:.4}  cd_x1000 {:.4}",
            stats.epoch,
            stats.model_loss,
            stats.trigger_loss,
            stats.benign_accuracy,
            stats.attack_success_rate,
            stats.mean_chamfer_x1000
        );
    }

    save_model(&run.params, &args.out_dir.join("model.ckpt"))?;
    save_trigger(&run.trigger, &args.out_dir.join("trigger.bin"))?;
    let record = run.record(&train_set, &test_set);
    write_json(&args.out_dir.join("run.json"), &record)?;
    println!(
        "final: ba {:.4} asr {:.4} cd_x1000 {:.4} ({} poisoned of {} train) -> {}",
        run.report.benign_accuracy,
        run.report.attack_success_rate,
        run.report.mean_chamfer_x1000,
        run.split.poison_indices.len(),
        train_set.len(),
        args.out_dir.display()
    );
    Ok(())
}

/// JSON wrapper for a standalone evaluation.
#[derive(Serialize)]
struct EvalRecord<'a> {
    artifact_version: u32,
    command: &'static str,
    config: &'a PoisonConfig,
    report: &'a AttackReport,
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let params = load_model(&args.checkpoint)?;
    let trigger = load_trigger(&args.trigger)?;
    let test = load_dataset(&args.data)?;
    let plans = build_plans(&test, &config.poison_params(), config.seed)?;
    let report = evaluate_with_plans(&params, &trigger, &config, &test, &plans)?;

    let out = match args.out {
        Some(path) => path,
        None => {
            ensure_dir(&args.out_dir)?;
            args.out_dir.join("report.json")
        }
    };
    write_json(
        &out,
        &EvalRecord {
            artifact_version: ARTIFACT_VERSION,
            command: "eval",
            config: &config,
            report: &report,
        },
    )?;

    if let Some(csv_path) = &args.csv {
        let mut csv = String::from("sample,label,clean_pred,poisoned_pred,cd_x1000\n");
        for (i, cloud) in test.samples().iter().enumerate() {
            let clean_pred = predict(&params, cloud)?;
            let poisoned = plans[i].apply(cloud, &trigger)?;
            let poisoned_pred = predict(&params, &poisoned)?;
            let cd = chamfer_x1000(&cloud.points(), &poisoned.points())?;
            let _ = writeln!(csv, "{i},{},{clean_pred},{poisoned_pred},{cd}", test.label_of(i));
        }
        std::fs::write(csv_path, csv)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", csv_path.display())))?;
    }
    println!(
        "ba {:.4} asr {:.4} cd_x1000 {:.4} over {} samples -> {}",
        report.benign_accuracy,
        report.attack_success_rate,
        report.mean_chamfer_x1000,
        report.test_samples,
        out.display()
    );
    Ok(())
}

/// One parsed step of a defense chain.
enum DefenseStep {
    Sor,
    Saliency,
    Cluster,
    Augment(AugmentKind),
}

fn parse_chain(tokens: &[String]) -> Result<Vec<DefenseStep>, CliError> {
    tokens
        .iter()
        .map(|t| match t.as_str() {
            "sor" => Ok(DefenseStep::Sor),
            "saliency" => Ok(DefenseStep::Saliency),
            "cluster" => Ok(DefenseStep::Cluster),
            other => other
                .parse::<AugmentKind>()
                .map(DefenseStep::Augment)
                .map_err(|_| {
                    CliError::usage(format!(
                        "unknown defense step {other:?}; expected sor, saliency, cluster, \
                         rotz, rot3d, scale, shift, dropout, or jitter"
                    ))
                }),
        })
        .collect()
}

fn defend(args: DefendArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let chain = parse_chain(&args.defense)?;
    let needs_model = chain.iter().any(|s| matches!(s, DefenseStep::Saliency));

    let params: Option<ModelParams> = match &args.checkpoint {
        Some(path) => Some(load_model(path)?),
        None => None,
    };
    if needs_model && params.is_none() {
        return Err(CliError::usage(
            "the saliency step needs --checkpoint to compute gradients",
        ));
    }

    let apply_chain = |sample_index: u64, mut cloud: PointCloud| -> spba::Result<PointCloud> {
        for step in &chain {
            cloud = match step {
                DefenseStep::Sor => sor(&cloud, args.sor_k, args.sor_mult)?.cloud,
                DefenseStep::Saliency => {
                    let model = params.as_ref().expect("checked above");
                    let top = saliency_topk(model, &cloud, args.saliency_n.min(cloud.len()))?;
                    drop_points(&cloud, &top)?
                }
                DefenseStep::Cluster => {
                    baseline_cluster_inject(&cloud, args.defense_seed.wrapping_add(sample_index))?
                        .cloud
                }
                DefenseStep::Augment(kind) => {
                    augment(&cloud, *kind, args.defense_seed, sample_index)?
                }
            };
        }
        Ok(cloud)
    };

    match (&args.data, &args.trigger, &args.xyz, &args.out_xyz) {
        (Some(data), Some(trigger_path), None, None) => {
            let eval_params = params.as_ref().ok_or_else(|| {
                CliError::usage("report mode needs --checkpoint, --trigger, and --data")
            })?;
            let trigger = load_trigger(trigger_path)?;
            let test = load_dataset(data)?;
            let plans = build_plans(&test, &config.poison_params(), config.seed)?;
            let before = evaluate_with_plans(eval_params, &trigger, &config, &test, &plans)?;
            let after =
                evaluate_with_defense(eval_params, &trigger, &config, &test, &plans, |i, c| {
                    apply_chain(i as u64, c)
                })?;

            #[derive(Serialize)]
            struct Delta {
                benign_accuracy: f64,
                attack_success_rate: f64,
            }
            #[derive(Serialize)]
            struct DefendRecord<'a> {
                artifact_version: u32,
                command: &'static str,
                config: &'a PoisonConfig,
                defense: &'a [String],
                before: &'a AttackReport,
                after: &'a AttackReport,
                delta: Delta,
            }
            let out = match args.out {
                Some(path) => path,
                None => {
                    ensure_dir(&args.out_dir)?;
                    args.out_dir.join("defense.json")
                }
            };
            write_json(
                &out,
                &DefendRecord {
                    artifact_version: ARTIFACT_VERSION,
                    command: "defend",
                    config: &config,
                    defense: &args.defense,
                    before: &before,
                    after: &after,
                    delta: Delta {
                        benign_accuracy: after.benign_accuracy - before.benign_accuracy,
                        attack_success_rate: after.attack_success_rate
                            - before.attack_success_rate,
                    },
                },
            )?;
            println!(
                "defense [{}]: ba {:.4} -> {:.4}, asr {:.4} -> {:.4} -> {}",
                args.defense.join(","),
                before.benign_accuracy,
                after.benign_accuracy,
                before.attack_success_rate,
                after.attack_success_rate,
                out.display()
            );
            Ok(())
        }
        (None, None, Some(xyz), Some(out_xyz)) => {
            let cloud = read_xyz(xyz)?;
            let defended = apply_chain(0, cloud).map_err(CliError::from)?;
            write_xyz(&defended, out_xyz)?;
            println!("defended cloud ({} points) -> {}", defended.len(), out_xyz.display());
            Ok(())
        }
        _ => Err(CliError::usage(
            "pass --checkpoint/--trigger/--data (report mode) or --xyz/--out-xyz (single cloud)",
        )),
    }
}

fn report(args: ReportArgs) -> Result<(), CliError> {
    let mut records = Vec::with_capacity(args.runs.len());
    for path in &args.runs {
        let record: RunRecord = read_json(path)?;
        records.push((path, record));
    }
    for (path, record) in &records {
        let r = &record.report;
        println!("run {}:", path.display());
        println!(
            "  data: {} train / {} test, {} points, classes [{}]",
            record.train_samples,
            record.test_samples,
            record.points_per_sample,
            record.classes.join(", ")
        );
        let c = &record.config;
        println!(
            "  config: g={} kg={} m={} strategy={} rho={} target={} lambda=({},{},{}) epochs={} batch={} hidden={} seed={}",
            c.g, c.k_g, c.m, c.strategy, c.rho, c.target_class,
            c.lambda1, c.lambda2, c.lambda3, c.epochs, c.batch_size, c.hidden, c.seed
        );
        println!(
            "  poisoned {} of {} train samples",
            record.poison_indices.len(),
            record.train_samples
        );
        if let Some(last) = record.curves.last() {
            println!(
                "  final epoch {}: model_loss {:.4} trigger_loss {:.4}",
                last.epoch, last.model_loss, last.trigger_loss
            );
        }
        println!(
            "  report: ba {:.4} asr {:.4} ({} samples) cd_x1000 {:.4} hd {:.4} ed {:.4}",
            r.benign_accuracy,
            r.attack_success_rate,
            r.asr_samples,
            r.mean_chamfer_x1000,
            r.mean_hausdorff,
            r.mean_euclidean
        );
    }
    if let Some(json_path) = &args.json {
        #[derive(Serialize)]
        struct Merged<'a> {
            artifact_version: u32,
            command: &'static str,
            records: Vec<&'a RunRecord>,
        }
        write_json(
            json_path,
            &Merged {
                artifact_version: ARTIFACT_VERSION,
                command: "report",
                records: records.iter().map(|(_, r)| r).collect(),
            },
        )?;
    }
    Ok(())
}
