//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on invalid input or I/O failure, 2 when
//! training diverges.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::info;

use crate::dataset::{self, load_sequence, DatasetIndex, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{suite, SUITE_TOLERANCE};
use crate::metrics::{evaluate_dataset, SequenceMasks};
use crate::network::{build, parse_filters, Model, ModelConfig};
use crate::trainer::{finetune, predict_sequence, train_parent, Hyperparams, LossKind, OptimizerKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "unet-vos",
    version,
    about = "Multi-instance video object segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset.
    GenData(GenDataArgs),
    /// Train a parent model on a dataset's training split.
    Train(TrainArgs),
    /// Fine-tune a parent model on a sequence's first annotated frame.
    Finetune(FinetuneArgs),
    /// Predict every frame of a sequence.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Check every backward rule against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    sequences: usize,
    /// Validation sequences, taken from the end.
    #[arg(long, default_value_t = 4)]
    val: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Instances per sequence: `N` or `MIN-MAX`.
    #[arg(long, default_value = "1-3")]
    instances: String,
    #[arg(long)]
    crossing: bool,
    #[arg(long)]
    exit_return: bool,
    #[arg(long, default_value_t = 0.02)]
    min_foreground: f64,
    #[arg(long, default_value_t = 0.20)]
    max_foreground: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "8,16,32")]
    filters: String,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// wce, dice or ce.
    #[arg(long, default_value = "wce")]
    loss: String,
    /// unet or segnet.
    #[arg(long, default_value = "unet")]
    arch: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// adam or sgd.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 100)]
    eval_every: usize,
    /// Seeded reshuffle of the sample order every epoch.
    #[arg(long)]
    shuffle: bool,
    /// Experimental: raw label map as guidance, one model for all instances.
    #[arg(long)]
    multilabel: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Parent checkpoint, or a training run directory holding `model.ckpt`.
    #[arg(long)]
    model: PathBuf,
    /// Sequence directory with `frames/` and `annotations/`.
    #[arg(long)]
    sequence: PathBuf,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value = "wce")]
    loss: String,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Fine-tune run directory (`instance_NNN.ckpt`), training run directory
    /// (`model.ckpt`, shared by all instances) or a single checkpoint.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    sequence: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Boundary tolerance in pixels; defaults to 0.8% of the image diagonal.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional directory for a copy of the report.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => return parse_failure(e, &argv),
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            EXIT_DIVERGED
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

fn parse_failure(e: clap::Error, argv: &[OsString]) -> i32 {
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            print!("{e}");
            EXIT_OK
        }
        _ => {
            eprint!("{e}");
            let cmd = Cli::command();
            let sub = argv
                .get(1)
                .and_then(|a| a.to_str())
                .and_then(|name| cmd.find_subcommand(name));
            match sub {
                Some(sub) => {
                    let flags: Vec<String> = sub
                        .get_arguments()
                        .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
                        .collect();
                    eprintln!("valid flags for {}: {}", sub.get_name(), flags.join(" "));
                }
                None => {
                    let subs: Vec<&str> = cmd.get_subcommands().map(|s| s.get_name()).collect();
                    eprintln!("valid subcommands: {}", subs.join(" "));
                }
            }
            EXIT_INVALID
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Creates `out` and writes `config.txt` before anything else.
fn start_run(out: &Path, command: &str, body: &str) -> Result<()> {
    create_dir(out)?;
    write(&out.join("config.txt"), format!("command={command}\n{body}"))
}

fn parse_instances(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::invalid(format!("--instances expects N or MIN-MAX, got {s:?}"));
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once('-') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let (min_instances, max_instances) = parse_instances(&a.instances)?;
    let cfg = SyntheticConfig {
        size: a.size,
        sequences: a.sequences,
        val_sequences: a.val,
        frames: a.frames,
        min_instances,
        max_instances,
        crossing: a.crossing,
        exit_return: a.exit_return,
        min_foreground: a.min_foreground,
        max_foreground: a.max_foreground,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    start_run(&a.out, "gen-data", &cfg.to_kv())?;
    let index = dataset::generate_synthetic(&cfg, &a.out)?;
    println!("wrote {} sequences to {}", index.entries.len(), a.out.display());
    Ok(EXIT_OK)
}

fn model_config(filters: &str, arch: &str, seed: u64) -> Result<ModelConfig> {
    let filters = parse_filters(filters)?;
    let cfg = match arch {
        "unet" => ModelConfig::unet(&filters),
        "segnet" => ModelConfig::segnet(&filters),
        other => {
            return Err(Error::invalid(format!(
                "unknown --arch {other:?} (expected unet or segnet)"
            )))
        }
    };
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<i32> {
    let model_cfg = model_config(&a.filters, &a.arch, a.seed)?;
    let hyper = Hyperparams {
        lr: a.lr,
        batch: a.batch,
        max_iters: a.iters,
        loss: a.loss.parse()?,
        optimizer: a.optimizer.parse::<OptimizerKind>()?,
        seed: a.seed,
        eval_every: a.eval_every,
        shuffle: a.shuffle,
        multilabel: a.multilabel,
        ..Default::default()
    };
    hyper.validate()?;
    start_run(
        &a.out,
        "train",
        &format!(
            "data={}\narch={}\n{}{}",
            a.data.display(),
            a.arch,
            model_cfg.to_kv(),
            hyper.to_kv()
        ),
    )?;
    let index = DatasetIndex::load(&a.data)?;
    let train_set = index.load_split(Split::Train)?;
    let val_set = index.load_split(Split::Val)?;
    if let Some(s) = train_set.first() {
        let (h, w) = s.dims();
        model_cfg.check_input_size(h, w)?;
    }
    let model = build(&model_cfg)?;
    info!("{} parameters", model.param_count());
    let trained = train_parent(model, &train_set, &val_set, &hyper)?;
    trained.model.save(&a.out.join("model.ckpt"))?;
    write(&a.out.join("train_log.csv"), trained.log.train_csv())?;
    write(&a.out.join("val_log.csv"), trained.log.val_csv())?;
    if let Some(e) = trained.divergence {
        eprintln!("error: {e}; last finite model saved");
        return Ok(EXIT_DIVERGED);
    }
    if let Some((it, loss)) = trained.log.train.last() {
        println!("iteration {it}: train loss {loss:.6}");
    }
    Ok(EXIT_OK)
}

fn load_parent(path: &Path) -> Result<Model> {
    if path.is_dir() {
        Model::load(&path.join("model.ckpt"))
    } else {
        Model::load(path)
    }
}

fn instance_checkpoint(label: u8) -> String {
    format!("instance_{label:03}.ckpt")
}

fn finetune_cmd(a: FinetuneArgs) -> Result<i32> {
    let hyper = Hyperparams {
        finetune_lr: Some(a.lr),
        loss: a.loss.parse::<LossKind>()?,
        finetune_iters: a.iters,
        ..Default::default()
    };
    hyper.validate()?;
    start_run(
        &a.out,
        "finetune",
        &format!(
            "model={}\nsequence={}\n{}",
            a.model.display(),
            a.sequence.display(),
            hyper.to_kv()
        ),
    )?;
    let parent = load_parent(&a.model)?;
    let seq = load_sequence(&a.sequence)?;
    let mut diverged = false;
    for k in seq.first_mask.present_labels() {
        let tuned = finetune(&parent, &seq.frames[0], &seq.first_mask, k, a.iters, &hyper)?;
        tuned.model.save(&a.out.join(instance_checkpoint(k)))?;
        write(&a.out.join(format!("finetune_log_{k:03}.csv")), tuned.log.train_csv())?;
        if let Some(e) = tuned.divergence {
            eprintln!("error: instance {k}: {e}; last finite model saved");
            diverged = true;
        }
    }
    Ok(if diverged { EXIT_DIVERGED } else { EXIT_OK })
}

fn predict(a: PredictArgs) -> Result<i32> {
    start_run(
        &a.out,
        "predict",
        &format!("models={}\nsequence={}\n", a.models.display(), a.sequence.display()),
    )?;
    let seq = load_sequence(&a.sequence)?;
    let labels = seq.first_mask.present_labels();
    let models: Vec<Model> = if a.models.is_dir() && !a.models.join("model.ckpt").exists() {
        labels
            .iter()
            .map(|&k| Model::load(&a.models.join(instance_checkpoint(k))))
            .collect::<Result<_>>()?
    } else {
        let parent = load_parent(&a.models)?;
        vec![parent; labels.len()]
    };
    let masks = predict_sequence(&models, &seq)?;
    dataset::write_mask_series(&a.out.join(&seq.id).join("annotations"), &masks)?;
    println!("predicted {} frames of {}", masks.len(), seq.id);
    Ok(EXIT_OK)
}

/// Directories at or below `root` (two levels deep) holding `annotations/`,
/// keyed by directory name.
fn mask_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    fn name(p: &Path) -> String {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
    fn subdirs(p: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for e in fs::read_dir(p).map_err(|e| Error::io(p, e))? {
            let path = e.map_err(|e| Error::io(p, e))?.path();
            if path.is_dir() && name(&path) != "annotations" && name(&path) != "frames" {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }
    let mut out = Vec::new();
    if root.join("annotations").is_dir() {
        out.push((name(root), root.to_path_buf()));
    }
    for d in subdirs(root)? {
        if d.join("annotations").is_dir() {
            out.push((name(&d), d.clone()));
        }
        for dd in subdirs(&d)? {
            if dd.join("annotations").is_dir() {
                out.push((name(&dd), dd));
            }
        }
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid(format!(
            "sequence {} appears twice under {}",
            w[0].0,
            root.display()
        )));
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<i32> {
    start_run(
        &a.out,
        "eval",
        &format!(
            "pred={}\ngt={}\ntolerance={}\n",
            a.pred.display(),
            a.gt.display(),
            a.tolerance.map_or_else(|| "default".to_string(), |t| t.to_string())
        ),
    )?;
    let preds = mask_dirs(&a.pred)?;
    if preds.is_empty() {
        return Err(Error::invalid(format!(
            "no predicted sequences under {}",
            a.pred.display()
        )));
    }
    let gts = mask_dirs(&a.gt)?;
    let mut sequences = Vec::with_capacity(preds.len());
    for (id, dir) in &preds {
        let gt_dir = gts
            .iter()
            .find(|(g, _)| g == id)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::invalid(format!("no ground truth for sequence {id} under {}", a.gt.display())))?;
        sequences.push(SequenceMasks {
            id: id.clone(),
            predicted: dataset::read_mask_series(&dir.join("annotations"))?,
            ground_truth: dataset::read_mask_series(&gt_dir.join("annotations"))?,
        });
    }
    let report = evaluate_dataset(&sequences, a.tolerance)?;
    write(&a.out.join("report.txt"), report.to_text())?;
    write(&a.out.join("frames.csv"), report.to_csv())?;
    println!("J mean {:.6} F mean {:.6}", report.j_mean, report.f_mean);
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    if let Some(out) = &a.out {
        start_run(out, "gradcheck", &format!("seed={}\n", a.seed))?;
    }
    let mut report = String::new();
    let mut ok = true;
    for (name, r) in suite(a.seed)? {
        let pass = r.max_rel_error < SUITE_TOLERANCE;
        ok &= pass;
        report.push_str(&format!(
            "{name:<18} max_rel_error={:.3e} coordinates={} kinks={} {}\n",
            r.max_rel_error,
            r.coordinates,
            r.kinks,
            if pass { "ok" } else { "FAIL" }
        ));
    }
    print!("{report}");
    if let Some(out) = &a.out {
        write(&out.join("gradcheck.txt"), &report)?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_INVALID })
}
