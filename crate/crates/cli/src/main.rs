//! `densesiam`: data generation, pretraining, segmentation training,
//! evaluation, gradient checking and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 runtime failure (non-finite loss, failed
//! gradient check), 2 usage, config, input or I/O error.

mod preds;

use std::cell::RefCell;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use densesiam::data::{gen_shapes_dataset, Dataset};
use densesiam::dst1::Container;
use densesiam::eval::{self, ConfusionMatrix};
use densesiam::nn::{Mode, META_CONFIG};
use densesiam::train::{self, TrainConfig, METRICS_HEADER};
use densesiam::{gradsuite, rng, Error, Trainer32};
use rand::seq::SliceRandom;

/// Images per inference batch in eval-seg.
const EVAL_BATCH: usize = 32;

#[derive(Parser)]
#[command(name = "densesiam", version, about = "Dense Siamese self-supervised learning on synthetic images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Self-supervised pretraining.
    Pretrain(TrainArgs),
    /// Unsupervised segmentation training; dataset labels are not used.
    TrainSeg(TrainArgs),
    /// Score a segmentation checkpoint (or stored label maps) against dataset masks.
    EvalSeg(EvalArgs),
    /// Finite-difference check of every primitive and loss.
    GradCheck {
        /// Random draws per case.
        #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
        seeds: usize,
        /// Scale analytic gradients so that every case must fail.
        #[arg(long)]
        sabotage: bool,
    },
    /// List the entries of a DST1 file and the model's parameter count.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Print every configuration key with its default and meaning.
    ConfigKeys,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines. Not used with --resume.
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Dataset file or directory; overrides the config's `data` key.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path. The metrics CSV and config echo are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Stop once this many epochs have completed.
    #[arg(long)]
    stop_after_epoch: Option<u64>,
    /// Continue from the checkpoint at --out and append to its metrics CSV.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to run inference with; not needed with --pred-dir.
    #[arg(long, required_unless_present = "pred_dir")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Score label maps stored in this directory instead of running a model.
    #[arg(long, conflicts_with = "ckpt")]
    pred_dir: Option<PathBuf>,
    /// Relabel predictions with a random permutation drawn from this seed.
    #[arg(long)]
    permute_labels: Option<u64>,
    /// Write the predicted label maps to this directory.
    #[arg(long)]
    export_preds: Option<PathBuf>,
    /// Write the machine-readable report here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also score this many random labelings with the predictions' label marginals.
    #[arg(long, default_value_t = 0)]
    baselines: usize,
    #[arg(long, default_value_t = 0)]
    baseline_seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> ExitCode {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { out, num, classes, size, seed } => gen_data(&out, num, classes, size, seed),
        Command::Pretrain(a) => train_cmd(&a, Mode::Pretrain),
        Command::TrainSeg(a) => train_cmd(&a, Mode::Seg),
        Command::EvalSeg(a) => eval_seg(&a),
        Command::GradCheck { seeds, sabotage } => grad_check(seeds, sabotage),
        Command::Inspect { ckpt } => inspect(&ckpt),
        Command::ConfigKeys => {
            for (key, default, what) in train::KEYS {
                println!("{key} = {default}    # {what}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gen_data(out: &Path, num: usize, classes: usize, size: usize, seed: u64) -> Result<ExitCode> {
    if num == 0 {
        return Err(Error::Config("--num must be at least 1".into()).into());
    }
    let ds = Dataset::from_labeled(gen_shapes_dataset(num, classes, size, seed)?);
    ds.save_dir(out, Some(seed))?;
    print!("{}", ds.manifest(Some(seed)));
    Ok(ExitCode::SUCCESS)
}

/// `run.dst1` → `run.metrics.csv` / `run.config.txt`.
fn sibling(ckpt: &Path, suffix: &str) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ckpt.with_file_name(format!("{stem}.{suffix}"))
}

/// True when `key` is assigned on a non-comment line of a config text.
fn sets_key(text: &str, key: &str) -> bool {
    text.lines().any(|l| {
        let l = l.split('#').next().unwrap_or("");
        l.split_once('=').is_some_and(|(k, _)| k.trim() == key)
    })
}

fn train_cmd(a: &TrainArgs, mode: Mode) -> Result<ExitCode> {
    let metrics_path = sibling(&a.out, "metrics.csv");
    let (mut trainer, data, csv) = if a.resume {
        let trainer = Trainer32::from_checkpoint(&a.out)?;
        if trainer.config().mode != mode {
            return Err(Error::Config(format!("checkpoint was trained in {} mode", trainer.config().mode.name())).into());
        }
        let data = load_data(a.data.as_deref(), trainer.config())?;
        truncate_metrics(&metrics_path, trainer.step())?;
        let csv = OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .with_context(|| format!("opening {} to resume", metrics_path.display()))?;
        (trainer, data, csv)
    } else {
        let path = a.config.as_ref().expect("clap requires --config without --resume");
        let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let mut cfg = TrainConfig::from_text(&text)?;
        if sets_key(&text, "mode") && cfg.mode != mode {
            return Err(Error::Config(format!("config sets mode = {}, this command trains {}", cfg.mode.name(), mode.name())).into());
        }
        cfg.mode = mode;
        let data = load_data(a.data.as_deref(), &cfg)?;
        let trainer = Trainer32::new(&cfg, &data)?;
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(sibling(&a.out, "config.txt"), &text)?;
        let mut csv = File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
        writeln!(csv, "{METRICS_HEADER}")?;
        (trainer, data, csv)
    };

    let csv = RefCell::new(BufWriter::new(csv));
    let out = a.out.clone();
    let result = trainer.run(
        &data,
        a.stop_after_epoch,
        &mut |m| csv.borrow_mut().write_all(m.csv_row().as_bytes()).map_err(|e| io_err(&metrics_path, e)),
        &mut |t, s| {
            log::info!(
                "epoch {} ({} steps): mean total {:.5}, mean dense {:.5}, collapse {:.5}",
                s.epoch,
                s.steps,
                s.mean_total,
                s.mean_dense,
                s.last_collapse
            );
            csv.borrow_mut().flush().map_err(|e| io_err(&metrics_path, e))?;
            t.save_checkpoint(&out)
        },
    );
    csv.borrow_mut().flush()?;
    result?;
    // covers runs with no epoch to train, e.g. epochs = 0
    trainer.save_checkpoint(&a.out)?;
    println!("step={} epoch={} checkpoint={}", trainer.step(), trainer.epoch(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Drops rows of steps the checkpoint does not contain, so a resumed run
/// never duplicates a row.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {} to resume", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Input(format!("{} does not start with the metrics header", path.display())).into());
    }
    let mut kept = format!("{METRICS_HEADER}\n");
    for line in lines {
        let s: u64 = line.split(',').next().and_then(|v| v.parse().ok()).ok_or_else(|| Error::Input(format!("bad metrics row {line:?}")))?;
        if s < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    if kept != text {
        fs::write(path, kept)?;
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn load_data(flag: Option<&Path>, cfg: &TrainConfig) -> Result<Dataset> {
    let path = match (flag, &cfg.data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Error::Usage("no dataset: pass --data or set `data` in the config".into()).into()),
    };
    Ok(Dataset::load(path)?)
}

fn eval_seg(a: &EvalArgs) -> Result<ExitCode> {
    let data = Dataset::load(&a.data)?;
    let (mut maps, n_pred) = match (&a.pred_dir, &a.ckpt) {
        (Some(dir), _) => preds::load(dir)?,
        (None, Some(ckpt)) => {
            let t = Trainer32::from_checkpoint(ckpt)?;
            if t.config().mode != Mode::Seg {
                return Err(Error::Config("eval-seg needs a checkpoint trained with train-seg".into()).into());
            }
            let n = t.config().num_classes.expect("resolved config");
            (t.model.segment_all(&data.images, EVAL_BATCH)?, n)
        }
        (None, None) => unreachable!("clap requires --ckpt or --pred-dir"),
    };
    if let Some(seed) = a.permute_labels {
        let mut perm: Vec<usize> = (0..n_pred).collect();
        perm.shuffle(&mut rng::stream(seed, "permute-labels", &[]));
        maps.iter_mut().flatten().for_each(|l| *l = perm[*l]);
    }
    if let Some(dir) = &a.export_preds {
        let size = data.image_size().ok_or_else(|| Error::Input("empty dataset".into()))?;
        preds::save(dir, &maps, n_pred, size)?;
    }
    let (cm, metrics): (ConfusionMatrix, _) = eval::score_predictions(&maps, n_pred, &data)?;
    log::debug!("confusion over {} pixels", cm.total());
    print!("{}", eval::report_text(&metrics, &data.class_kinds));
    if a.baselines > 0 {
        let masks = data.masks.as_ref().expect("scored above");
        let marginals = eval::label_marginals(&maps, n_pred);
        let base = eval::random_baseline(masks, &marginals, &data.class_kinds, a.baselines, a.baseline_seed)?;
        println!("random_baseline_mIoU={base:.4} trials={} ratio={:.4}", a.baselines, metrics.miou / base);
    }
    if let Some(path) = &a.csv {
        fs::write(path, eval::report_csv(&metrics, &data.class_kinds)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(seeds: usize, sabotage: bool) -> Result<ExitCode> {
    if seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()).into());
    }
    let scale = if sabotage { gradsuite::SABOTAGE_SCALE } else { 1.0 };
    if sabotage {
        println!("sabotage: analytic gradients scaled by {scale}");
    }
    let results = gradsuite::run_suite(seeds, scale);
    print!("{}", gradsuite::report(&results));
    Ok(if results.iter().all(gradsuite::CaseResult::pass) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn inspect(path: &Path) -> Result<ExitCode> {
    let c = Container::load(path)?;
    println!("{:<48} {:<5} shape", "entry", "dtype");
    for e in &c.entries {
        println!("{:<48} {:<5} {:?}", e.name, e.payload.dtype_name(), e.shape());
    }
    println!("entries={}", c.entries.len());
    if c.get(META_CONFIG).is_some() {
        let t = Trainer32::from_checkpoint(path)?;
        let formula = t.config().model_config()?.param_count();
        let (step, epoch) = train::state_summary(&c)?;
        println!("mode={} step={step} epoch={epoch}", t.config().mode.name());
        println!("parameters={} expected={formula}", t.model.num_params());
    }
    Ok(ExitCode::SUCCESS)
}
