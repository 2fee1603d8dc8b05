// SPDX-License-Identifier: Apache-2.0

//! `sparsepose`: data generation, training, evaluation, inference and kernel
//! benchmarks.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, files, configs),
//! 2 for internal failures (divergence, shape bugs).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sparsepose::bench::{run_bench, BenchConfig};
use sparsepose::checkpoint::Checkpoint;
use sparsepose::eval::evaluate;
use sparsepose::kinematics::{build_tracker_input, Skeleton};
use sparsepose::model::PoseModel;
use sparsepose::motion::{self, read_motion, read_motion_dir, sequence_file_name, write_motion, MotionFile};
use sparsepose::pose::PoseSequence;
use sparsepose::ssd::SsdPath;
use sparsepose::synth::{generate_motion, SynthConfig};
use sparsepose::train::{RunConfig, Trainer, TrainingLog};
use sparsepose::window::{split_indices, SequenceFeatures};
use sparsepose::Error;

#[derive(Parser)]
#[command(name = "sparsepose", version, about = "Full-body pose from three trackers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic motion sequences.
    GenData(GenData),
    /// Print motion file headers.
    Dump {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Train a model; writes checkpoints and a CSV log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the configured checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a data split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test", value_parser = ["test", "train", "all"])]
        split: String,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Score ground truth against itself instead of loading a model.
        #[arg(long)]
        gt_only: bool,
    },
    /// Predict one window of a motion file.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// First frame of the window.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Time the three SSM evaluation orders against sequence length.
    BenchSsd(BenchArgs),
    /// Print the parameter count with a per-module breakdown.
    Params {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long, default_value_t = 480)]
    frames: usize,
    #[arg(long, default_value_t = 60.0)]
    fps: f64,
    #[arg(long, default_value_t = 3)]
    max_harmonics: usize,
    #[arg(long, default_value_t = 0.35)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.5)]
    root_speed: f64,
}

#[derive(Args)]
struct RunArgs {
    /// `key=value` configuration file, applied before overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides as `--key value` or `--key=value`, after all
    /// other options.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = sparsepose::bench::DEFAULT_LENGTHS)]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    state_dim: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    /// recurrent, dual, chunked or chunked<Q>.
    #[arg(long, value_delimiter = ',', default_value = "recurrent,dual,chunked64")]
    paths: Vec<SsdPath>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `--key value` / `--key=value` pairs; dashes in keys become underscores.
fn parse_overrides(args: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            bail!(Error::InvalidArgument(format!("expected --key, got '{a}'")));
        };
        let (k, v) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::InvalidArgument(format!("missing value for --{body}")))?;
                (body.to_string(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in {}", path.display()))?;
        }
        for (k, v) in parse_overrides(&self.overrides)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn skeleton(cfg: &RunConfig) -> anyhow::Result<Skeleton> {
    let skel = match &cfg.skeleton {
        Some(p) => Skeleton::load(p)?,
        None => Skeleton::default(),
    };
    skel.check_pose_compatible()?;
    Ok(skel)
}

fn load_features(cfg: &RunConfig, skel: &Skeleton, split: &str) -> anyhow::Result<Vec<(String, SequenceFeatures)>> {
    let files = read_motion_dir(&cfg.data_dir)?;
    let (train, test) = split_indices(files.len(), cfg.test_fraction, cfg.seed)?;
    let keep: Vec<usize> = match split {
        "train" => train,
        "test" => test,
        _ => (0..files.len()).collect(),
    };
    if keep.is_empty() {
        bail!(Error::InvalidArgument(format!(
            "the {split} split of {} is empty ({} sequences, test_fraction {})",
            cfg.data_dir.display(),
            files.len(),
            cfg.test_fraction
        )));
    }
    let mut out = Vec::with_capacity(keep.len());
    for (i, (name, file)) in files.into_iter().enumerate() {
        if keep.contains(&i) {
            out.push((name, SequenceFeatures::new(file.pose, skel, cfg.fps)?));
        }
    }
    Ok(out)
}

fn create_parent(path: &Path) -> sparsepose::Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> sparsepose::Result<()> {
    create_parent(path)?;
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> sparsepose::Result<()> {
    create_parent(path)?;
    ck.save(path)
}

fn gen_data(a: &GenData) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        num_sequences: a.sequences,
        frames_per_sequence: a.frames,
        fps: a.fps,
        max_harmonics: a.max_harmonics,
        amplitude_scale: a.amplitude,
        root_speed_scale: a.root_speed,
    };
    let seqs = generate_motion(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, pose) in seqs.into_iter().enumerate() {
        let path = a.out.join(sequence_file_name(i));
        write_motion(&path, &MotionFile::new(pose, a.fps as f32))?;
    }
    println!("wrote {} sequences to {}", a.sequences, a.out.display());
    Ok(())
}

/// Existing log rows up to `iteration`, kept when resuming.
fn previous_log_rows(path: &Path, iteration: u64) -> String {
    let Ok(text) = fs::read_to_string(path) else {
        return String::new();
    };
    let mut out = String::new();
    for line in text.lines().skip(1) {
        let it = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
        if it.is_some_and(|i| i <= iteration) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

fn train(run: &RunArgs, resume: bool) -> anyhow::Result<()> {
    let cfg = run.resolve()?;
    let skel = skeleton(&cfg)?;
    let data: Vec<SequenceFeatures> = load_features(&cfg, &skel, "train")?.into_iter().map(|d| d.1).collect();
    let mut trainer = if resume {
        let ck = Checkpoint::load_matching(&cfg.checkpoint, &cfg.model)?;
        Trainer::resume(cfg.clone(), skel, data, ck)?
    } else {
        Trainer::new(cfg.clone(), skel, data)?
    };
    let mut header = format!("{}\n", TrainingLog::CSV_HEADER);
    if resume {
        header.push_str(&previous_log_rows(&cfg.report, trainer.iteration));
    }
    eprintln!(
        "training {} parameters on {} windows from iteration {}",
        trainer.model.num_parameters(),
        trainer.windows.len(),
        trainer.iteration
    );
    let mut rows = header;
    let log = trainer.run(|t, r| {
        let interval = cfg.log_interval.max(1);
        if r.iteration % interval == 0 || r.iteration == cfg.max_iterations {
            eprintln!(
                "iter {:>6}  lr {:.2e}  loss {:.5}  (rot {:.5} pos {:.5} ori {:.5})  |g| {:.3}  {:.1}s",
                r.iteration,
                r.learning_rate,
                r.loss.total,
                r.loss.l_rot,
                r.loss.l_pos,
                r.loss.l_ori,
                r.grad_norm,
                r.wall_time
            );
            rows.push_str(&TrainingLog::csv_row(r));
            rows.push('\n');
            write_file(&cfg.report, &rows)?;
        }
        if cfg.checkpoint_interval > 0 && r.iteration % cfg.checkpoint_interval == 0 {
            save_checkpoint(&t.checkpoint(), &cfg.checkpoint)?;
        }
        Ok(())
    })?;
    save_checkpoint(&trainer.checkpoint(), &cfg.checkpoint)?;
    write_file(&cfg.report, &rows)?;
    println!(
        "finished at iteration {} ({} log records); checkpoint {}",
        trainer.iteration,
        log.records.len(),
        cfg.checkpoint.display()
    );
    Ok(())
}

fn eval(run: &RunArgs, split: &str, csv: Option<&Path>, gt_only: bool) -> anyhow::Result<()> {
    let cfg = run.resolve()?;
    let skel = skeleton(&cfg)?;
    let seqs = load_features(&cfg, &skel, split)?;
    let model = if gt_only {
        None
    } else {
        Some(Checkpoint::load_matching(&cfg.checkpoint, &cfg.model)?.model)
    };
    let report = evaluate(model.as_ref(), &seqs, &skel, cfg.fps)?;
    let table = report.table();
    print!("{}", table.to_text());
    if let Some(path) = csv {
        write_file(path, &table.to_csv())?;
    }
    Ok(())
}

fn infer(run: &RunArgs, input: &Path, output: &Path, start: usize) -> anyhow::Result<()> {
    let cfg = run.resolve()?;
    let skel = skeleton(&cfg)?;
    let model = Checkpoint::load_matching(&cfg.checkpoint, &cfg.model)?.model;
    let file = read_motion(input)?;
    let window = cfg.model.window;
    if start + window > file.pose.frames() {
        bail!(Error::InvalidArgument(format!(
            "window [{start}, {}) exceeds the {} frames of {}",
            start + window,
            file.pose.frames(),
            input.display()
        )));
    }
    let features = build_tracker_input(&file.pose, &skel, f64::from(file.fps))?;
    let cols = features.rows_cols().1;
    let x = sparsepose::Tensor::new(
        &[window, cols],
        features.data()[start * cols..(start + window) * cols].to_vec(),
    )?;
    let rotations = model.predict(&x)?;
    let root = file.pose.root_translation[start * 3..(start + window) * 3].to_vec();
    let pose = PoseSequence::new(rotations.data().to_vec(), root)?;
    write_motion(output, &MotionFile::new(pose, file.fps))?;
    println!("wrote {window} frames to {}", output.display());
    Ok(())
}

fn bench(a: &BenchArgs) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        lengths: a.lengths.clone(),
        state_dim: a.state_dim,
        head_dim: a.head_dim,
        paths: a.paths.clone(),
        repeats: a.repeats,
        seed: a.seed,
    };
    let report = run_bench(&cfg)?;
    match &a.out {
        Some(p) => write_file(p, &report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    for (p, e) in &report.exponents {
        eprintln!("{p}: fitted exponent {e:.3}");
    }
    Ok(())
}

/// Groups parameter names to `blocks.<i>.<part>` or their first component.
fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts[0] == "blocks" && parts.len() > 2 {
        parts[..3].join(".")
    } else {
        parts[0].to_string()
    }
}

fn params(run: &RunArgs) -> anyhow::Result<()> {
    let cfg = run.resolve()?;
    let model = PoseModel::<f32>::init(cfg.model, 0)?;
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, t) in model.params.iter() {
        let m = module_of(name);
        match groups.last_mut() {
            Some((g, n)) if *g == m => *n += t.numel(),
            _ => groups.push((m, t.numel())),
        }
    }
    let mut out = std::io::stdout().lock();
    for (g, n) in &groups {
        writeln!(out, "{g:<24}{n:>12}")?;
    }
    writeln!(out, "{:<24}{:>12}", "total", model.num_parameters())?;
    Ok(())
}

fn dump(files: &[PathBuf]) -> anyhow::Result<()> {
    for f in files {
        println!("{}", motion::dump(f)?);
    }
    Ok(())
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SSDP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("SSDP_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Dump { files } => dump(files),
        Command::Train { run, resume } => train(run, *resume),
        Command::Eval {
            run,
            split,
            csv,
            gt_only,
        } => eval(run, split, csv.as_deref(), *gt_only),
        Command::Infer {
            run,
            input,
            output,
            start,
        } => infer(run, input, output, *start),
        Command::BenchSsd(a) => bench(a),
        Command::Params { run } => params(run),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if !e.is_user_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
