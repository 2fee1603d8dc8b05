// SPDX-License-Identifier: Apache-2.0

//! Mini-batch training with Adam, a two-level learning-rate schedule and
//! global-norm gradient clipping.
//!
//! Batch composition at iteration `k` depends only on `(seed, k)`, so a run
//! resumed from a checkpoint follows the same trajectory as an uninterrupted one.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kinematics::Skeleton;
use crate::loss::{loss_graph, LossBreakdown, LossWeights};
use crate::model::{ModelConfig, PoseModel};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::synth::split_seed;
use crate::tensor::Tensor;
use crate::window::{window_dataset, Sample, SequenceFeatures, WindowSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// `lr_initial` until the decay iteration, `lr_after_decay` from then on.
    Step,
    /// Linear interpolation reaching `lr_after_decay` at the decay iteration.
    Linear,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Self::Step),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::InvalidArgument(format!("unknown schedule '{s}' (step|linear)"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Step => "step",
            Self::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after_decay: f64,
    pub decay_at_iteration: u64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub max_iterations: u64,
    pub seed: u64,
    pub loss: LossWeights,
    pub fps: f64,
    /// Window stride used to enumerate training windows.
    pub stride: usize,
    /// Fraction of sequences held out for evaluation.
    pub test_fraction: f64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    /// Skeleton file; the built-in skeleton when `None`.
    pub skeleton: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 16,
            lr_initial: 3e-4,
            lr_after_decay: 3e-5,
            decay_at_iteration: 2000,
            lr_schedule: LrSchedule::Step,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            max_iterations: 3000,
            seed: 0,
            loss: LossWeights::default(),
            fps: 60.0,
            stride: 1,
            test_fraction: 0.1,
            log_interval: 50,
            checkpoint_interval: 500,
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            report: PathBuf::from("train_log.csv"),
            skeleton: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value '{v}' for '{key}'")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.stride == 0 {
            return bad("batch_size and stride must be positive".into());
        }
        if !(self.lr_initial >= 0.0 && self.lr_after_decay >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.lr_after_decay > self.lr_initial {
            return bad(format!(
                "lr_after_decay {} exceeds lr_initial {}",
                self.lr_after_decay, self.lr_initial
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction {} outside [0, 1)", self.test_fraction));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm > 0.0 && self.fps > 0.0) {
            return bad("weight_decay must be non-negative, clip_norm and fps positive".into());
        }
        if self.data_dir == self.checkpoint || self.data_dir == self.report || self.checkpoint == self.report {
            return bad("data_dir, checkpoint and report paths must be distinct".into());
        }
        Ok(())
    }

    /// Sets one field from text; model fields are accepted by name too.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_initial" => self.lr_initial = parse(key, v)?,
            "lr_after_decay" => self.lr_after_decay = parse(key, v)?,
            "decay_at_iteration" => self.decay_at_iteration = parse(key, v)?,
            "lr_schedule" => self.lr_schedule = v.parse()?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "max_iterations" => self.max_iterations = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "gamma" => self.loss.gamma = parse(key, v)?,
            "fps" => self.fps = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "skeleton" => self.skeleton = (!v.is_empty()).then(|| PathBuf::from(v)),
            "log_interval" => self.log_interval = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "report" => self.report = PathBuf::from(v),
            _ => {
                if !self.model.fields().iter().any(|(k, _)| *k == key) {
                    return Err(Error::InvalidArgument(format!("unknown configuration key '{key}'")));
                }
                self.model.set(key, parse(key, v)?);
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = self.model.to_text();
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        let _ = writeln!(out, "lr_initial={:?}", self.lr_initial);
        let _ = writeln!(out, "lr_after_decay={:?}", self.lr_after_decay);
        let _ = writeln!(out, "decay_at_iteration={}", self.decay_at_iteration);
        let _ = writeln!(out, "lr_schedule={}", self.lr_schedule);
        let _ = writeln!(out, "weight_decay={:?}", self.weight_decay);
        let _ = writeln!(out, "clip_norm={:?}", self.clip_norm);
        let _ = writeln!(out, "max_iterations={}", self.max_iterations);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "alpha={:?}", self.loss.alpha);
        let _ = writeln!(out, "beta={:?}", self.loss.beta);
        let _ = writeln!(out, "gamma={:?}", self.loss.gamma);
        let _ = writeln!(out, "fps={:?}", self.fps);
        let _ = writeln!(out, "stride={}", self.stride);
        let _ = writeln!(out, "test_fraction={:?}", self.test_fraction);
        let _ = writeln!(out, "log_interval={}", self.log_interval);
        let _ = writeln!(out, "checkpoint_interval={}", self.checkpoint_interval);
        let _ = writeln!(out, "data_dir={}", self.data_dir.display());
        let _ = writeln!(out, "checkpoint={}", self.checkpoint.display());
        let _ = writeln!(out, "report={}", self.report.display());
        let _ = writeln!(
            out,
            "skeleton={}",
            self.skeleton
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        out
    }

    /// Learning rate used for the update that completes iteration `iteration + 1`.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        if iteration >= self.decay_at_iteration {
            return self.lr_after_decay;
        }
        match self.lr_schedule {
            LrSchedule::Step => self.lr_initial,
            LrSchedule::Linear => {
                let f = iteration as f64 / self.decay_at_iteration as f64;
                self.lr_initial + (self.lr_after_decay - self.lr_initial) * f
            }
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.lr_initial,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Seconds since the trainer was created.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    /// Appends a record; iterations must increase strictly.
    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.iteration <= last.iteration {
                return Err(Error::InvalidArgument(format!(
                    "log iteration {} does not follow {}",
                    r.iteration, last.iteration
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "iteration,learning_rate,total,l_rot,l_pos,l_ori,grad_norm,wall_time_s";

    pub fn csv_row(r: &LogRecord) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            r.iteration,
            r.learning_rate,
            r.loss.total,
            r.loss.l_rot,
            r.loss.l_pos,
            r.loss.l_ori,
            r.grad_norm,
            r.wall_time
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&Self::csv_row(r));
            out.push('\n');
        }
        out
    }
}

/// Mean loss and mean parameter gradients over a batch. Samples run in
/// parallel; the reduction is in batch order, so results do not depend on the
/// thread count.
pub fn batch_gradients(
    model: &PoseModel<f32>,
    batch: &[Sample<f32>],
    skel: &Skeleton,
    weights: &LossWeights,
) -> Result<(Vec<Tensor<f32>>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_sample: Vec<(Vec<Tensor<f32>>, LossBreakdown)> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let x = g.constant(s.input.clone());
            let pred = model.forward(&mut g, x)?;
            let loss = loss_graph(&mut g, pred, &s.target, skel, weights)?;
            let grads = g.backward(loss.total)?;
            Ok((g.param_grads(&grads, &model.params), loss.breakdown(&g)))
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f32;
    let mut iter = per_sample.into_iter();
    let (mut acc, first) = iter.next().expect("non-empty");
    let mut loss = first;
    for (grads, l) in iter {
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.axpy(1.0, g)?;
        }
        loss.l_rot += l.l_rot;
        loss.l_pos += l.l_pos;
        loss.l_ori += l.l_ori;
        loss.total += l.total;
    }
    for a in &mut acc {
        a.scale_inplace(scale);
    }
    let n = batch.len() as f64;
    loss.l_rot /= n;
    loss.l_pos /= n;
    loss.l_ori /= n;
    loss.total /= n;
    Ok((acc, loss))
}

pub struct Trainer {
    pub config: RunConfig,
    pub skeleton: Skeleton,
    pub model: PoseModel<f32>,
    pub optimizer: AdamState<f32>,
    /// Completed iterations.
    pub iteration: u64,
    pub data: Vec<SequenceFeatures>,
    pub windows: WindowSet,
    started: Instant,
}

impl Trainer {
    /// Fresh model initialised from `config.seed`.
    pub fn new(config: RunConfig, skeleton: Skeleton, data: Vec<SequenceFeatures>) -> Result<Self> {
        let model = PoseModel::init(config.model, config.seed)?;
        Self::resume(config, skeleton, data, Checkpoint::new(model, 0, None))
    }

    /// Continues from a checkpoint; optimiser moments are restored when present.
    pub fn resume(config: RunConfig, skeleton: Skeleton, data: Vec<SequenceFeatures>, ck: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ck.model.config != config.model {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint configuration differs:\n{}expected:\n{}",
                ck.model.config.to_text(),
                config.model.to_text()
            )));
        }
        let poses: Vec<_> = data.iter().map(|d| d.pose.clone()).collect();
        let windows = window_dataset(&poses, config.model.window, config.stride)?;
        let mut optimizer = ck
            .optimizer
            .unwrap_or_else(|| AdamState::new(&ck.model.params, config.adam()));
        optimizer.config.weight_decay = config.weight_decay;
        Ok(Self {
            config,
            skeleton,
            model: ck.model,
            optimizer,
            iteration: ck.iteration,
            data,
            windows,
            started: Instant::now(),
        })
    }

    /// The batch used at iteration `iteration` (0-based).
    pub fn batch(&self, iteration: u64) -> Result<Vec<Sample<f32>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(self.config.seed ^ 0x7261_696e, iteration));
        (0..self.config.batch_size)
            .map(|_| {
                let (seq, start) = self.windows.windows[rng.gen_range(0..self.windows.len())];
                self.data[seq].sample(start, self.windows.length, &self.skeleton)
            })
            .collect()
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<LogRecord> {
        let batch = self.batch(self.iteration)?;
        let (mut grads, loss) =
            batch_gradients(&self.model, &batch, &self.skeleton, &self.config.loss).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    iteration: self.iteration + 1,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !loss.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration + 1,
                detail: format!("loss {:?}, gradient norm {grad_norm}", loss),
            });
        }
        let lr = self.config.learning_rate(self.iteration);
        self.optimizer.config.learning_rate = lr;
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.iteration += 1;
        Ok(LogRecord {
            iteration: self.iteration,
            learning_rate: lr,
            loss,
            grad_norm,
            wall_time: self.started.elapsed().as_secs_f64(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.model.clone(), self.iteration, Some(self.optimizer.clone()))
    }

    /// Steps until `config.max_iterations`; `on_step` sees every record.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &LogRecord) -> Result<()>) -> Result<TrainingLog> {
        let mut log = TrainingLog::default();
        while self.iteration < self.config.max_iterations {
            let r = self.step()?;
            on_step(self, &r)?;
            let interval = self.config.log_interval.max(1);
            if r.iteration % interval == 0 || r.iteration == self.config.max_iterations {
                log.push(r)?;
            }
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::PoseSequence;

    fn tiny_run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                window: 6,
                ffn_hidden: 8,
                state_dim: 2,
                ..ModelConfig::with_latent(4, 1)
            },
            batch_size: 2,
            max_iterations: 3,
            ..RunConfig::default()
        }
    }

    fn data(skel: &Skeleton) -> Vec<SequenceFeatures> {
        let mut p = PoseSequence::rest(10);
        for t in 0..10 {
            p.root_translation[t * 3] = t as f32 * 0.01;
            p.set_rotation(t, 18, [1.0, 0.0, 0.0, 0.0, 1.0, 0.1 * t as f32]);
        }
        vec![SequenceFeatures::new(p, skel, 60.0).unwrap()]
    }

    #[test]
    fn schedule() {
        let mut c = RunConfig::default();
        assert_eq!(c.learning_rate(0), 3e-4);
        assert_eq!(c.learning_rate(1999), 3e-4);
        assert_eq!(c.learning_rate(2000), 3e-5);
        c.lr_schedule = LrSchedule::Linear;
        assert!((c.learning_rate(1000) - 1.65e-4).abs() < 1e-12);
        assert_eq!(c.learning_rate(5000), 3e-5);
    }

    #[test]
    fn config_text_round_trip_and_validation() {
        let c = tiny_run();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert!(d.apply_text("nonsense=1").is_err());
        assert!(d.apply_text("batch_size").is_err());
        let mut e = RunConfig::default();
        e.lr_after_decay = 1.0;
        assert!(e.validate().is_err());
        let mut e = RunConfig::default();
        e.report = e.checkpoint.clone();
        assert!(e.validate().is_err());
    }

    #[test]
    fn zero_iterations_keep_initialisation() {
        let skel = Skeleton::default();
        let cfg = RunConfig {
            max_iterations: 0,
            ..tiny_run()
        };
        let mut t = Trainer::new(cfg.clone(), skel.clone(), data(&skel)).unwrap();
        let log = t.run(|_, _| Ok(())).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(t.model, PoseModel::init(cfg.model, cfg.seed).unwrap());
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let skel = Skeleton::default();
        let cfg = RunConfig {
            lr_initial: 0.0,
            lr_after_decay: 0.0,
            ..tiny_run()
        };
        let mut t = Trainer::new(cfg, skel.clone(), data(&skel)).unwrap();
        let before = t.model.clone();
        t.run(|_, _| Ok(())).unwrap();
        assert_eq!(t.iteration, 3);
        assert_eq!(t.model, before);
    }

    #[test]
    fn too_short_data_is_a_windowing_error() {
        let skel = Skeleton::default();
        let cfg = RunConfig {
            model: ModelConfig {
                window: 20,
                ..tiny_run().model
            },
            ..tiny_run()
        };
        assert!(matches!(
            Trainer::new(cfg, skel.clone(), data(&skel)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn log_iterations_strictly_increase() {
        let mut log = TrainingLog::default();
        let r = LogRecord {
            iteration: 2,
            learning_rate: 0.0,
            loss: LossBreakdown::default(),
            grad_norm: 0.0,
            wall_time: 0.0,
        };
        log.push(r).unwrap();
        assert!(log.push(r).is_err());
        assert!(log.to_csv().starts_with(TrainingLog::CSV_HEADER));
    }
}
