// SPDX-License-Identifier: Apache-2.0

//! Wall-clock scaling of the three evaluation orders of the SSM kernel.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssd::{ssd_forward, Decay, SsdInputs, SsdPath};
use crate::tensor::Tensor;

pub const DEFAULT_LENGTHS: [usize; 6] = [128, 256, 512, 1024, 2048, 4096];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub state_dim: usize,
    pub head_dim: usize,
    pub paths: Vec<SsdPath>,
    /// Timed repetitions per point; the fastest is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: DEFAULT_LENGTHS.to_vec(),
            state_dim: 16,
            head_dim: 16,
            paths: vec![SsdPath::Recurrent, SsdPath::Dual, SsdPath::Chunked(64)],
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub path: SsdPath,
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub wall_time_ns: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Fitted log-log slope of time against T, per path.
    pub exponents: Vec<(SsdPath, f64)>,
}

impl BenchReport {
    pub fn exponent(&self, path: SsdPath) -> Option<f64> {
        self.exponents.iter().find(|(p, _)| *p == path).map(|e| e.1)
    }

    /// Timing rows, then a second table of fitted exponents.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,T,N,D,wall_time_ns\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.path, r.t, r.n, r.d, r.wall_time_ns);
        }
        out.push_str("\npath,fitted_exponent\n");
        for (p, e) in &self.exponents {
            let _ = writeln!(out, "{p},{e:.4}");
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidArgument("need at least two positive points".into()));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("all lengths are equal".into()));
    }
    Ok(sxy / sxx)
}

/// Random inputs with decays in (0.5, 1).
pub fn random_inputs(t: usize, n: usize, d: usize, seed: u64) -> SsdInputs<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let b = Tensor::new(&[t, n], m(t * n)).expect("sized");
    let c = Tensor::new(&[t, n], m(t * n)).expect("sized");
    let x = Tensor::new(&[t, d], m(t * d)).expect("sized");
    let a = m(t).into_iter().map(|v| 0.75 + 0.25 * v).collect();
    SsdInputs::new(Decay::Scalar(a), b, c, x).expect("consistent")
}

fn effective(path: SsdPath, t: usize) -> SsdPath {
    match path {
        SsdPath::Chunked(c) => SsdPath::Chunked(c.min(t)),
        p => p,
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.paths.is_empty() || cfg.repeats == 0 {
        return Err(Error::InvalidArgument(
            "lengths, paths and repeats must be non-empty".into(),
        ));
    }
    let mut rows = Vec::new();
    for &t in &cfg.lengths {
        let inputs = random_inputs(t, cfg.state_dim, cfg.head_dim, cfg.seed ^ t as u64);
        // Guard: every path must agree before any timing is trusted.
        let reference = ssd_forward(&inputs, SsdPath::Recurrent)?;
        let scale = reference.max_abs().max(1.0);
        for &p in &cfg.paths {
            let y = ssd_forward(&inputs, effective(p, t))?;
            let err = y.max_abs_diff(&reference) / scale;
            if err > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "{p} disagrees with the recurrence at T={t}: {err:e}"
                )));
            }
        }
        for &p in &cfg.paths {
            let mut best = u128::MAX;
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                black_box(ssd_forward(black_box(&inputs), effective(p, t))?);
                best = best.min(start.elapsed().as_nanos());
            }
            rows.push(BenchRow {
                path: p,
                t,
                n: cfg.state_dim,
                d: cfg.head_dim,
                wall_time_ns: best.max(1),
            });
        }
    }
    let exponents = if cfg.lengths.len() >= 2 {
        cfg.paths
            .iter()
            .map(|&p| {
                let pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter(|r| r.path == p)
                    .map(|r| (r.t as f64, r.wall_time_ns as f64))
                    .collect();
                Ok((p, fit_loglog(&pts)?))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(BenchReport { rows, exponents })
}
