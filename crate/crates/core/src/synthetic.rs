//! Conjugate Gaussian benchmark with exactly computable divergences.
//!
//! Data are `N = 100` draws from `N(θ*, I)` in ten dimensions with a
//! standard normal prior. Each method distills pseudocoresets of several
//! sizes and the exact divergences to the full-data posterior are logged.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::distill::{self, CoresetSize, DistillConfig, DistillOutput, Method, Preset};
use crate::error::{Error, Result};
use crate::gaussapprox::{Covariance, DivergenceKind, DivergenceReport};
use crate::models::{Dataset, ModelSpec};
use crate::rng::{self, streams};
use crate::trajectories::{self, ExpertConfig, TrajectoryBuffer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub data_size: usize,
    pub sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub outer_steps: usize,
    pub log_interval: usize,
    pub experts: usize,
    pub expert_epochs: usize,
    pub max_start: usize,
    pub expert_steps: usize,
    pub inner_steps: usize,
    pub outer_lr_rkl: f64,
    pub outer_lr_w: f64,
    pub outer_lr_fkl: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            data_size: 100,
            sizes: vec![5, 20, 40, 60, 80, 100],
            methods: vec![Method::Rkl, Method::W, Method::Fkl],
            outer_steps: 500,
            log_interval: 10,
            experts: 10,
            expert_epochs: 30,
            max_start: 5,
            expert_steps: 15,
            inner_steps: 20,
            outer_lr_rkl: 50.0,
            outer_lr_w: 1.0,
            outer_lr_fkl: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.data_size == 0 {
            return Err(Error::Config("dim and data_size must be >= 1".into()));
        }
        if let Some(m) = self.sizes.iter().find(|&&m| m == 0 || m > self.data_size) {
            return Err(Error::Config(format!("coreset size {m} outside 1..={}", self.data_size)));
        }
        if self.methods.contains(&Method::Dc) {
            return Err(Error::Config("the synthetic benchmark covers rkl, w and fkl".into()));
        }
        if self.experts == 0 {
            return Err(Error::Config("experts must be >= 1".into()));
        }
        if self.max_start + self.expert_steps > self.expert_epochs {
            return Err(Error::Config(format!(
                "max_start + expert_steps = {} exceeds expert_epochs {}",
                self.max_start + self.expert_steps,
                self.expert_epochs
            )));
        }
        Ok(())
    }

    /// Distillation settings for one method and coreset size. The inner and
    /// expert learning rates are half the inverse curvature of the
    /// respective training losses.
    pub fn distill_config(&self, method: Method, size: usize) -> DistillConfig {
        let mut cfg = DistillConfig::preset(method, Preset::Ipc10);
        cfg.outer_steps = self.outer_steps;
        cfg.log_interval = self.log_interval;
        cfg.inner_steps = self.inner_steps;
        cfg.inner_lr = 0.5 / (size as f64 + 1.0);
        cfg.max_start = self.max_start;
        cfg.expert_steps = match method {
            Method::Rkl => 0,
            _ => self.expert_steps,
        };
        cfg.batch_size = self.data_size;
        cfg.rkl_population_scale = true;
        cfg.outer_lr = match method {
            Method::Rkl => self.outer_lr_rkl,
            Method::W => self.outer_lr_w,
            Method::Fkl | Method::Dc => self.outer_lr_fkl,
        };
        cfg.seed = rng::child_seed(self.seed, run_index(method, size));
        cfg
    }
}

fn run_index(method: Method, size: usize) -> u64 {
    let m = Method::ALL.iter().position(|&x| x == method).expect("listed method") as u64;
    (m << 32) | size as u64
}

pub struct SyntheticProblem {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub true_location: Vec<f64>,
    pub buffers: Vec<TrajectoryBuffer>,
}

impl SyntheticProblem {
    /// Draws the true location with coordinates `±U(4, 6)`, the data, and
    /// full-batch expert trajectories.
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let spec = ModelSpec::gaussian_location(d, vec![0.0; d], Covariance::isotropic(1.0), Covariance::isotropic(1.0))?;
        let mut r = rng::stream(cfg.seed, streams::DATA);
        let true_location: Vec<f64> = (0..d)
            .map(|_| {
                let mag = r.random_range(4.0..6.0);
                if r.random::<bool>() { mag } else { -mag }
            })
            .collect();
        let noise = rng::normal_vec(&mut r, cfg.data_size * d);
        let x = noise
            .iter()
            .enumerate()
            .map(|(i, e)| true_location[i % d] + e)
            .collect();
        let data = Dataset::new(Tensor::matrix(cfg.data_size, d, x)?, None)?;
        let lr = 0.5 / (cfg.data_size as f64 + 1.0);
        let buffers = (0..cfg.experts)
            .map(|i| {
                let ec = ExpertConfig {
                    epochs: cfg.expert_epochs,
                    lr,
                    seed: rng::child_seed(cfg.seed, i as u64),
                    batch_size: 0,
                };
                trajectories::train_expert(&spec, &data, &ec, "synthetic")
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            data,
            true_location,
            buffers,
        })
    }

    /// Distills one pseudocoreset from a random subset of the data.
    pub fn run(&self, cfg: &SyntheticConfig, method: Method, size: usize) -> Result<DistillOutput> {
        let dc = cfg.distill_config(method, size);
        let mut pick = rng::stream(dc.seed, streams::INIT);
        let init = distill::init_pseudocoreset(&self.data, CoresetSize::Total(size), 1, &mut pick)?;
        distill::distill(&self.spec, &self.data, &self.buffers, init, &dc)
    }
}

/// Isotropic Gaussian clusters in two dimensions with centres evenly spaced
/// on a circle of the given radius. Labels cycle through the classes.
pub fn gaussian_blobs(n: usize, classes: usize, radius: f64, std: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::Config(format!("{n} points cannot cover {classes} classes")));
    }
    let mut r = rng::stream(seed, streams::DATA);
    let mut x = Vec::with_capacity(2 * n);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &c in &labels {
        let angle = std::f64::consts::TAU * c as f64 / classes as f64;
        x.push(radius * angle.cos() + std * rng::normal(&mut r));
        x.push(radius * angle.sin() + std * rng::normal(&mut r));
    }
    Dataset::new(Tensor::matrix(n, 2, x)?, Some(labels))
}

/// One row of the divergence-vs-step table.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub size: usize,
    pub report: DivergenceReport,
}

/// Final divergence for one (method, size, kind).
#[derive(Clone, Debug, PartialEq)]
pub struct SizeRow {
    pub method: Method,
    pub size: usize,
    pub kind: DivergenceKind,
    pub value: f64,
}

pub fn final_rows(method: Method, size: usize, out: &DistillOutput) -> Vec<SizeRow> {
    let last = out.reports.iter().map(|r| r.step).max().unwrap_or(0);
    out.reports
        .iter()
        .filter(|r| r.step == last)
        .map(|r| SizeRow {
            method,
            size,
            kind: r.kind,
            value: r.value,
        })
        .collect()
}

pub const STEPS_CSV_HEADER: &str = "method,size,step,kind,value";
pub const SIZES_CSV_HEADER: &str = "method,size,kind,value";

/// Writes rows sorted by method, size, step and kind.
pub fn write_steps_csv<W: Write>(mut w: W, rows: &mut [StepRow]) -> Result<()> {
    rows.sort_by(|a, b| {
        (&a.report.method, a.size, a.report.step, a.report.kind.name())
            .cmp(&(&b.report.method, b.size, b.report.step, b.report.kind.name()))
    });
    writeln!(w, "{STEPS_CSV_HEADER}")?;
    for r in rows.iter() {
        writeln!(
            w,
            "{},{},{},{},{:e}",
            r.report.method,
            r.size,
            r.report.step,
            r.report.kind.name(),
            r.report.value
        )?;
    }
    Ok(())
}

pub fn write_sizes_csv<W: Write>(mut w: W, rows: &mut [SizeRow]) -> Result<()> {
    rows.sort_by(|a, b| (a.method.name(), a.size, a.kind.name()).cmp(&(b.method.name(), b.size, b.kind.name())));
    writeln!(w, "{SIZES_CSV_HEADER}")?;
    for r in rows.iter() {
        writeln!(w, "{},{},{},{:e}", r.method.name(), r.size, r.kind.name(), r.value)?;
    }
    Ok(())
}

/// Spearman rank correlation, averaging ranks over ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
