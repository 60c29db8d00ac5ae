//! Posterior-predictive metrics on held-out data.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::{self, Dataset, ModelSpec};

pub const DEFAULT_ECE_BINS: usize = 15;
const NLL_FLOOR: f64 = 1e-12;

/// Class probabilities averaged over posterior samples, `[N, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictive {
    pub probs: Tensor,
}

impl Predictive {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 2 {
            return Err(Error::shape("predictive", "probabilities must be [N, C]"));
        }
        for i in 0..probs.rows() {
            let row = probs.row(i);
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Bounds(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Bayesian model average of the softmax outputs over `samples`.
pub fn predictive(spec: &ModelSpec, samples: &[Vec<f64>], test: &Dataset) -> Result<Predictive> {
    if !spec.family.is_classifier() {
        return Err(Error::UnsupportedModel(format!(
            "predictive metrics need a classifier, got {}",
            spec.family.name()
        )));
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty chain".into()));
    }
    test.check(spec)?;
    let mut acc = Tensor::zeros(&[test.len(), spec.num_classes]);
    for theta in samples {
        let p = models::class_probabilities(spec, &test.features, theta)?;
        for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    Ok(Predictive {
        probs: acc.map(|v| v / n),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub ece_bins: usize,
    pub brier: f64,
    pub count: usize,
    /// Per-bin example counts used by the calibration error.
    pub bin_counts: Vec<usize>,
    /// Set when some true-class probability was zero and the log was floored.
    pub nll_clamped: bool,
}

/// First index of the largest entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn metrics(pred: &Predictive, labels: &[usize], bins: usize) -> Result<MetricsReport> {
    let n = pred.len();
    if n != labels.len() {
        return Err(Error::shape("metrics", format!("{n} predictions for {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::InsufficientData("no test data".into()));
    }
    if bins == 0 {
        return Err(Error::Config("ece bins must be >= 1".into()));
    }
    let classes = pred.probs.row_len();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::shape("metrics", format!("label {l} with {classes} classes")));
    }
    let mut correct = 0usize;
    let mut nll = 0.0;
    let mut clamped = false;
    let mut brier = 0.0;
    let mut bin_n = vec![0usize; bins];
    let mut bin_conf = vec![0.0; bins];
    let mut bin_hit = vec![0usize; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = pred.probs.row(i);
        let top = argmax(row);
        let hit = top == y;
        correct += usize::from(hit);
        let p = row[y];
        nll -= if p > 0.0 {
            p.ln()
        } else {
            clamped = true;
            (p + NLL_FLOOR).ln()
        };
        brier += row
            .iter()
            .enumerate()
            .map(|(c, &q)| (q - f64::from(u8::from(c == y))).powi(2))
            .sum::<f64>();
        // Bin b holds confidences in (b/B, (b+1)/B]; zero joins the first bin.
        let conf = row[top];
        let b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        bin_n[b] += 1;
        bin_conf[b] += conf;
        bin_hit[b] += usize::from(hit);
    }
    let nf = n as f64;
    let ece = (0..bins)
        .filter(|&b| bin_n[b] > 0)
        .map(|b| {
            let k = bin_n[b] as f64;
            (k / nf) * (bin_hit[b] as f64 / k - bin_conf[b] / k).abs()
        })
        .sum();
    Ok(MetricsReport {
        accuracy: correct as f64 / nf,
        nll: nll / nf,
        ece,
        ece_bins: bins,
        brier: brier / nf,
        count: n,
        bin_counts: bin_n,
        nll_clamped: clamped,
    })
}

/// Identifies one evaluation run in the summary CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLabel {
    pub method: String,
    pub ipc: Option<usize>,
    pub sampler: String,
    pub seed: u64,
}

pub const METRICS_CSV_HEADER: &str = "method,ipc,sampler,seed,acc,nll,ece,brier";

pub fn metrics_csv_row(label: &RunLabel, m: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{:?},{:?},{:?},{:?}",
        label.method,
        label.ipc.map_or(String::new(), |v| v.to_string()),
        label.sampler,
        label.seed,
        m.accuracy,
        m.nll,
        m.ece,
        m.brier
    )
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[(RunLabel, MetricsReport)]) -> Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for (l, m) in rows {
        writeln!(w, "{}", metrics_csv_row(l, m))?;
    }
    Ok(())
}
