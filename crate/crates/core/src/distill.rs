//! Pseudocoreset construction.
//!
//! Four update rules share one outer loop:
//!
//! * `fkl`: forward KL. The coreset endpoint is fitted numerically and then
//!   held fixed, so the gradient only sees the direct dependence of the
//!   coreset log-likelihood on the points.
//! * `w`: 2-Wasserstein between equal-covariance Gaussians, which is the
//!   normalized squared distance between the two trajectory endpoints,
//!   differentiated through every inner step.
//! * `rkl`: reverse KL through a sample covariance estimate around the
//!   fitted endpoint.
//! * `dc`: layerwise cosine gradient matching at freshly initialized
//!   parameters.
//!
//! Inner loops descend the training loss (negative log-likelihood plus the
//! prior penalty). The points move by plain gradient descent.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussapprox::{Covariance, DivergenceKind, DivergenceReport, GaussianApprox};
use crate::models::{self, AugmentDraw, Augmentation, Dataset, Family, ModelSpec};
use crate::rng::{self, streams, RunRng};
use crate::trajectories::{sample_segment, TrajectoryBuffer, TrajectorySegment};

/// Retries after a degenerate trajectory segment before giving up.
pub const MAX_SEGMENT_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rkl,
    W,
    Fkl,
    Dc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Rkl, Method::W, Method::Fkl, Method::Dc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rkl => "rkl",
            Method::W => "w",
            Method::Fkl => "fkl",
            Method::Dc => "dc",
        }
    }

    /// The divergence a method is built to minimize.
    pub fn target_kind(self) -> Option<DivergenceKind> {
        match self {
            Method::Rkl => Some(DivergenceKind::ReverseKl),
            Method::W => Some(DivergenceKind::W2),
            Method::Fkl => Some(DivergenceKind::ForwardKl),
            Method::Dc => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Hyperparameter presets by coreset size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Ipc1,
    Ipc10,
    Ipc20,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipc1" => Ok(Preset::Ipc1),
            "ipc10" => Ok(Preset::Ipc10),
            "ipc20" => Ok(Preset::Ipc20),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub expert_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub max_start: usize,
    pub samples: usize,
    pub coreset_cov: Covariance,
    pub expert_cov: Covariance,
    pub batch_size: usize,
    pub augmentation: Augmentation,
    /// Scale the reverse-KL minibatch term to the full dataset instead of
    /// averaging both terms per datum.
    pub rkl_population_scale: bool,
    pub log_interval: usize,
    pub seed: u64,
}

impl DistillConfig {
    pub fn preset(method: Method, preset: Preset) -> Self {
        let (max_start, inner_steps, inner_lr) = match preset {
            Preset::Ipc1 => (2, 50, 0.01),
            Preset::Ipc10 => (20, 30, 0.03),
            Preset::Ipc20 => (30, 30, 0.03),
        };
        let (expert_steps, samples) = match method {
            Method::Rkl => (0, 10),
            Method::W => (2, 1),
            Method::Fkl => (1, 30),
            Method::Dc => (0, 1),
        };
        Self {
            method,
            outer_steps: 5000,
            inner_steps,
            expert_steps,
            inner_lr,
            outer_lr: 0.1,
            max_start,
            samples,
            coreset_cov: Covariance::from_std(0.01),
            expert_cov: Covariance::from_std(0.01),
            batch_size: 1000,
            augmentation: Augmentation::Identity,
            rkl_population_scale: false,
            log_interval: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.inner_steps == 0 {
            return bad("inner_steps must be >= 1");
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return bad("inner_lr must be positive");
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad("outer_lr must be positive");
        }
        if self.samples == 0 {
            return bad("samples must be >= 1");
        }
        if self.method == Method::Rkl && self.samples < 2 {
            return bad("reverse KL needs samples >= 2 to estimate a covariance");
        }
        if self.method == Method::Rkl && self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be >= 1");
        }
        Ok(())
    }
}

/// Learnable points with fixed labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Pseudocoreset {
    pub data: Dataset,
    pub ipc: Option<usize>,
}

impl Pseudocoreset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoresetSize {
    Total(usize),
    PerClass(usize),
}

/// Copies a random subset of the data, class-balanced when a per-class
/// count is requested.
pub fn init_pseudocoreset<R: Rng + ?Sized>(
    data: &Dataset,
    size: CoresetSize,
    num_classes: usize,
    rng: &mut R,
) -> Result<Pseudocoreset> {
    match size {
        CoresetSize::Total(m) => {
            if m == 0 || m > data.len() {
                return Err(Error::InsufficientData(format!(
                    "cannot draw {m} points from {}",
                    data.len()
                )));
            }
            let idx = index::sample(rng, data.len(), m).into_vec();
            Ok(Pseudocoreset {
                data: data.subset(&idx),
                ipc: None,
            })
        }
        CoresetSize::PerClass(ipc) => {
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| Error::InsufficientData("per-class selection needs labels".into()))?;
            if ipc == 0 {
                return Err(Error::Config("ipc must be >= 1".into()));
            }
            let mut idx = Vec::with_capacity(ipc * num_classes);
            for c in 0..num_classes {
                let mut members: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == c).collect();
                if members.len() < ipc {
                    return Err(Error::InsufficientData(format!(
                        "class {c} has {} examples, need {ipc}",
                        members.len()
                    )));
                }
                members.shuffle(rng);
                idx.extend_from_slice(&members[..ipc]);
            }
            Ok(Pseudocoreset {
                data: data.subset(&idx),
                ipc: Some(ipc),
            })
        }
    }
}

/// Gradient with respect to the coreset features plus the objective value
/// when the method has one.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub grad: Tensor,
    pub objective: Option<f64>,
}

fn augmented(data: &Dataset, draw: &AugmentDraw) -> Dataset {
    if draw.is_identity() {
        return data.clone();
    }
    Dataset {
        features: draw.apply(&data.features),
        labels: data.labels.clone(),
    }
}

/// `L` gradient-descent steps on the training loss of (augmented) `u`.
pub fn fit_inner<R: Rng + ?Sized>(
    spec: &ModelSpec,
    u: &Dataset,
    start: &[f64],
    steps: usize,
    lr: f64,
    aug: Augmentation,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut theta = start.to_vec();
    for t in 1..=steps {
        let draw = aug.draw(u.len(), u.dim(), rng);
        let at = |e: Error| match e {
            Error::NonFinite { context } => Error::non_finite(format!("inner step {t}: {context}")),
            other => other,
        };
        let (_, grad) = models::training_loss_grad(spec, &augmented(u, &draw), &theta, 1.0).map_err(at)?;
        for (th, g) in theta.iter_mut().zip(&grad) {
            *th -= lr * g;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("inner step {t}: parameters")));
        }
    }
    Ok(theta)
}

fn perturbations<R: Rng + ?Sized>(cov: &Covariance, center: &[f64], count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let factor = cov.sqrt_factor(center.len())?;
    Ok((0..count)
        .map(|_| {
            let off = factor.apply(&rng::normal_vec(rng, center.len()));
            center.iter().zip(off).map(|(c, o)| c + o).collect()
        })
        .collect())
}

fn sum_scalars(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// Monte-Carlo forward-KL surrogate
/// `(1/S) Σ_s [1ᵀf(u, sg(θ_u) + δ_u,s) − 1ᵀf(u, θ_x + δ_x,s)]`
/// and its gradient in the features. The perturbed parameters are passed
/// in already formed; the coreset ones are routed through a stop-gradient.
pub fn fkl_estimator(
    spec: &ModelSpec,
    features: &Tensor,
    labels: Option<&[usize]>,
    coreset_params: &[Vec<f64>],
    expert_params: &[Vec<f64>],
) -> Result<(f64, Tensor)> {
    if coreset_params.is_empty() || coreset_params.len() != expert_params.len() {
        return Err(Error::Config("forward KL needs equal, nonzero sample counts".into()));
    }
    let mut g = Graph::new();
    let x = g.leaf(features.clone());
    let mut diffs = Vec::with_capacity(coreset_params.len());
    for (pu, px) in coreset_params.iter().zip(expert_params) {
        let tu = g.leaf(Tensor::vector(pu.clone()));
        let tu = g.stop_grad(tu);
        let tx = g.constant(Tensor::vector(px.clone()));
        let a = models::log_potential_expr(&mut g, spec, x, labels, tu)?;
        let b = models::log_potential_expr(&mut g, spec, x, labels, tx)?;
        diffs.push(g.sub(a, b)?);
    }
    let total = sum_scalars(&mut g, &diffs)?;
    let obj = g.scale(total, 1.0 / coreset_params.len() as f64);
    let grads = g.backward(obj)?;
    Ok((g.scalar(obj), grads.wrt(x)))
}

pub fn fkl_step<R: Rng + ?Sized>(
    spec: &ModelSpec,
    u: &Dataset,
    segment: &TrajectorySegment,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    let end = fit_inner(spec, u, &segment.start, cfg.inner_steps, cfg.inner_lr, cfg.augmentation, rng)?;
    let pu = perturbations(&cfg.coreset_cov, &end, cfg.samples, rng)?;
    let px = perturbations(&cfg.expert_cov, &segment.target, cfg.samples, rng)?;
    let (obj, grad) = fkl_estimator(spec, &u.features, u.labels.as_deref(), &pu, &px)?;
    Ok(StepOutput {
        grad,
        objective: Some(obj),
    })
}

/// `‖end − target‖² / ‖start − target‖²`.
pub fn normalized_distance(end: &[f64], target: &[f64], start: &[f64]) -> Result<f64> {
    let den: f64 = start.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
    if den == 0.0 {
        return Err(Error::DegenerateSegment);
    }
    let num: f64 = end.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(num / den)
}

/// Trajectory-matching step: unrolls `L_u` inner steps inside the graph and
/// differentiates the normalized endpoint distance through all of them.
pub fn w_step<R: Rng + ?Sized>(
    spec: &ModelSpec,
    u: &Dataset,
    segment: &TrajectorySegment,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    let den: f64 = segment
        .start
        .iter()
        .zip(&segment.target)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    if den == 0.0 {
        return Err(Error::DegenerateSegment);
    }
    let labels = u.labels.as_deref();
    let mut g = Graph::new();
    let x = g.leaf(u.features.clone());
    let mut theta = g.constant(Tensor::vector(segment.start.clone()));
    for t in 1..=cfg.inner_steps {
        let draw = cfg.augmentation.draw(u.len(), u.dim(), rng);
        let xa = draw.apply_expr(&mut g, x)?;
        let s = models::score_expr(&mut g, spec, xa, labels, theta)?;
        let p = models::prior_score_expr(&mut g, spec, theta)?;
        let step = g.add(s, p)?;
        let step = g.scale(step, cfg.inner_lr);
        theta = g.add(theta, step)?;
        if !g.value(theta).all_finite() {
            return Err(Error::non_finite(format!("inner step {t}: parameters")));
        }
    }
    let target = g.constant(Tensor::vector(segment.target.clone()));
    let diff = g.sub(theta, target)?;
    let num = g.sq_norm(diff);
    let obj = g.scale(num, 1.0 / den);
    let grads = g.backward(obj)?;
    Ok(StepOutput {
        grad: grads.wrt(x),
        objective: Some(g.scalar(obj)),
    })
}

/// How the reverse-KL estimator weighs the data and coreset potentials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RklScaling {
    /// `(1/B) 1ᵀg − (1/M) 1ᵀg̃`.
    PerDatum,
    /// `(N/B) 1ᵀg − 1ᵀg̃`.
    Population { full_size: usize },
}

/// Reverse-KL gradient estimate from parameter samples `θ_s`:
/// `−(1/S) Σ_s h̃_{m,s} · (weighted 1ᵀg_s − weighted 1ᵀg̃_s)`, with every
/// term centred across samples. `coreset_draw` is the augmentation applied to
/// the coreset; `batch` is used as given.
pub fn rkl_estimator(
    spec: &ModelSpec,
    coreset: &Dataset,
    coreset_draw: &AugmentDraw,
    batch: &Dataset,
    thetas: &[Vec<f64>],
    scaling: RklScaling,
) -> Result<Tensor> {
    let s_count = thetas.len();
    if s_count < 2 {
        return Err(Error::Config("reverse KL needs at least 2 samples for a covariance".into()));
    }
    let (m, b) = (coreset.len(), batch.len());
    let (wb, wm) = match scaling {
        RklScaling::PerDatum => (1.0 / b as f64, 1.0 / m as f64),
        RklScaling::Population { full_size } => (full_size as f64 / b as f64, 1.0),
    };
    let labels = coreset.labels.as_deref();
    let mut weighted = Vec::with_capacity(s_count);
    let mut h = Vec::with_capacity(s_count);
    for theta in thetas {
        let mut g = Graph::new();
        let x = g.leaf(coreset.features.clone());
        let xa = coreset_draw.apply_expr(&mut g, x)?;
        let t = g.constant(Tensor::vector(theta.clone()));
        let terms = models::log_potential_terms(&mut g, spec, xa, labels, t)?;
        let total = g.sum(terms);
        let grads = g.backward(total)?;
        let coreset_sum = g.scalar(total);
        let batch_sum = models::log_potential(spec, batch, theta)?;
        if !coreset_sum.is_finite() {
            return Err(Error::non_finite("reverse KL coreset potential"));
        }
        weighted.push(wb * batch_sum - wm * coreset_sum);
        h.push(grads.wrt(x));
    }
    // Centring g_s and g̃_s before summing is the same as centring the
    // weighted difference.
    let mean_w = weighted.iter().sum::<f64>() / s_count as f64;
    let mut mean_h = Tensor::zeros(coreset.features.shape());
    for hs in &h {
        for (a, v) in mean_h.data_mut().iter_mut().zip(hs.data()) {
            *a += v / s_count as f64;
        }
    }
    let mut out = Tensor::zeros(coreset.features.shape());
    for (hs, w) in h.iter().zip(&weighted) {
        let c = w - mean_w;
        for ((o, v), mh) in out.data_mut().iter_mut().zip(hs.data()).zip(mean_h.data()) {
            *o -= (v - mh) * c / s_count as f64;
        }
    }
    Ok(out)
}

pub fn rkl_step<R: Rng + ?Sized>(
    spec: &ModelSpec,
    u: &Dataset,
    full: &Dataset,
    segment: &TrajectorySegment,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    let end = fit_inner(spec, u, &segment.start, cfg.inner_steps, cfg.inner_lr, cfg.augmentation, rng)?;
    let thetas = perturbations(&cfg.coreset_cov, &end, cfg.samples, rng)?;
    let b = cfg.batch_size.min(full.len());
    let idx = index::sample(rng, full.len(), b).into_vec();
    let batch_draw = cfg.augmentation.draw(b, full.dim(), rng);
    let batch = augmented(&full.subset(&idx), &batch_draw);
    let coreset_draw = cfg.augmentation.draw(u.len(), u.dim(), rng);
    let scaling = if cfg.rkl_population_scale {
        RklScaling::Population { full_size: full.len() }
    } else {
        RklScaling::PerDatum
    };
    let grad = rkl_estimator(spec, u, &coreset_draw, &batch, &thetas, scaling)?;
    Ok(StepOutput { grad, objective: None })
}

/// `Σ_segments (1 − cos(target_seg, ∇_θℓ(u, θ)_seg))` and its gradient in
/// the coreset features, where `target` is the full-data loss gradient.
/// Segments where either gradient vanishes are skipped.
pub fn dc_match(spec: &ModelSpec, u: &Dataset, target: &[f64], theta: &[f64]) -> Result<StepOutput> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("matching parameters"));
    }
    let mut g = Graph::new();
    let x = g.leaf(u.features.clone());
    let t = g.constant(Tensor::vector(theta.to_vec()));
    let score = models::score_expr(&mut g, spec, x, u.labels.as_deref(), t)?;
    let coreset_grad = g.neg(score);
    let mut terms = Vec::new();
    for seg in spec.manifest() {
        let range = seg.offset..seg.offset + seg.len();
        let tgt = &target[range];
        let tgt_norm = tgt.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cu = g.slice(coreset_grad, seg.offset, seg.len())?;
        let cu_norm = g.value(cu).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if tgt_norm == 0.0 || cu_norm == 0.0 {
            log::warn!("gradient matching: zero gradient in segment {}, skipped", seg.name);
            continue;
        }
        let tv = g.constant(Tensor::vector(tgt.to_vec()));
        let dot = g.dot(tv, cu)?;
        let sq = g.sq_norm(cu);
        let norm = g.sqrt(sq);
        let norm = g.scale(norm, tgt_norm);
        let cos = g.div(dot, norm)?;
        let neg = g.neg(cos);
        terms.push(g.offset(neg, 1.0));
    }
    if terms.is_empty() {
        return Ok(StepOutput {
            grad: Tensor::zeros(u.features.shape()),
            objective: Some(0.0),
        });
    }
    let obj = sum_scalars(&mut g, &terms)?;
    let grads = g.backward(obj)?;
    Ok(StepOutput {
        grad: grads.wrt(x),
        objective: Some(g.scalar(obj)),
    })
}

/// Gradient matching against the full-data loss gradient at `theta`.
pub fn dc_step(spec: &ModelSpec, u: &Dataset, full: &Dataset, theta: &[f64]) -> Result<StepOutput> {
    let target: Vec<f64> = models::score(spec, full, theta)?.into_iter().map(|v| -v).collect();
    dc_match(spec, u, &target, theta)
}

/// Both sides of the small-step relation between the reverse-KL gradient
/// and gradient matching, flattened over the coreset features.
#[derive(Clone, Debug, PartialEq)]
pub struct Prop1Check {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub rel_err: f64,
}

/// Compares the reverse-KL gradient under `q_u = N(θ − η∇ℓ(u, θ), Σ)` with
/// `−η ∇_u(∇_θℓ(x, θ)ᵀ ∇_θℓ(u, θ))`.
///
/// For the location model the reverse-KL side is exact: the mean of `q_u`
/// moves by `ηP` per unit change of each point, and the expectations of the
/// (linear) score functions equal their values at the mean, so the
/// covariance drops out.
pub fn verify_prop1(spec: &ModelSpec, u: &Dataset, x: &Dataset, theta: &[f64], lr: f64) -> Result<Prop1Check> {
    if spec.family != Family::GaussianLocation {
        return Err(Error::UnsupportedModel(format!(
            "analytic reverse-KL gradient needs gaussian-location, got {}",
            spec.family.name()
        )));
    }
    let prec = spec
        .likelihood_cov
        .as_ref()
        .expect("validated spec")
        .precision(spec.input_dim)?;
    let score_u0 = models::score(spec, u, theta)?;
    let mean: Vec<f64> = theta.iter().zip(&score_u0).map(|(t, s)| t + lr * s).collect();
    let su = models::score(spec, u, &mean)?;
    let sx = models::score(spec, x, &mean)?;
    // ∇ℓ(x, μ) − ∇ℓ(u, μ) = −score_x + score_u.
    let diff: Vec<f64> = sx.iter().zip(&su).map(|(a, b)| b - a).collect();
    let per_point: Vec<f64> = prec.apply(&diff).into_iter().map(|v| lr * v).collect();
    let lhs: Vec<f64> = (0..u.len()).flat_map(|_| per_point.iter().copied()).collect();

    let target: Vec<f64> = models::score(spec, x, theta)?.into_iter().map(|v| -v).collect();
    let mut g = Graph::new();
    let xu = g.leaf(u.features.clone());
    let t = g.constant(Tensor::vector(theta.to_vec()));
    let s = models::score_expr(&mut g, spec, xu, u.labels.as_deref(), t)?;
    let loss_grad = g.neg(s);
    let tv = g.constant(Tensor::vector(target));
    let inner = g.dot(tv, loss_grad)?;
    let obj = g.scale(inner, -lr);
    let rhs = g.backward(obj)?.wrt(xu).into_data();

    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let err: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let rel_err = norm(&err) / norm(&lhs).max(norm(&rhs)).max(1e-12);
    Ok(Prop1Check { lhs, rhs, rel_err })
}

#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub coreset: Pseudocoreset,
    pub reports: Vec<DivergenceReport>,
    /// Objective value per outer step, where the method has one.
    pub objectives: Vec<f64>,
    pub resampled_segments: usize,
}

struct Streams {
    segments: RunRng,
    noise: RunRng,
    init: RunRng,
}

fn log_divergences(
    spec: &ModelSpec,
    u: &Dataset,
    full_post: &GaussianApprox,
    step: usize,
    method: Method,
    out: &mut Vec<DivergenceReport>,
) -> Result<()> {
    let post = models::exact_conjugate_posterior(spec, u)?;
    for kind in DivergenceKind::ALL {
        out.push(DivergenceReport {
            step,
            method: method.name().to_string(),
            kind,
            value: kind.evaluate(&post, full_post)?,
            exact: true,
        });
    }
    Ok(())
}

fn check_buffers(spec: &ModelSpec, buffers: &[TrajectoryBuffer]) -> Result<()> {
    if buffers.is_empty() {
        return Err(Error::Config("trajectory methods need expert buffers".into()));
    }
    if let Some((i, b)) = buffers.iter().enumerate().find(|(_, b)| b.dim != spec.param_dim()) {
        return Err(Error::shape(
            "distill",
            format!("buffer {i} has dimension {} for a {}-parameter model", b.dim, spec.param_dim()),
        ));
    }
    Ok(())
}

/// Runs the outer loop. For the location model, exact divergences to the
/// full-data posterior are logged at step 0, every `log_interval` steps and
/// at the last step.
pub fn distill(
    spec: &ModelSpec,
    full: &Dataset,
    buffers: &[TrajectoryBuffer],
    init: Pseudocoreset,
    cfg: &DistillConfig,
) -> Result<DistillOutput> {
    cfg.validate()?;
    spec.validate()?;
    full.check(spec)?;
    init.data.check(spec)?;
    if init.is_empty() {
        return Err(Error::InsufficientData("empty pseudocoreset".into()));
    }
    if init.len() > full.len() {
        return Err(Error::InsufficientData(format!(
            "pseudocoreset of {} points exceeds the {} data points",
            init.len(),
            full.len()
        )));
    }
    if cfg.method != Method::Dc {
        check_buffers(spec, buffers)?;
    }

    let mut st = Streams {
        segments: rng::stream(cfg.seed, streams::SEGMENTS),
        noise: rng::stream(cfg.seed, streams::NOISE),
        init: rng::stream(cfg.seed, streams::INIT),
    };
    let full_post = if spec.family == Family::GaussianLocation {
        Some(models::exact_conjugate_posterior(spec, full)?)
    } else {
        None
    };

    let mut coreset = init;
    let mut reports = Vec::new();
    let mut objectives = Vec::new();
    let mut resampled = 0;
    if let Some(fp) = &full_post {
        log_divergences(spec, &coreset.data, fp, 0, cfg.method, &mut reports)?;
    }

    for k in 1..=cfg.outer_steps {
        let u = &coreset.data;
        let step = match cfg.method {
            Method::Dc => dc_outer(spec, &mut coreset.data, full, cfg, &mut st)?,
            method => {
                let mut attempt = 0;
                loop {
                    let seg = sample_segment(buffers, cfg.max_start, cfg.expert_steps, &mut st.segments)?;
                    let out = match method {
                        Method::Fkl => fkl_step(spec, u, &seg, cfg, &mut st.noise),
                        Method::W => w_step(spec, u, &seg, cfg, &mut st.noise),
                        Method::Rkl => rkl_step(spec, u, full, &seg, cfg, &mut st.noise),
                        Method::Dc => unreachable!(),
                    };
                    match out {
                        Err(Error::DegenerateSegment) if attempt < MAX_SEGMENT_RETRIES => {
                            attempt += 1;
                            resampled += 1;
                            log::debug!("step {k}: degenerate segment, resampling");
                        }
                        other => break other?,
                    }
                }
            }
        };
        if cfg.method != Method::Dc {
            apply_update(&mut coreset.data, &step.grad, cfg.outer_lr, k)?;
        }
        if let Some(o) = step.objective {
            objectives.push(o);
        }
        if let Some(fp) = &full_post {
            if k % cfg.log_interval == 0 || k == cfg.outer_steps {
                log_divergences(spec, &coreset.data, fp, k, cfg.method, &mut reports)?;
            }
        }
    }
    Ok(DistillOutput {
        coreset,
        reports,
        objectives,
        resampled_segments: resampled,
    })
}

fn apply_update(u: &mut Dataset, grad: &Tensor, lr: f64, step: usize) -> Result<()> {
    if let Some(i) = grad.first_non_finite_row() {
        return Err(Error::non_finite(format!("outer step {step}: gradient of point {i}")));
    }
    for (v, g) in u.features.data_mut().iter_mut().zip(grad.data()) {
        *v -= lr * g;
    }
    Ok(())
}

/// One outer step of gradient matching: fresh random parameters, then
/// alternating matching updates of the points and training updates of the
/// parameters. Returns the last matching objective.
fn dc_outer(spec: &ModelSpec, u: &mut Dataset, full: &Dataset, cfg: &DistillConfig, st: &mut Streams) -> Result<StepOutput> {
    let mut theta: Vec<f64> = rng::normal_vec(&mut st.init, spec.param_dim())
        .into_iter()
        .map(|v| crate::trajectories::INIT_SCALE * v)
        .collect();
    let mut last = None;
    for t in 1..=cfg.inner_steps {
        let out = dc_step(spec, u, full, &theta)?;
        apply_update(u, &out.grad, cfg.outer_lr, t)?;
        theta = fit_inner(spec, u, &theta, 1, cfg.inner_lr, cfg.augmentation, &mut st.noise)?;
        last = Some(out);
    }
    let last = last.expect("inner_steps >= 1");
    Ok(StepOutput {
        grad: Tensor::zeros(u.features.shape()),
        objective: last.objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_difference, max_rel_err};
    use crate::rng::stream;

    fn location(d: usize) -> ModelSpec {
        ModelSpec::gaussian_location(d, vec![0.0; d], Covariance::isotropic(1.0), Covariance::isotropic(1.0)).unwrap()
    }

    fn points(n: usize, d: usize, shift: f64, seed: u64) -> Dataset {
        let x = rng::normal_vec(&mut stream(seed, 0), n * d)
            .into_iter()
            .map(|v| v + shift)
            .collect();
        Dataset::new(Tensor::matrix(n, d, x).unwrap(), None).unwrap()
    }

    fn labelled(n: usize, d: usize, classes: usize, seed: u64) -> Dataset {
        let mut r = stream(seed, 0);
        let x = rng::normal_vec(&mut r, n * d);
        let y = (0..n).map(|i| i % classes).collect();
        Dataset::new(Tensor::matrix(n, d, x).unwrap(), Some(y)).unwrap()
    }

    #[test]
    fn init_examples() {
        let data = labelled(30, 2, 3, 1);
        let c = init_pseudocoreset(&data, CoresetSize::PerClass(1), 3, &mut stream(1, 0)).unwrap();
        assert_eq!(c.data.labels, Some(vec![0, 1, 2]));
        let a = init_pseudocoreset(&data, CoresetSize::PerClass(4), 3, &mut stream(2, 0)).unwrap();
        let b = init_pseudocoreset(&data, CoresetSize::PerClass(4), 3, &mut stream(2, 0)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            init_pseudocoreset(&data, CoresetSize::PerClass(11), 3, &mut stream(2, 0)),
            Err(Error::InsufficientData(_))
        ));
        let all = init_pseudocoreset(&data, CoresetSize::Total(30), 3, &mut stream(3, 0)).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..30).map(|i| all.data.features.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut orig: Vec<Vec<u64>> = (0..30).map(|i| data.features.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
    }

    #[test]
    fn fkl_gradient_cancels_for_matched_endpoints() {
        for spec in [location(3), ModelSpec::mlp(3, 4, 2, 0.01).unwrap()] {
            let u = if spec.family.is_classifier() { labelled(4, 3, 2, 5) } else { points(4, 3, 0.0, 5) };
            let end = rng::normal_vec(&mut stream(6, 0), spec.param_dim());
            let p = perturbations(&Covariance::from_std(0.01), &end, 5, &mut stream(7, 0)).unwrap();
            let (obj, grad) = fkl_estimator(&spec, &u.features, u.labels.as_deref(), &p, &p).unwrap();
            assert_eq!(obj, 0.0);
            assert!(grad.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fkl_gradient_matches_frozen_finite_differences() {
        let spec = ModelSpec::softmax_linear(2, 3, 0.01).unwrap();
        let u = labelled(6, 2, 3, 8);
        let mut r = stream(9, 0);
        let pu = perturbations(&Covariance::from_std(0.1), &rng::normal_vec(&mut r, 9), 4, &mut r).unwrap();
        let px = perturbations(&Covariance::from_std(0.1), &rng::normal_vec(&mut r, 9), 4, &mut r).unwrap();
        let (_, grad) = fkl_estimator(&spec, &u.features, u.labels.as_deref(), &pu, &px).unwrap();
        let fd = finite_difference(
            |f| {
                let t = Tensor::new(u.features.shape().to_vec(), f.to_vec()).unwrap();
                fkl_estimator(&spec, &t, u.labels.as_deref(), &pu, &px).unwrap().0
            },
            u.features.data(),
            1e-5,
        );
        assert!(max_rel_err(grad.data(), &fd, 1e-8) < 1e-4);
    }

    /// One forward-KL step on the 1-D location model pulls the coreset
    /// posterior toward the full-data posterior.
    #[test]
    fn fkl_step_reduces_forward_kl() {
        let spec = location(1);
        let full = points(50, 1, 3.0, 1);
        let cfg_e = crate::trajectories::ExpertConfig { epochs: 10, lr: 0.5 / 51.0, seed: 2, batch_size: 0 };
        let buf = crate::trajectories::train_expert(&spec, &full, &cfg_e, "toy").unwrap();
        let u = Dataset::from_rows(&[vec![-1.0], vec![0.0]], None).unwrap();
        let mut cfg = DistillConfig::preset(Method::Fkl, Preset::Ipc10);
        cfg.outer_steps = 1;
        cfg.inner_steps = 20;
        cfg.inner_lr = 0.2;
        cfg.max_start = 0;
        cfg.expert_steps = 10;
        cfg.outer_lr = 0.05;
        let out = distill(&spec, &full, &[buf], Pseudocoreset { data: u, ipc: None }, &cfg).unwrap();
        let fkl: Vec<f64> = out.reports.iter().filter(|r| r.kind == DivergenceKind::ForwardKl).map(|r| r.value).collect();
        assert!(fkl[1] < fkl[0], "{fkl:?}");
    }

    /// With one inner step `θ₁ = θ₀ + η(P Σ(u − θ₀) + P₀(θ̄₀ − θ₀))`, the
    /// gradient of `‖θ₁ − θ_x‖²/den` in every point is `2ηP(θ₁ − θ_x)/den`.
    #[test]
    fn w_gradient_matches_hand_chain_rule() {
        let d = 3;
        let spec = ModelSpec::gaussian_location(
            d,
            vec![0.2, -0.1, 0.0],
            Covariance::diagonal(vec![2.0, 1.0, 0.5]),
            Covariance::diagonal(vec![0.5, 1.0, 2.0]),
        )
        .unwrap();
        let u = points(4, d, 1.0, 3);
        let seg = TrajectorySegment {
            start: vec![0.3, 0.1, -0.4],
            target: vec![1.0, 0.8, 0.5],
            start_epoch: 0,
            buffer: 0,
        };
        let mut cfg = DistillConfig::preset(Method::W, Preset::Ipc10);
        cfg.inner_steps = 1;
        cfg.inner_lr = 0.05;
        let out = w_step(&spec, &u, &seg, &cfg, &mut stream(0, 0)).unwrap();

        let p = [2.0, 1.0, 0.5];
        let p0 = [0.5, 1.0, 2.0];
        let m0 = [0.2, -0.1, 0.0];
        let den: f64 = seg.start.iter().zip(&seg.target).map(|(a, b)| (a - b).powi(2)).sum();
        let mut theta1 = [0.0; 3];
        for j in 0..d {
            let s: f64 = (0..4).map(|m| u.features.row(m)[j] - seg.start[j]).sum();
            theta1[j] = seg.start[j] + cfg.inner_lr * (p[j] * s + p0[j] * (m0[j] - seg.start[j]));
        }
        for m in 0..4 {
            for j in 0..d {
                let expect = 2.0 * cfg.inner_lr * p[j] * (theta1[j] - seg.target[j]) / den;
                let got = out.grad.row(m)[j];
                assert!((got - expect).abs() <= 1e-6 * expect.abs().max(1e-12), "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn w_unroll_matches_finite_differences() {
        let spec = ModelSpec::mlp(2, 3, 2, 0.01).unwrap();
        let u = labelled(4, 2, 2, 4);
        let mut r = stream(5, 0);
        let seg = TrajectorySegment {
            start: rng::normal_vec(&mut r, spec.param_dim()),
            target: rng::normal_vec(&mut r, spec.param_dim()),
            start_epoch: 0,
            buffer: 0,
        };
        let mut cfg = DistillConfig::preset(Method::W, Preset::Ipc10);
        cfg.inner_steps = 3;
        cfg.inner_lr = 0.1;
        let out = w_step(&spec, &u, &seg, &cfg, &mut stream(0, 0)).unwrap();
        let fd = finite_difference(
            |f| {
                let d = Dataset::new(Tensor::new(u.features.shape().to_vec(), f.to_vec()).unwrap(), u.labels.clone()).unwrap();
                w_step(&spec, &d, &seg, &cfg, &mut stream(0, 0)).unwrap().objective.unwrap()
            },
            u.features.data(),
            1e-5,
        );
        assert!(max_rel_err(out.grad.data(), &fd, 1e-8) < 1e-4);
    }

    #[test]
    fn w_degenerate_segment_is_an_error() {
        let spec = location(2);
        let u = points(2, 2, 0.0, 1);
        let seg = TrajectorySegment { start: vec![0.5, 0.5], target: vec![0.5, 0.5], start_epoch: 0, buffer: 0 };
        let cfg = DistillConfig::preset(Method::W, Preset::Ipc10);
        assert!(matches!(w_step(&spec, &u, &seg, &cfg, &mut stream(0, 0)), Err(Error::DegenerateSegment)));
    }

    #[test]
    fn normalized_distance_is_scale_invariant() {
        let (e, t, s) = (vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]);
        let base = normalized_distance(&e, &t, &s).unwrap();
        for c in [0.01, 3.0, 1e4] {
            let sc = |v: &[f64]| v.iter().map(|x| c * x).collect::<Vec<_>>();
            let v = normalized_distance(&sc(&e), &sc(&t), &sc(&s)).unwrap();
            assert!((v - base).abs() <= 1e-12 * base);
        }
    }

    #[test]
    fn rkl_gradient_vanishes_without_spread() {
        let spec = location(2);
        let u = points(3, 2, 0.0, 1);
        let batch = points(5, 2, 1.0, 2);
        let thetas = vec![vec![0.3, -0.2]; 4];
        let id = Augmentation::Identity.draw(3, 2, &mut stream(0, 0));
        let g = rkl_estimator(&spec, &u, &id, &batch, &thetas, RklScaling::PerDatum).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(rkl_estimator(&spec, &u, &id, &batch, &thetas[..1], RklScaling::PerDatum).is_err());
    }

    /// Under `θ ~ N(μ, σ²I)` and unit likelihood covariance,
    /// `Cov[θ − u_m, mean_b f(x_b, θ) − mean_m f(u_m, θ)] = σ²(x̄ − ū)`; the
    /// `1/S` estimator has expectation `(S−1)/S` times that.
    #[test]
    fn rkl_estimator_is_unbiased_for_the_plug_in_covariance() {
        let d = 2;
        let spec = location(d);
        let u = points(3, d, 0.0, 11);
        let x = points(8, d, 1.5, 12);
        let (mu, sigma, s) = (vec![0.4, -0.3], 0.3, 20);
        let mean = |data: &Dataset, j: usize| (0..data.len()).map(|i| data.features.row(i)[j]).sum::<f64>() / data.len() as f64;
        let id = Augmentation::Identity.draw(3, d, &mut stream(0, 0));
        let reps = 100;
        let mut r = stream(13, 0);
        let mut ests = vec![Vec::new(); d];
        for _ in 0..reps {
            let thetas = perturbations(&Covariance::from_std(sigma), &mu, s, &mut r).unwrap();
            let g = rkl_estimator(&spec, &u, &id, &x, &thetas, RklScaling::PerDatum).unwrap();
            for (j, e) in ests.iter_mut().enumerate() {
                e.push(g.row(0)[j]);
            }
        }
        let factor = (s as f64 - 1.0) / s as f64;
        for (j, e) in ests.iter().enumerate() {
            let expect = -factor * sigma * sigma * (mean(&x, j) - mean(&u, j));
            let m = e.iter().sum::<f64>() / reps as f64;
            let sd = (e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            let se = sd / (reps as f64).sqrt();
            assert!((m - expect).abs() < 3.0 * se, "coord {j}: {m} vs {expect} (se {se})");
        }
    }

    #[test]
    fn dc_examples() {
        let spec = ModelSpec::softmax_linear(2, 3, 0.0).unwrap();
        let x = labelled(9, 2, 3, 3);
        let theta = rng::normal_vec(&mut stream(4, 0), spec.param_dim());
        let same = dc_step(&spec, &x, &x, &theta).unwrap();
        assert!(same.objective.unwrap().abs() < 1e-12);
        assert!(same.grad.data().iter().all(|v| v.abs() < 1e-10));

        let u = labelled(3, 2, 3, 5);
        let target: Vec<f64> = models::score(&spec, &x, &theta).unwrap().into_iter().map(|v| -v).collect();
        let base = dc_match(&spec, &u, &target, &theta).unwrap().objective.unwrap();
        let scaled: Vec<f64> = target.iter().map(|v| 7.5 * v).collect();
        let other = dc_match(&spec, &u, &scaled, &theta).unwrap().objective.unwrap();
        assert!((base - other).abs() < 1e-12);
    }

    #[test]
    fn dc_gradient_matches_finite_differences() {
        let spec = ModelSpec::mlp(2, 3, 3, 0.0).unwrap();
        let x = labelled(12, 2, 3, 6);
        let u = labelled(3, 2, 3, 7);
        let theta = rng::normal_vec(&mut stream(8, 0), spec.param_dim());
        let out = dc_step(&spec, &u, &x, &theta).unwrap();
        let fd = finite_difference(
            |f| {
                let d = Dataset::new(Tensor::new(u.features.shape().to_vec(), f.to_vec()).unwrap(), u.labels.clone()).unwrap();
                dc_step(&spec, &d, &x, &theta).unwrap().objective.unwrap()
            },
            u.features.data(),
            1e-5,
        );
        assert!(max_rel_err(out.grad.data(), &fd, 1e-8) < 1e-5);
    }

    #[test]
    fn prop1_symmetric_configuration_vanishes() {
        let spec = location(2);
        let u = Dataset::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]], None).unwrap();
        let x = Dataset::from_rows(&[vec![0.0, 2.0], vec![0.0, -2.0], vec![1.0, 1.0], vec![-1.0, -1.0]], None).unwrap();
        let c = verify_prop1(&spec, &u, &x, &[0.0, 0.0], 1e-2).unwrap();
        assert!(c.lhs.iter().chain(&c.rhs).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn prop1_is_gaussian_only() {
        let spec = ModelSpec::softmax_linear(2, 2, 0.0).unwrap();
        let u = labelled(2, 2, 2, 1);
        assert!(matches!(verify_prop1(&spec, &u, &u, &[0.0; 6], 0.1), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn zero_outer_steps_return_the_initialization() {
        let spec = location(2);
        let full = points(10, 2, 1.0, 1);
        let init = Pseudocoreset { data: points(3, 2, 0.0, 2), ipc: None };
        let mut cfg = DistillConfig::preset(Method::Dc, Preset::Ipc10);
        cfg.outer_steps = 0;
        let out = distill(&spec, &full, &[], init.clone(), &cfg).unwrap();
        assert_eq!(out.coreset, init);
    }

    #[test]
    fn labels_never_change() {
        let spec = ModelSpec::softmax_linear(2, 3, 0.01).unwrap();
        let full = labelled(30, 2, 3, 1);
        let cfg_e = crate::trajectories::ExpertConfig { epochs: 6, lr: 0.01, seed: 1, batch_size: 10 };
        let buf = crate::trajectories::train_expert(&spec, &full, &cfg_e, "toy").unwrap();
        let init = init_pseudocoreset(&full, CoresetSize::PerClass(2), 3, &mut stream(1, 0)).unwrap();
        for method in Method::ALL {
            let mut cfg = DistillConfig::preset(method, Preset::Ipc1);
            cfg.outer_steps = 3;
            cfg.inner_steps = 2;
            cfg.max_start = 2;
            cfg.samples = cfg.samples.max(2);
            let out = distill(&spec, &full, std::slice::from_ref(&buf), init.clone(), &cfg).unwrap();
            assert_eq!(out.coreset.data.labels, init.data.labels);
            assert!(out.coreset.data.features.all_finite());
        }
    }
}
