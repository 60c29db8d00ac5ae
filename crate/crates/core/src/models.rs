//! Model families: per-datum log-potentials, priors, losses, and the
//! conjugate Gaussian posterior.
//!
//! Every family exposes two graph builders over the same inputs. One builds
//! the per-datum log-potential and the other builds its parameter gradient
//! in closed form. Because the gradient is an ordinary graph expression, it
//! can itself be differentiated with respect to the data. Unrolled training
//! loops on a pseudocoreset need exactly that.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussapprox::{Covariance, GaussianApprox, Precision};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianLocation,
    SoftmaxLinear,
    Mlp1Hidden,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianLocation => "gaussian-location",
            Family::SoftmaxLinear => "softmax-linear",
            Family::Mlp1Hidden => "mlp-1hidden",
        }
    }

    pub fn is_classifier(self) -> bool {
        self != Family::GaussianLocation
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-location" => Ok(Family::GaussianLocation),
            "softmax-linear" => Ok(Family::SoftmaxLinear),
            "mlp-1hidden" => Ok(Family::Mlp1Hidden),
            other => Err(Error::UnsupportedModel(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    Gaussian { mean: Vec<f64>, cov: Covariance },
    /// `λ‖θ‖²`, i.e. `N(0, (2λ)⁻¹ I)` up to a constant.
    WeightDecay { lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub input_dim: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub hidden: usize,
    pub prior: Prior,
    #[serde(default)]
    pub likelihood_cov: Option<Covariance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    pub fn gaussian_location(
        dim: usize,
        prior_mean: Vec<f64>,
        prior_cov: Covariance,
        likelihood_cov: Covariance,
    ) -> Result<Self> {
        let spec = Self {
            family: Family::GaussianLocation,
            input_dim: dim,
            num_classes: 0,
            hidden: 0,
            prior: Prior::Gaussian {
                mean: prior_mean,
                cov: prior_cov,
            },
            likelihood_cov: Some(likelihood_cov),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn softmax_linear(input_dim: usize, num_classes: usize, lambda: f64) -> Result<Self> {
        let spec = Self {
            family: Family::SoftmaxLinear,
            input_dim,
            num_classes,
            hidden: 0,
            prior: Prior::WeightDecay { lambda },
            likelihood_cov: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(input_dim: usize, hidden: usize, num_classes: usize, lambda: f64) -> Result<Self> {
        let spec = Self {
            family: Family::Mlp1Hidden,
            input_dim,
            num_classes,
            hidden,
            prior: Prior::WeightDecay { lambda },
            likelihood_cov: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        match self.family {
            Family::GaussianLocation => {
                let cov = self.likelihood_cov.as_ref().ok_or_else(|| {
                    Error::Config("gaussian-location needs a likelihood covariance".into())
                })?;
                cov.validate(self.input_dim)?;
            }
            Family::SoftmaxLinear | Family::Mlp1Hidden => {
                if self.num_classes < 2 {
                    return Err(Error::Config("classifiers need at least 2 classes".into()));
                }
                if self.family == Family::Mlp1Hidden && self.hidden == 0 {
                    return Err(Error::Config("mlp-1hidden needs a hidden width".into()));
                }
            }
        }
        match &self.prior {
            Prior::Gaussian { mean, cov } => {
                if mean.len() != self.param_dim() {
                    return Err(Error::shape(
                        "prior",
                        format!("mean of length {} for {} parameters", mean.len(), self.param_dim()),
                    ));
                }
                cov.validate(self.param_dim())?;
            }
            Prior::WeightDecay { lambda } => {
                if !(*lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::Config(format!("weight decay must be >= 0, got {lambda}")));
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<Segment> {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden);
        let shapes: Vec<(&str, Vec<usize>)> = match self.family {
            Family::GaussianLocation => vec![("location", vec![d])],
            Family::SoftmaxLinear => vec![("weight", vec![d, c]), ("bias", vec![c])],
            Family::Mlp1Hidden => vec![
                ("hidden.weight", vec![d, h]),
                ("hidden.bias", vec![h]),
                ("output.weight", vec![h, c]),
                ("output.bias", vec![c]),
            ],
        };
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let seg = Segment {
                    name: name.to_string(),
                    shape,
                    offset,
                };
                offset += seg.len();
                seg
            })
            .collect()
    }

    pub fn param_dim(&self) -> usize {
        self.manifest().iter().map(Segment::len).sum()
    }

    /// Short identifier recorded alongside stored trajectories.
    pub fn model_id(&self) -> String {
        match self.family {
            Family::GaussianLocation => format!("gaussian-location-d{}", self.input_dim),
            Family::SoftmaxLinear => format!("softmax-linear-d{}-c{}", self.input_dim, self.num_classes),
            Family::Mlp1Hidden => format!(
                "mlp-1hidden-d{}-h{}-c{}",
                self.input_dim, self.hidden, self.num_classes
            ),
        }
    }

    fn likelihood_precision(&self) -> Result<Precision> {
        self.likelihood_cov
            .as_ref()
            .ok_or_else(|| Error::Config("gaussian-location needs a likelihood covariance".into()))?
            .precision(self.input_dim)
    }
}

/// Flat parameters with the layer layout they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub manifest: Vec<Segment>,
}

impl ParamVector {
    pub fn new(spec: &ModelSpec, flat: Vec<f64>) -> Result<Self> {
        let manifest = spec.manifest();
        let d: usize = manifest.iter().map(Segment::len).sum();
        if flat.len() != d {
            return Err(Error::shape(
                "params",
                format!("{} values for a {d}-parameter model", flat.len()),
            ));
        }
        Ok(Self { flat, manifest })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            flat: vec![0.0; spec.param_dim()],
            manifest: spec.manifest(),
        }
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.manifest
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.flat[s.offset..s.offset + s.len()])
    }
}

/// Feature matrix `[N, d]` with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::shape(
                "dataset",
                format!("features must be [N, d], got {:?}", features.shape()),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::shape(
                    "dataset",
                    format!("{} labels for {} rows", l.len(), features.rows()),
                ));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<usize>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("dataset", "ragged feature rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(Tensor::matrix(rows.len(), d, data)?, labels)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Tensor::zeros(&[0, dim]),
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.gather_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.dim() != other.dim() || self.labels.is_some() != other.labels.is_some() {
            return Err(Error::shape("dataset", "cannot concatenate incompatible datasets"));
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let labels = self.labels.as_ref().map(|a| {
            let mut a = a.clone();
            a.extend(other.labels.as_ref().expect("checked above"));
            a
        });
        Self::new(Tensor::matrix(self.len() + other.len(), self.dim(), data)?, labels)
    }

    /// Checks dimensions and labels against a model.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.dim() != spec.input_dim {
            return Err(Error::shape(
                "dataset",
                format!("feature dimension {} for model input {}", self.dim(), spec.input_dim),
            ));
        }
        if spec.family.is_classifier() {
            let labels = self
                .labels
                .as_ref()
                .ok_or_else(|| Error::shape("dataset", "classifier data needs labels"))?;
            if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= spec.num_classes) {
                return Err(Error::shape(
                    "dataset",
                    format!("label {l} of datum {i} exceeds {} classes", spec.num_classes),
                ));
            }
        }
        Ok(())
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}

fn labels_of<'a>(spec: &ModelSpec, labels: Option<&'a [usize]>) -> Result<&'a [usize]> {
    labels.ok_or_else(|| Error::shape("log_potential", format!("{} needs labels", spec.family.name())))
}

struct Layers {
    w1: Var,
    b1: Var,
    w2: Option<(Var, Var)>,
}

fn split_params(g: &mut Graph, spec: &ModelSpec, theta: Var) -> Result<Layers> {
    let man = spec.manifest();
    let mut parts = Vec::with_capacity(man.len());
    for seg in &man {
        let s = g.slice(theta, seg.offset, seg.len())?;
        parts.push(if seg.shape.len() == 2 { g.reshape(s, &seg.shape)? } else { s });
    }
    Ok(match spec.family {
        Family::SoftmaxLinear => Layers {
            w1: parts[0],
            b1: parts[1],
            w2: None,
        },
        Family::Mlp1Hidden => Layers {
            w1: parts[0],
            b1: parts[1],
            w2: Some((parts[2], parts[3])),
        },
        Family::GaussianLocation => unreachable!("no layers for the location model"),
    })
}

/// Logits `[N, C]`, plus the hidden activations for the MLP.
fn logits_expr(g: &mut Graph, spec: &ModelSpec, x: Var, theta: Var) -> Result<(Var, Option<(Var, Var)>)> {
    let layers = split_params(g, spec, theta)?;
    let a = g.matmul(x, layers.w1)?;
    let a = g.add(a, layers.b1)?;
    match layers.w2 {
        None => Ok((a, None)),
        Some((w2, b2)) => {
            let h = g.tanh(a);
            let z = g.matmul(h, w2)?;
            let z = g.add(z, b2)?;
            Ok((z, Some((h, w2))))
        }
    }
}

/// Softmax class probabilities `[N, C]` of a classifier.
pub fn class_probabilities(spec: &ModelSpec, features: &Tensor, theta: &[f64]) -> Result<Tensor> {
    if !spec.family.is_classifier() {
        return Err(Error::UnsupportedModel(format!(
            "{} has no class probabilities",
            spec.family.name()
        )));
    }
    check_theta(spec, theta)?;
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let t = g.constant(Tensor::vector(theta.to_vec()));
    let (z, _) = logits_expr(&mut g, spec, x, t)?;
    let ls = g.log_softmax(z)?;
    Ok(g.value(ls).map(f64::exp))
}

/// Per-datum log-potentials `f(x_n, θ)` as an `[N]` node.
pub fn log_potential_terms(
    g: &mut Graph,
    spec: &ModelSpec,
    x: Var,
    labels: Option<&[usize]>,
    theta: Var,
) -> Result<Var> {
    match spec.family {
        Family::GaussianLocation => {
            let prec = spec.likelihood_precision()?;
            let r = g.sub(x, theta)?;
            let pr = prec.apply_expr(g, r)?;
            let q = g.mul(r, pr)?;
            let s = g.sum_last(q)?;
            Ok(g.scale(s, -0.5))
        }
        Family::SoftmaxLinear | Family::Mlp1Hidden => {
            let labels = labels_of(spec, labels)?;
            let (z, _) = logits_expr(g, spec, x, theta)?;
            let ls = g.log_softmax(z)?;
            g.select_last(ls, labels)
        }
    }
}

/// `Σ_n f(x_n, θ)` as a scalar node.
pub fn log_potential_expr(
    g: &mut Graph,
    spec: &ModelSpec,
    x: Var,
    labels: Option<&[usize]>,
    theta: Var,
) -> Result<Var> {
    let t = log_potential_terms(g, spec, x, labels, theta)?;
    Ok(g.sum(t))
}

/// `∇_θ Σ_n f(x_n, θ)` as a `[D]` node, written with ordinary graph ops so it
/// stays differentiable with respect to `x`.
pub fn score_expr(
    g: &mut Graph,
    spec: &ModelSpec,
    x: Var,
    labels: Option<&[usize]>,
    theta: Var,
) -> Result<Var> {
    match spec.family {
        Family::GaussianLocation => {
            let prec = spec.likelihood_precision()?;
            let r = g.sub(x, theta)?;
            let pr = prec.apply_expr(g, r)?;
            g.sum_first(pr)
        }
        Family::SoftmaxLinear | Family::Mlp1Hidden => {
            let labels = labels_of(spec, labels)?;
            let (z, hidden) = logits_expr(g, spec, x, theta)?;
            let ls = g.log_softmax(z)?;
            let p = g.exp(ls);
            let oh = g.constant(one_hot(labels, spec.num_classes));
            let delta = g.sub(oh, p)?;
            match hidden {
                None => {
                    let xt = g.transpose(x)?;
                    let gw = g.matmul(xt, delta)?;
                    let gb = g.sum_first(delta)?;
                    Ok(g.concat(&[gw, gb]))
                }
                Some((h, w2)) => {
                    let ht = g.transpose(h)?;
                    let gw2 = g.matmul(ht, delta)?;
                    let gb2 = g.sum_first(delta)?;
                    let w2t = g.transpose(w2)?;
                    let dh = g.matmul(delta, w2t)?;
                    let hh = g.mul(h, h)?;
                    let nh = g.neg(hh);
                    let slope = g.offset(nh, 1.0);
                    let da = g.mul(dh, slope)?;
                    let xt = g.transpose(x)?;
                    let gw1 = g.matmul(xt, da)?;
                    let gb1 = g.sum_first(da)?;
                    Ok(g.concat(&[gw1, gb1, gw2, gb2]))
                }
            }
        }
    }
}

/// `∇_θ log π₀(θ)` as a `[D]` node.
pub fn prior_score_expr(g: &mut Graph, spec: &ModelSpec, theta: Var) -> Result<Var> {
    match &spec.prior {
        Prior::Gaussian { mean, cov } => {
            let prec = cov.precision(mean.len())?;
            let m = g.constant(Tensor::vector(mean.clone()));
            let r = g.sub(m, theta)?;
            prec.apply_expr(g, r)
        }
        Prior::WeightDecay { lambda } => Ok(g.scale(theta, -2.0 * lambda)),
    }
}

/// Negative log prior up to a constant.
pub fn prior_penalty(spec: &ModelSpec, theta: &[f64]) -> Result<f64> {
    Ok(match &spec.prior {
        Prior::Gaussian { mean, cov } => {
            let r: Vec<f64> = theta.iter().zip(mean).map(|(t, m)| t - m).collect();
            let pr = cov.precision(mean.len())?.apply(&r);
            0.5 * r.iter().zip(&pr).map(|(a, b)| a * b).sum::<f64>()
        }
        Prior::WeightDecay { lambda } => lambda * theta.iter().map(|t| t * t).sum::<f64>(),
    })
}

fn prior_penalty_grad(spec: &ModelSpec, theta: &[f64]) -> Result<Vec<f64>> {
    Ok(match &spec.prior {
        Prior::Gaussian { mean, cov } => {
            let r: Vec<f64> = theta.iter().zip(mean).map(|(t, m)| t - m).collect();
            cov.precision(mean.len())?.apply(&r)
        }
        Prior::WeightDecay { lambda } => theta.iter().map(|t| 2.0 * lambda * t).collect(),
    })
}

fn check_theta(spec: &ModelSpec, theta: &[f64]) -> Result<()> {
    if theta.len() != spec.param_dim() {
        return Err(Error::shape(
            "params",
            format!("{} values for a {}-parameter model", theta.len(), spec.param_dim()),
        ));
    }
    Ok(())
}

fn finite_terms(g: &Graph, terms: Var) -> Result<()> {
    match g.value(terms).first_non_finite_row() {
        Some(i) => Err(Error::non_finite(format!("log-potential of datum {i}"))),
        None => Ok(()),
    }
}

/// `Σ_n f(x_n, θ)`.
pub fn log_potential(spec: &ModelSpec, data: &Dataset, theta: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("log-potential of an empty dataset".into()));
    }
    data.check(spec)?;
    check_theta(spec, theta)?;
    let mut g = Graph::new();
    let x = g.constant(data.features.clone());
    let t = g.constant(Tensor::vector(theta.to_vec()));
    let terms = log_potential_terms(&mut g, spec, x, data.labels.as_deref(), t)?;
    finite_terms(&g, terms)?;
    let s = g.sum(terms);
    Ok(g.scalar(s))
}

/// Log-potential with its gradients in `θ` and in the features.
pub struct PotentialGrads {
    pub value: f64,
    pub theta: Vec<f64>,
    pub features: Tensor,
}

pub fn log_potential_grads(spec: &ModelSpec, data: &Dataset, theta: &[f64]) -> Result<PotentialGrads> {
    if data.is_empty() {
        return Err(Error::InsufficientData("log-potential of an empty dataset".into()));
    }
    data.check(spec)?;
    check_theta(spec, theta)?;
    let mut g = Graph::new();
    let x = g.leaf(data.features.clone());
    let t = g.leaf(Tensor::vector(theta.to_vec()));
    let terms = log_potential_terms(&mut g, spec, x, data.labels.as_deref(), t)?;
    finite_terms(&g, terms)?;
    let s = g.sum(terms);
    let grads = g.backward(s)?;
    Ok(PotentialGrads {
        value: g.scalar(s),
        theta: grads.wrt(t).into_data(),
        features: grads.wrt(x),
    })
}

/// `∇_θ Σ_n f(x_n, θ)` evaluated numerically.
pub fn score(spec: &ModelSpec, data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
    check_theta(spec, theta)?;
    if data.is_empty() {
        return Ok(vec![0.0; theta.len()]);
    }
    data.check(spec)?;
    let mut g = Graph::new();
    let x = g.constant(data.features.clone());
    let t = g.constant(Tensor::vector(theta.to_vec()));
    let s = score_expr(&mut g, spec, x, data.labels.as_deref(), t)?;
    Ok(g.value(s).data().to_vec())
}

/// `U = −Σ_n f(x_n, θ) + λ‖θ‖²`.
pub fn potential_energy(spec: &ModelSpec, data: &Dataset, theta: &[f64], lambda: f64) -> Result<f64> {
    let decay = lambda * theta.iter().map(|t| t * t).sum::<f64>();
    Ok(-log_potential(spec, data, theta)? + decay)
}

/// Value and `θ`-gradient of [`potential_energy`].
pub fn potential_energy_grad(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let pg = log_potential_grads(spec, data, theta)?;
    let decay = lambda * theta.iter().map(|t| t * t).sum::<f64>();
    let grad = pg
        .theta
        .iter()
        .zip(theta)
        .map(|(g, t)| -g + 2.0 * lambda * t)
        .collect();
    Ok((-pg.value + decay, grad))
}

/// Training objective `−scale · Σ_n f(x_n, θ) + penalty(θ)`, where the
/// penalty is the negative log prior. `scale` rescales a minibatch to the
/// full dataset. Returns value and gradient.
pub fn training_loss_grad(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &[f64],
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    check_theta(spec, theta)?;
    let mut value = prior_penalty(spec, theta)?;
    let mut grad = prior_penalty_grad(spec, theta)?;
    if !data.is_empty() {
        data.check(spec)?;
        let mut g = Graph::new();
        let x = g.constant(data.features.clone());
        let t = g.constant(Tensor::vector(theta.to_vec()));
        let terms = log_potential_terms(&mut g, spec, x, data.labels.as_deref(), t)?;
        finite_terms(&g, terms)?;
        let lp = g.sum(terms);
        let s = score_expr(&mut g, spec, x, data.labels.as_deref(), t)?;
        value -= scale * g.scalar(lp);
        for (gr, sc) in grad.iter_mut().zip(g.value(s).data()) {
            *gr -= scale * sc;
        }
    }
    Ok((value, grad))
}

pub fn training_loss(spec: &ModelSpec, data: &Dataset, theta: &[f64]) -> Result<f64> {
    let lp = if data.is_empty() { 0.0 } else { log_potential(spec, data, theta)? };
    Ok(prior_penalty(spec, theta)? - lp)
}

/// Exact posterior of the location model:
/// `Σ_u = (Σ₀⁻¹ + MΣ⁻¹)⁻¹`, `θ_u = Σ_u(Σ₀⁻¹θ₀ + Σ⁻¹ Σ_m x_m)`.
pub fn exact_conjugate_posterior(spec: &ModelSpec, data: &Dataset) -> Result<GaussianApprox> {
    if spec.family != Family::GaussianLocation {
        return Err(Error::UnsupportedModel(format!(
            "no conjugate posterior for {}",
            spec.family.name()
        )));
    }
    let (prior_mean, prior_cov) = match &spec.prior {
        Prior::Gaussian { mean, cov } => (mean, cov),
        Prior::WeightDecay { .. } => {
            return Err(Error::UnsupportedModel(
                "conjugate posterior needs a Gaussian prior".into(),
            ))
        }
    };
    let d = spec.input_dim;
    if data.is_empty() {
        return GaussianApprox::new(prior_mean.clone(), prior_cov.clone());
    }
    data.check(spec)?;
    let lik = spec.likelihood_cov.as_ref().expect("validated spec");
    let m = data.len() as f64;
    let mut sum = vec![0.0; d];
    for i in 0..data.len() {
        for (s, v) in sum.iter_mut().zip(data.features.row(i)) {
            *s += v;
        }
    }

    if let (Some(p0), Some(s)) = (prior_cov.diag_values(d), lik.diag_values(d)) {
        let var: Vec<f64> = (0..d).map(|i| 1.0 / (1.0 / p0[i] + m / s[i])).collect();
        let mean = (0..d)
            .map(|i| var[i] * (prior_mean[i] / p0[i] + sum[i] / s[i]))
            .collect();
        let cov = match (prior_cov, lik) {
            (Covariance::Isotropic { .. }, Covariance::Isotropic { .. }) => Covariance::isotropic(var[0]),
            _ => Covariance::diagonal(var),
        };
        return GaussianApprox::new(mean, cov);
    }

    let p0 = prior_cov.precision(d)?.dense(d);
    let p = lik.precision(d)?.dense(d);
    let post_prec = &p0 + &p * m;
    let chol = post_prec
        .cholesky()
        .ok_or_else(|| Error::Decomposition("posterior precision is not positive definite".into()))?;
    let rhs = &p0 * DVector::from_column_slice(prior_mean) + &p * DVector::from_column_slice(&sum);
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianApprox::new(mean.iter().copied().collect(), Covariance::full(&cov))
}

/// Dense `Σ₀⁻¹` of a Gaussian prior, if there is one.
pub fn prior_precision(spec: &ModelSpec) -> Result<Option<DMatrix<f64>>> {
    match &spec.prior {
        Prior::Gaussian { mean, cov } => Ok(Some(cov.precision(mean.len())?.dense(mean.len()))),
        Prior::WeightDecay { .. } => Ok(None),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Augmentation {
    #[default]
    Identity,
    GaussianJitter {
        sigma: f64,
    },
    FlipSign,
}

/// One random realization of an augmentation over an `[M, d]` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    sign: Option<Tensor>,
    shift: Option<Tensor>,
}

impl Augmentation {
    pub fn draw<R: Rng + ?Sized>(&self, rows: usize, dim: usize, rng: &mut R) -> AugmentDraw {
        match *self {
            Augmentation::Identity => AugmentDraw { sign: None, shift: None },
            Augmentation::GaussianJitter { sigma } => {
                let noise = rng::normal_vec(rng, rows * dim).into_iter().map(|e| sigma * e).collect();
                AugmentDraw {
                    sign: None,
                    shift: Some(Tensor::new(vec![rows, dim], noise).expect("sized above")),
                }
            }
            Augmentation::FlipSign => {
                let mut signs = Vec::with_capacity(rows * dim);
                for _ in 0..rows {
                    let s = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
                    signs.extend(std::iter::repeat_n(s, dim));
                }
                AugmentDraw {
                    sign: Some(Tensor::new(vec![rows, dim], signs).expect("sized above")),
                    shift: None,
                }
            }
        }
    }
}

impl AugmentDraw {
    pub fn is_identity(&self) -> bool {
        self.sign.is_none() && self.shift.is_none()
    }

    /// Applies the draw inside a graph; gradients pass straight through.
    pub fn apply_expr(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut out = x;
        if let Some(s) = &self.sign {
            let c = g.constant(s.clone());
            out = g.mul(out, c)?;
        }
        if let Some(n) = &self.shift {
            let c = g.constant(n.clone());
            out = g.add(out, c)?;
        }
        Ok(out)
    }

    pub fn apply(&self, features: &Tensor) -> Tensor {
        let mut out = features.clone();
        if let Some(s) = &self.sign {
            for (v, s) in out.data_mut().iter_mut().zip(s.data()) {
                *v *= s;
            }
        }
        if let Some(n) = &self.shift {
            for (v, n) in out.data_mut().iter_mut().zip(n.data()) {
                *v += n;
            }
        }
        out
    }
}

pub fn augment<R: Rng + ?Sized>(data: &Dataset, kind: Augmentation, rng: &mut R) -> Dataset {
    let draw = kind.draw(data.len(), data.dim(), rng);
    Dataset {
        features: draw.apply(&data.features),
        labels: data.labels.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_difference, max_rel_err};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_dataset(spec: &ModelSpec, n: usize, seed: u64) -> Dataset {
        let mut r = stream(seed, 0);
        let x = rng::normal_vec(&mut r, n * spec.input_dim);
        let labels = spec
            .family
            .is_classifier()
            .then(|| (0..n).map(|_| r.random_range(0..spec.num_classes)).collect());
        Dataset::new(Tensor::matrix(n, spec.input_dim, x).unwrap(), labels).unwrap()
    }

    fn random_theta(spec: &ModelSpec, seed: u64) -> Vec<f64> {
        rng::normal_vec(&mut stream(seed, 1), spec.param_dim())
            .into_iter()
            .map(|v| 0.5 * v)
            .collect()
    }

    fn families() -> Vec<ModelSpec> {
        let lik = Covariance::Full {
            rows: vec![
                vec![1.0, 0.3, 0.0],
                vec![0.3, 2.0, 0.1],
                vec![0.0, 0.1, 0.5],
            ],
        };
        vec![
            ModelSpec::gaussian_location(3, vec![0.0; 3], Covariance::isotropic(2.0), lik).unwrap(),
            ModelSpec::gaussian_location(
                3,
                vec![0.5; 3],
                Covariance::diagonal(vec![1.0, 2.0, 3.0]),
                Covariance::diagonal(vec![0.5, 1.0, 1.5]),
            )
            .unwrap(),
            ModelSpec::softmax_linear(3, 4, 0.01).unwrap(),
            ModelSpec::mlp(3, 5, 3, 0.01).unwrap(),
        ]
    }

    /// Direct loop-based forward pass, independent of the graph.
    fn naive_mlp(spec: &ModelSpec, data: &Dataset, theta: &[f64]) -> f64 {
        let p = ParamVector::new(spec, theta.to_vec()).unwrap();
        let (d, h, c) = (spec.input_dim, spec.hidden, spec.num_classes);
        let w1 = p.segment("hidden.weight").unwrap();
        let b1 = p.segment("hidden.bias").unwrap();
        let w2 = p.segment("output.weight").unwrap();
        let b2 = p.segment("output.bias").unwrap();
        let mut total = 0.0;
        for n in 0..data.len() {
            let x = data.features.row(n);
            let hid: Vec<f64> = (0..h)
                .map(|j| (b1[j] + (0..d).map(|i| x[i] * w1[i * h + j]).sum::<f64>()).tanh())
                .collect();
            let z: Vec<f64> = (0..c)
                .map(|k| b2[k] + (0..h).map(|j| hid[j] * w2[j * c + k]).sum::<f64>())
                .collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += z[data.labels.as_ref().unwrap()[n]] - lse;
        }
        total
    }

    #[test]
    fn trivial_log_potentials() {
        let spec = ModelSpec::gaussian_location(2, vec![0.0; 2], Covariance::isotropic(1.0), Covariance::isotropic(1.0)).unwrap();
        let theta = vec![0.7, -1.3];
        let data = Dataset::from_rows(std::slice::from_ref(&theta), None).unwrap();
        assert_eq!(log_potential(&spec, &data, &theta).unwrap(), 0.0);
        assert_eq!(potential_energy(&spec, &data, &theta, 0.0).unwrap(), 0.0);

        let spec = ModelSpec::softmax_linear(3, 2, 0.0).unwrap();
        let data = random_dataset(&spec, 4, 1);
        let lp = log_potential(&spec, &data, &vec![0.0; spec.param_dim()]).unwrap();
        assert!((lp - 4.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pure_decay_energy() {
        // A single datum sitting at θ makes the data term vanish.
        let spec = ModelSpec::gaussian_location(3, vec![0.0; 3], Covariance::isotropic(1.0), Covariance::isotropic(1.0)).unwrap();
        let theta = vec![1.0, 0.0, 0.0];
        let data = Dataset::from_rows(std::slice::from_ref(&theta), None).unwrap();
        assert_eq!(potential_energy(&spec, &data, &theta, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn mlp_matches_naive_forward() {
        let spec = ModelSpec::mlp(4, 6, 3, 0.0).unwrap();
        for seed in 0..5 {
            let data = random_dataset(&spec, 7, seed);
            let theta = random_theta(&spec, seed);
            let a = log_potential(&spec, &data, &theta).unwrap();
            let b = naive_mlp(&spec, &data, &theta);
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn score_expression_matches_backward() {
        for spec in families() {
            let data = random_dataset(&spec, 6, 3);
            let theta = random_theta(&spec, 4);
            let via_graph = log_potential_grads(&spec, &data, &theta).unwrap().theta;
            let closed = score(&spec, &data, &theta).unwrap();
            assert!(max_rel_err(&via_graph, &closed, 1e-10) < 1e-10, "{:?}", spec.family);
        }
    }

    #[test]
    fn prior_score_matches_penalty_gradient() {
        for spec in families() {
            let theta = random_theta(&spec, 9);
            let mut g = Graph::new();
            let t = g.constant(Tensor::vector(theta.clone()));
            let s = prior_score_expr(&mut g, &spec, t).unwrap();
            let fd = finite_difference(|p| -prior_penalty(&spec, p).unwrap(), &theta, 1e-6);
            assert!(max_rel_err(g.value(s).data(), &fd, 1e-6) < 1e-6);
        }
    }

    #[test]
    fn potential_energy_gradient_matches_finite_differences() {
        for spec in families() {
            let data = random_dataset(&spec, 5, 21);
            let theta = random_theta(&spec, 22);
            let (_, grad) = potential_energy_grad(&spec, &data, &theta, 0.3).unwrap();
            let fd = finite_difference(|p| potential_energy(&spec, &data, p, 0.3).unwrap(), &theta, 1e-5);
            assert!(max_rel_err(&grad, &fd, 1e-8) < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn gradients_match_finite_differences(seed in 0u64..10_000) {
            for spec in families() {
                let data = random_dataset(&spec, 4, seed);
                let theta = random_theta(&spec, seed + 1);
                let pg = log_potential_grads(&spec, &data, &theta).unwrap();
                let fd_t = finite_difference(|p| log_potential(&spec, &data, p).unwrap(), &theta, 1e-5);
                prop_assert!(max_rel_err(&pg.theta, &fd_t, 1e-8) < 1e-5);
                let fd_x = finite_difference(
                    |x| {
                        let d = Dataset::new(Tensor::new(data.features.shape().to_vec(), x.to_vec()).unwrap(), data.labels.clone()).unwrap();
                        log_potential(&spec, &d, &theta).unwrap()
                    },
                    data.features.data(),
                    1e-5,
                );
                prop_assert!(max_rel_err(pg.features.data(), &fd_x, 1e-8) < 1e-5);
            }
        }

        #[test]
        fn log_potential_is_additive(seed in 0u64..10_000, split in 1usize..7) {
            for spec in families() {
                let data = random_dataset(&spec, 8, seed);
                let theta = random_theta(&spec, seed);
                let idx: Vec<usize> = (0..8).collect();
                let a = data.subset(&idx[..split]);
                let b = data.subset(&idx[split..]);
                let whole = log_potential(&spec, &a.concat(&b).unwrap(), &theta).unwrap();
                let parts = log_potential(&spec, &a, &theta).unwrap() + log_potential(&spec, &b, &theta).unwrap();
                prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
            }
        }

        #[test]
        fn conjugate_mean_is_the_map(seed in 0u64..10_000) {
            for spec in families().into_iter().take(2) {
                let data = random_dataset(&spec, 5, seed);
                let post = exact_conjugate_posterior(&spec, &data).unwrap();
                let (_, grad) = training_loss_grad(&spec, &data, &post.mean, 1.0).unwrap();
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                prop_assert!(norm < 1e-8, "gradient norm {norm}");
            }
        }
    }

    #[test]
    fn conjugate_examples() {
        let spec = ModelSpec::gaussian_location(1, vec![0.0], Covariance::isotropic(1.0), Covariance::isotropic(1.0)).unwrap();
        let post = exact_conjugate_posterior(&spec, &Dataset::from_rows(&[vec![2.0]], None).unwrap()).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert_eq!(post.cov, Covariance::isotropic(0.5));

        let spec = &families()[0];
        let prior = exact_conjugate_posterior(spec, &Dataset::empty(3)).unwrap();
        assert_eq!(prior.mean, vec![0.0; 3]);
        assert_eq!(prior.cov, Covariance::isotropic(2.0));

        let clf = ModelSpec::softmax_linear(2, 2, 0.1).unwrap();
        assert!(matches!(
            exact_conjugate_posterior(&clf, &Dataset::empty(2)),
            Err(Error::UnsupportedModel(_))
        ));
    }

    /// Quadrature along every coordinate slice through the returned mean:
    /// the slice density must peak at the mean coordinate and have the
    /// conditional variance implied by the posterior precision.
    #[test]
    fn conjugate_posterior_matches_slice_quadrature() {
        let d = 10;
        let mut r = stream(77, 0);
        let a = DMatrix::from_fn(d, d, |_, _| rng::normal(&mut r));
        let lik = &a * a.transpose() / d as f64 + DMatrix::identity(d, d);
        let prior_mean = rng::normal_vec(&mut r, d);
        let spec = ModelSpec::gaussian_location(
            d,
            prior_mean,
            Covariance::diagonal((0..d).map(|i| 1.0 + 0.2 * i as f64).collect()),
            Covariance::full(&lik),
        )
        .unwrap();
        let data = random_dataset(&spec, 5, 78);
        let post = exact_conjugate_posterior(&spec, &data).unwrap();
        let post_prec = post.cov.to_dense(d).try_inverse().unwrap();
        let log_post = |t: &[f64]| log_potential(&spec, &data, t).unwrap() - prior_penalty(&spec, t).unwrap();
        for k in 0..d {
            let sd = (1.0 / post_prec[(k, k)]).sqrt();
            let (n, half) = (4001, 10.0 * sd);
            let mut theta = post.mean.clone();
            let base = log_post(&theta);
            let (mut w_sum, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let off = -half + 2.0 * half * i as f64 / (n - 1) as f64;
                theta[k] = post.mean[k] + off;
                let w = (log_post(&theta) - base).exp();
                w_sum += w;
                m1 += w * off;
                m2 += w * off * off;
            }
            let mean_off = m1 / w_sum;
            let var = m2 / w_sum - mean_off * mean_off;
            assert!(mean_off.abs() < 1e-8 * sd.max(1.0), "coord {k}: {mean_off}");
            assert!((var - sd * sd).abs() < 1e-6 * sd * sd, "coord {k}: {var} vs {}", sd * sd);
        }
    }

    #[test]
    fn augment_examples() {
        let spec = ModelSpec::softmax_linear(3, 2, 0.0).unwrap();
        let data = random_dataset(&spec, 5, 2);
        let mut r = stream(1, 0);
        assert_eq!(augment(&data, Augmentation::Identity, &mut r), data);
        assert_eq!(augment(&data, Augmentation::GaussianJitter { sigma: 0.0 }, &mut r), data);
        let flipped = augment(&data, Augmentation::FlipSign, &mut r);
        for i in 0..data.len() {
            let (a, b) = (data.features.row(i), flipped.features.row(i));
            assert!(a == b || a.iter().zip(b).all(|(x, y)| *x == -*y));
        }
    }

    #[test]
    fn jitter_has_the_requested_spread() {
        let data = Dataset::new(Tensor::zeros(&[100_000, 2]), None).unwrap();
        let out = augment(&data, Augmentation::GaussianJitter { sigma: 0.1 }, &mut stream(3, 0));
        for j in 0..2 {
            let col: Vec<f64> = (0..out.len()).map(|i| out.features.row(i)[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
            assert!((sd - 0.1).abs() < 0.002, "coordinate {j}: {sd}");
        }
    }

    #[test]
    fn augmentation_passes_gradients_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let draw = Augmentation::FlipSign.draw(2, 2, &mut stream(5, 0));
        let y = draw.apply_expr(&mut g, x).unwrap();
        let s = g.sum(y);
        let grad = g.backward(s).unwrap().wrt(x);
        assert!(grad.data().iter().all(|v| v.abs() == 1.0));
    }

    #[test]
    fn non_finite_reports_datum_index() {
        let spec = ModelSpec::softmax_linear(2, 2, 0.0).unwrap();
        let data = Dataset::from_rows(&[vec![0.0, 0.0], vec![f64::NAN, 1.0]], Some(vec![0, 1])).unwrap();
        match log_potential(&spec, &data, &[0.0; 6]) {
            Err(Error::NonFinite { context }) => assert!(context.contains("datum 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let spec = ModelSpec::softmax_linear(3, 2, 0.0).unwrap();
        let data = Dataset::from_rows(&[vec![0.0, 0.0]], Some(vec![0])).unwrap();
        assert!(matches!(log_potential(&spec, &data, &[0.0; 8]), Err(Error::Shape { .. })));
        let data = Dataset::from_rows(&[vec![0.0; 3]], Some(vec![2])).unwrap();
        assert!(matches!(log_potential(&spec, &data, &[0.0; 8]), Err(Error::Shape { .. })));
    }

    #[test]
    fn manifest_covers_parameters() {
        for spec in families() {
            let man = spec.manifest();
            let mut off = 0;
            for s in &man {
                assert_eq!(s.offset, off);
                off += s.len();
            }
            assert_eq!(off, spec.param_dim());
        }
    }
}
