//! Gaussian approximations of parameter posteriors and the divergences
//! between them.
//!
//! Closed forms are used everywhere a divergence is reported; the Monte-Carlo
//! estimators exist to cross-check them.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{self, Dataset, ModelSpec};
use crate::rng;

/// Dense matrices are only supported up to this dimension.
pub const MAX_FULL_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Covariance {
    Isotropic { variance: f64 },
    Diagonal { diag: Vec<f64> },
    Full { rows: Vec<Vec<f64>> },
}

impl Covariance {
    pub fn isotropic(variance: f64) -> Self {
        Covariance::Isotropic { variance }
    }

    /// Isotropic covariance from a standard deviation.
    pub fn from_std(std: f64) -> Self {
        Covariance::Isotropic {
            variance: std * std,
        }
    }

    pub fn diagonal(diag: Vec<f64>) -> Self {
        Covariance::Diagonal { diag }
    }

    pub fn full(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        Covariance::Full { rows }
    }

    fn rank(&self) -> u8 {
        match self {
            Covariance::Isotropic { .. } => 0,
            Covariance::Diagonal { .. } => 1,
            Covariance::Full { .. } => 2,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Covariance::Isotropic { variance } => {
                if !(*variance > 0.0 && variance.is_finite()) {
                    return Err(Error::Decomposition(format!(
                        "isotropic variance must be positive, got {variance}"
                    )));
                }
            }
            Covariance::Diagonal { diag } => {
                if diag.len() != dim {
                    return Err(Error::shape(
                        "covariance",
                        format!("diagonal of length {} for dimension {dim}", diag.len()),
                    ));
                }
                if let Some((i, v)) = diag
                    .iter()
                    .enumerate()
                    .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
                {
                    return Err(Error::Decomposition(format!(
                        "diagonal entry {i} must be positive, got {v}"
                    )));
                }
            }
            Covariance::Full { rows } => {
                if dim > MAX_FULL_DIM {
                    return Err(Error::Config(format!(
                        "full covariance limited to dimension {MAX_FULL_DIM}, got {dim}"
                    )));
                }
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::shape(
                        "covariance",
                        format!("full matrix is not {dim}x{dim}"),
                    ));
                }
                let m = self.to_dense(dim);
                let asym = (&m - m.transpose()).abs().max();
                if asym > 1e-10 * m.abs().max().max(1.0) {
                    return Err(Error::Decomposition(format!(
                        "covariance is not symmetric (max asymmetry {asym:e})"
                    )));
                }
                if m.cholesky().is_none() {
                    return Err(Error::Decomposition(
                        "covariance is not positive definite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Covariance::Isotropic { variance } => DMatrix::identity(dim, dim) * *variance,
            Covariance::Diagonal { diag } => DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            Covariance::Full { rows } => DMatrix::from_fn(dim, dim, |i, j| rows[i][j]),
        }
    }

    /// Per-coordinate variances when the covariance is diagonal.
    pub fn diag_values(&self, dim: usize) -> Option<Vec<f64>> {
        match self {
            Covariance::Isotropic { variance } => Some(vec![*variance; dim]),
            Covariance::Diagonal { diag } => Some(diag.clone()),
            Covariance::Full { .. } => None,
        }
    }

    /// Per-coordinate standard deviations when the covariance is diagonal.
    pub fn std_values(&self, dim: usize) -> Option<Vec<f64>> {
        self.diag_values(dim)
            .map(|d| d.into_iter().map(f64::sqrt).collect())
    }

    pub fn trace(&self, dim: usize) -> f64 {
        match self {
            Covariance::Isotropic { variance } => variance * dim as f64,
            Covariance::Diagonal { diag } => diag.iter().sum(),
            Covariance::Full { rows } => (0..dim).map(|i| rows[i][i]).sum(),
        }
    }

    pub fn precision(&self, dim: usize) -> Result<Precision> {
        self.validate(dim)?;
        Ok(match self {
            Covariance::Isotropic { variance } => Precision::Scalar(1.0 / variance),
            Covariance::Diagonal { diag } => Precision::Diag(diag.iter().map(|v| 1.0 / v).collect()),
            Covariance::Full { .. } => {
                let inv = self
                    .to_dense(dim)
                    .cholesky()
                    .ok_or_else(|| Error::Decomposition("covariance is not positive definite".into()))?
                    .inverse();
                Precision::Full(inv)
            }
        })
    }
}

/// A square-root factor `A` with `A Aᵀ = Σ`, for turning standard normal
/// draws into perturbations. Zero variances are allowed here.
#[derive(Clone, Debug)]
pub enum SqrtFactor {
    Diag(Vec<f64>),
    Lower(DMatrix<f64>),
}

impl SqrtFactor {
    pub fn apply(&self, eps: &[f64]) -> Vec<f64> {
        match self {
            SqrtFactor::Diag(s) => eps.iter().zip(s).map(|(e, s)| e * s).collect(),
            SqrtFactor::Lower(l) => (l * DVector::from_column_slice(eps)).iter().copied().collect(),
        }
    }
}

impl Covariance {
    pub fn sqrt_factor(&self, dim: usize) -> Result<SqrtFactor> {
        match self {
            Covariance::Isotropic { variance } if *variance >= 0.0 && variance.is_finite() => {
                Ok(SqrtFactor::Diag(vec![variance.sqrt(); dim]))
            }
            Covariance::Diagonal { diag } if diag.len() == dim && diag.iter().all(|v| *v >= 0.0 && v.is_finite()) => {
                Ok(SqrtFactor::Diag(diag.iter().map(|v| v.sqrt()).collect()))
            }
            Covariance::Full { .. } => {
                self.validate(dim)?;
                let l = self
                    .to_dense(dim)
                    .cholesky()
                    .ok_or_else(|| Error::Decomposition("covariance is not positive definite".into()))?
                    .l();
                Ok(SqrtFactor::Lower(l))
            }
            _ => Err(Error::Decomposition(format!("invalid perturbation covariance {self:?}"))),
        }
    }
}

/// Inverse covariance, in whichever storage the covariance used.
#[derive(Clone, Debug)]
pub enum Precision {
    Scalar(f64),
    Diag(Vec<f64>),
    Full(DMatrix<f64>),
}

impl Precision {
    /// `v ↦ P v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Precision::Scalar(p) => v.iter().map(|x| p * x).collect(),
            Precision::Diag(d) => v.iter().zip(d).map(|(x, p)| p * x).collect(),
            Precision::Full(m) => (m * DVector::from_column_slice(v)).iter().copied().collect(),
        }
    }

    /// Row-wise `r ↦ r P` on a `[n, d]` or `[d]` node (P is symmetric).
    pub fn apply_expr(&self, g: &mut Graph, r: Var) -> Result<Var> {
        match self {
            Precision::Scalar(p) => Ok(g.scale(r, *p)),
            Precision::Diag(d) => {
                let pv = g.constant(Tensor::vector(d.clone()));
                g.mul(r, pv)
            }
            Precision::Full(m) => {
                let d = m.nrows();
                let data = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
                let pm = g.constant(Tensor::matrix(d, d, data)?);
                if g.shape(r).len() == 1 {
                    let row = g.reshape(r, &[1, d])?;
                    let out = g.matmul(row, pm)?;
                    g.reshape(out, &[d])
                } else {
                    g.matmul(r, pm)
                }
            }
        }
    }

    pub fn dense(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Precision::Scalar(p) => DMatrix::identity(dim, dim) * *p,
            Precision::Diag(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            Precision::Full(m) => m.clone(),
        }
    }
}

/// `N(mean, cov)` over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianApprox {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl GaussianApprox {
    pub fn new(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        cov.validate(mean.len())?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn prepared(&self) -> Result<PreparedGaussian> {
        PreparedGaussian::new(self)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let p = self.prepared()?;
        let mut out = vec![0.0; self.dim()];
        p.sample_into(rng, &mut out);
        Ok(out)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.prepared()?.log_density(x))
    }
}

/// Gaussian with its Cholesky factor precomputed, for sampling and density
/// evaluation in tight loops.
pub struct PreparedGaussian {
    mean: Vec<f64>,
    // Row-major lower-triangular factor, or per-coordinate std for diagonal kinds.
    factor: Factor,
    log_norm: f64,
}

enum Factor {
    Diag(Vec<f64>),
    Lower(Vec<f64>),
}

impl PreparedGaussian {
    fn new(g: &GaussianApprox) -> Result<Self> {
        let d = g.dim();
        g.cov.validate(d)?;
        let (factor, log_det) = match g.cov.std_values(d) {
            Some(std) => {
                let ld: f64 = std.iter().map(|s| 2.0 * s.ln()).sum();
                (Factor::Diag(std), ld)
            }
            None => {
                let chol = g
                    .cov
                    .to_dense(d)
                    .cholesky()
                    .ok_or_else(|| Error::Decomposition("covariance is not positive definite".into()))?;
                let l = chol.l();
                let ld: f64 = (0..d).map(|i| 2.0 * l[(i, i)].ln()).sum();
                let flat = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
                (Factor::Lower(flat), ld)
            }
        };
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            mean: g.mean.clone(),
            factor,
            log_norm,
        })
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.mean.len();
        let eps = rng::normal_vec(rng, d);
        match &self.factor {
            Factor::Diag(s) => {
                for i in 0..d {
                    out[i] = self.mean[i] + s[i] * eps[i];
                }
            }
            Factor::Lower(l) => {
                for i in 0..d {
                    let row = &l[i * d..i * d + i + 1];
                    out[i] = self.mean[i] + row.iter().zip(&eps).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let maha = match &self.factor {
            Factor::Diag(s) => (0..d).map(|i| ((x[i] - self.mean[i]) / s[i]).powi(2)).sum::<f64>(),
            Factor::Lower(l) => {
                // Forward-substitute L z = x - mean.
                let mut z = vec![0.0; d];
                for i in 0..d {
                    let mut acc = x[i] - self.mean[i];
                    for j in 0..i {
                        acc -= l[i * d + j] * z[j];
                    }
                    z[i] = acc / l[i * d + i];
                }
                z.iter().map(|v| v * v).sum()
            }
        };
        self.log_norm - 0.5 * maha
    }
}

fn check_dims(p: &GaussianApprox, q: &GaussianApprox) -> Result<usize> {
    if p.dim() != q.dim() {
        return Err(Error::shape(
            "gaussian",
            format!("dimensions {} and {}", p.dim(), q.dim()),
        ));
    }
    p.cov.validate(p.dim())?;
    q.cov.validate(q.dim())?;
    Ok(p.dim())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `KL[p ‖ q]` in closed form.
pub fn gaussian_kl(p: &GaussianApprox, q: &GaussianApprox) -> Result<f64> {
    let d = check_dims(p, q)?;
    if p.cov.rank().max(q.cov.rank()) < 2 {
        let pv = p.cov.diag_values(d).expect("diagonal kind");
        let qv = q.cov.diag_values(d).expect("diagonal kind");
        let mut acc = 0.0;
        for i in 0..d {
            let dm = q.mean[i] - p.mean[i];
            acc += pv[i] / qv[i] + dm * dm / qv[i] - 1.0 + (qv[i] / pv[i]).ln();
        }
        return Ok(0.5 * acc);
    }
    let sp = p.cov.to_dense(d);
    let sq = q.cov.to_dense(d);
    let cp = sp
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Decomposition("p covariance is not positive definite".into()))?;
    let cq = sq
        .cholesky()
        .ok_or_else(|| Error::Decomposition("q covariance is not positive definite".into()))?;
    let tr = cq.solve(&sp).trace();
    let dm = DVector::from_column_slice(&q.mean) - DVector::from_column_slice(&p.mean);
    let maha = dm.dot(&cq.solve(&dm));
    let ld = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        let l = c.l_dirty();
        (0..d).map(|i| 2.0 * l[(i, i)].ln()).sum::<f64>()
    };
    Ok(0.5 * (tr + maha - d as f64 + ld(&cq) - ld(&cp)))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance
/// `‖μ_p − μ_q‖² + Tr(Σ_p + Σ_q − 2(Σ_p^{1/2} Σ_q Σ_p^{1/2})^{1/2})`.
pub fn gaussian_w2_squared(p: &GaussianApprox, q: &GaussianApprox) -> Result<f64> {
    let d = check_dims(p, q)?;
    let mean_term = sq_dist(&p.mean, &q.mean);
    if p.cov == q.cov {
        return Ok(mean_term);
    }
    if p.cov.rank().max(q.cov.rank()) < 2 {
        let ps = p.cov.std_values(d).expect("diagonal kind");
        let qs = q.cov.std_values(d).expect("diagonal kind");
        return Ok(mean_term + sq_dist(&ps, &qs));
    }
    let sp = p.cov.to_dense(d);
    let sq = q.cov.to_dense(d);
    let root_p = sym_sqrt(&sp);
    let inner = &root_p * &sq * &root_p;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let trace_term = (sp.trace() + sq.trace() - 2.0 * cross).max(0.0);
    Ok(mean_term + trace_term)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

fn summarize(sum: f64, sum_sq: f64, n: usize) -> McEstimate {
    let mean = sum / n as f64;
    let std_err = if n < 2 {
        f64::INFINITY
    } else {
        let var = (sum_sq - n as f64 * mean * mean) / (n as f64 - 1.0);
        (var.max(0.0) / n as f64).sqrt()
    };
    McEstimate {
        mean,
        std_err,
        samples: n,
    }
}

/// Monte-Carlo `KL[p ‖ q] ≈ (1/S) Σ [log p(θ_s) − log q(θ_s)]`, `θ_s ~ p`.
///
/// `sample_p` returns a draw together with its log density under `p`.
pub fn mc_kl_estimate<R: Rng + ?Sized>(
    mut sample_p: impl FnMut(&mut R) -> (Vec<f64>, f64),
    log_q: impl Fn(&[f64]) -> f64,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::Config("Monte-Carlo estimate needs S >= 1".into()));
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let (x, lp) = sample_p(rng);
        let v = lp - log_q(&x);
        sum += v;
        sum_sq += v * v;
    }
    Ok(summarize(sum, sum_sq, samples))
}

pub fn mc_kl_gaussian<R: Rng + ?Sized>(
    p: &GaussianApprox,
    q: &GaussianApprox,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_dims(p, q)?;
    let pp = p.prepared()?;
    let qq = q.prepared()?;
    let mut buf = vec![0.0; p.dim()];
    mc_kl_estimate(
        |r: &mut R| {
            pp.sample_into(r, &mut buf);
            let lp = pp.log_density(&buf);
            (buf.clone(), lp)
        },
        |x| qq.log_density(x),
        samples,
        rng,
    )
}

/// Monte-Carlo `E‖θ − T(θ)‖²` under the optimal linear coupling
/// `T(θ) = μ_q + A(θ − μ_p)`, `A = Σ_p^{-1/2}(Σ_p^{1/2}Σ_qΣ_p^{1/2})^{1/2}Σ_p^{-1/2}`.
pub fn mc_w2_coupling<R: Rng + ?Sized>(
    p: &GaussianApprox,
    q: &GaussianApprox,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let d = check_dims(p, q)?;
    if samples == 0 {
        return Err(Error::Config("Monte-Carlo estimate needs S >= 1".into()));
    }
    let sp = p.cov.to_dense(d);
    let root_p = sym_sqrt(&sp);
    let inv_root_p = root_p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Decomposition("singular covariance".into()))?;
    let middle = sym_sqrt(&(&root_p * q.cov.to_dense(d) * &root_p));
    let a = &inv_root_p * middle * &inv_root_p;
    let pp = p.prepared()?;
    let mut x = vec![0.0; d];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        pp.sample_into(rng, &mut x);
        let mut v = 0.0;
        for i in 0..d {
            let mut t = q.mean[i];
            for j in 0..d {
                t += a[(i, j)] * (x[j] - p.mean[j]);
            }
            v += (x[i] - t).powi(2);
        }
        sum += v;
        sum_sq += v * v;
    }
    Ok(summarize(sum, sum_sq, samples))
}

/// Runs `steps` full-batch gradient-descent steps on the training loss from
/// `init` and centres a Gaussian with the supplied covariance on the
/// endpoint. Returns the approximation and the visited parameters
/// (`steps + 1` entries, starting with `init`).
pub fn fit_sgd_gaussian(
    spec: &ModelSpec,
    data: &Dataset,
    init: &[f64],
    steps: usize,
    lr: f64,
    cov: Covariance,
) -> Result<(GaussianApprox, Vec<Vec<f64>>)> {
    let mut theta = init.to_vec();
    let mut path = Vec::with_capacity(steps + 1);
    path.push(theta.clone());
    for step in 1..=steps {
        let (_, grad) = models::training_loss_grad(spec, data, &theta, 1.0)?;
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= lr * g;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("gradient descent step {step}")));
        }
        path.push(theta.clone());
    }
    Ok((GaussianApprox::new(theta, cov)?, path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DivergenceKind {
    #[serde(rename = "rKL")]
    ReverseKl,
    #[serde(rename = "fKL")]
    ForwardKl,
    W2,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 3] = [
        DivergenceKind::ReverseKl,
        DivergenceKind::ForwardKl,
        DivergenceKind::W2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::ReverseKl => "rKL",
            DivergenceKind::ForwardKl => "fKL",
            DivergenceKind::W2 => "W2",
        }
    }

    /// Divergence of the coreset posterior from the full-data posterior.
    pub fn evaluate(self, coreset: &GaussianApprox, full: &GaussianApprox) -> Result<f64> {
        match self {
            DivergenceKind::ReverseKl => gaussian_kl(coreset, full),
            DivergenceKind::ForwardKl => gaussian_kl(full, coreset),
            DivergenceKind::W2 => gaussian_w2_squared(coreset, full),
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One logged divergence value. W2 is always the squared distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub step: usize,
    pub method: String,
    pub kind: DivergenceKind,
    pub value: f64,
    pub exact: bool,
}

impl DivergenceReport {
    pub const CSV_HEADER: &'static str = "step,method,kind,value,exact";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{}",
            self.step, self.method, self.kind, self.value, self.exact
        )
    }
}

pub fn write_reports_csv<W: Write>(mut w: W, reports: &[DivergenceReport]) -> Result<()> {
    writeln!(w, "{}", DivergenceReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}
