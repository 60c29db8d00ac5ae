//! Posterior samplers over the parameters given a (pseudo)coreset.
//!
//! Both samplers target `exp(−U)` with `U(θ) = −Σ_m f(u_m, θ) + λ‖θ‖²`.
//! For the location model `λ = 1/2` reproduces a standard normal prior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, Augmentation, Dataset, ModelSpec};
use crate::rng;
use crate::trajectories::{TrainingMeta, TrajectoryBuffer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcConfig {
    pub iterations: usize,
    pub leapfrog_steps: usize,
    pub step_size: f64,
    pub init_std: f64,
    pub momentum_std: f64,
    pub weight_decay: f64,
    pub burn_in: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SghmcConfig {
    pub iterations: usize,
    pub leapfrog_steps: usize,
    pub step_size: f64,
    pub init_std: f64,
    pub momentum_std: f64,
    pub weight_decay: f64,
    pub burn_in: usize,
    pub momentum_decay: f64,
    pub noise_scale: f64,
    pub augmentation: Augmentation,
}

fn check_common(iterations: usize, steps: usize, eps: f64, burn: usize, decay: f64) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config("leapfrog_steps must be >= 1".into()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config("step_size must be positive".into()));
    }
    if burn >= iterations {
        return Err(Error::Config(format!("burn_in {burn} must be below iterations {iterations}")));
    }
    if !(decay >= 0.0) {
        return Err(Error::Config("weight_decay must be >= 0".into()));
    }
    Ok(())
}

impl HmcConfig {
    /// Evaluation settings by coreset size (1, 10 or 20 per class).
    pub fn preset(ipc: usize) -> Result<Self> {
        let (iterations, leapfrog_steps, burn_in, momentum_std, step_size, weight_decay) = match ipc {
            1 => (20, 20, 10, 0.01, 0.05, 0.5),
            10 | 20 => (100, 5, 50, 0.1, 0.01, 1.5),
            other => return Err(Error::Config(format!("no sampler preset for ipc {other}"))),
        };
        Ok(Self {
            iterations,
            leapfrog_steps,
            step_size,
            init_std: 0.1,
            momentum_std,
            weight_decay,
            burn_in,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_common(self.iterations, self.leapfrog_steps, self.step_size, self.burn_in, self.weight_decay)
    }
}

impl SghmcConfig {
    pub fn preset(ipc: usize) -> Result<Self> {
        let (iterations, leapfrog_steps, burn_in, step_size, weight_decay) = match ipc {
            1 => (20, 5, 10, 0.03, 1.0),
            10 => (100, 5, 50, 0.01, 1.5),
            20 => (100, 5, 50, 0.01, 1.0),
            other => return Err(Error::Config(format!("no sampler preset for ipc {other}"))),
        };
        Ok(Self {
            iterations,
            leapfrog_steps,
            step_size,
            init_std: 0.1,
            momentum_std: 0.1,
            weight_decay,
            burn_in,
            momentum_decay: 0.1,
            noise_scale: 0.01,
            augmentation: Augmentation::Identity,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_common(self.iterations, self.leapfrog_steps, self.step_size, self.burn_in, self.weight_decay)?;
        if !(self.momentum_decay > 0.0 && self.momentum_decay < 1.0) {
            return Err(Error::Config("momentum_decay must lie in (0, 1)".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    /// States after each post-burn-in iteration.
    pub samples: Vec<Vec<f64>>,
    /// Accepted proposals; `None` for samplers without a Metropolis test.
    pub accepted: Option<usize>,
    /// Potential at the state after every iteration.
    pub potentials: Vec<f64>,
    pub rejected_non_finite: usize,
}

impl Chain {
    pub fn acceptance_rate(&self) -> Option<f64> {
        self.accepted.map(|a| a as f64 / self.potentials.len().max(1) as f64)
    }

    pub fn to_buffer(&self, model_id: String, seed: u64) -> Result<TrajectoryBuffer> {
        let dim = self.samples.first().map_or(0, Vec::len);
        let meta = TrainingMeta {
            seed,
            losses: self.potentials.clone(),
            ..TrainingMeta::default()
        };
        TrajectoryBuffer::new(model_id, dim, self.samples.clone(), meta)
    }
}

/// Metropolis test for a move from energy `h_old` to `h_new` given a
/// uniform draw. Non-finite energies are rejected.
pub fn mh_accept(h_old: f64, h_new: f64, uniform: f64) -> bool {
    if !h_new.is_finite() {
        return false;
    }
    uniform < (h_old - h_new).exp().min(1.0)
}

fn kinetic(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

fn energy_grad(spec: &ModelSpec, data: &Dataset, theta: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("sampler state"));
    }
    let (u, g) = models::potential_energy_grad(spec, data, theta, lambda)?;
    if !u.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("potential energy"));
    }
    Ok((u, g))
}

/// `m` leapfrog steps with half-step momentum updates at both ends.
/// Returns the final state and its potential.
pub fn leapfrog(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &[f64],
    momentum: &[f64],
    steps: usize,
    eps: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let mut th = theta.to_vec();
    let mut r = momentum.to_vec();
    let (_, mut grad) = energy_grad(spec, data, &th, lambda)?;
    let mut u = 0.0;
    for i in 0..steps {
        let h = if i == 0 { 0.5 * eps } else { eps };
        for (rv, g) in r.iter_mut().zip(&grad) {
            *rv -= h * g;
        }
        for (t, rv) in th.iter_mut().zip(&r) {
            *t += eps * rv;
        }
        (u, grad) = energy_grad(spec, data, &th, lambda)?;
    }
    for (rv, g) in r.iter_mut().zip(&grad) {
        *rv -= 0.5 * eps * g;
    }
    Ok((th, r, u))
}

fn check_coreset(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InsufficientData("sampling needs a nonempty coreset".into()));
    }
    data.check(spec)
}

fn scaled_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    rng::normal_vec(rng, n).into_iter().map(|v| std * v).collect()
}

/// Full-batch HMC with a Metropolis correction on `H = U + ½‖r‖²`.
pub fn hmc_sample<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, cfg: &HmcConfig, rng: &mut R) -> Result<Chain> {
    cfg.validate()?;
    check_coreset(spec, data)?;
    let d = spec.param_dim();
    let mut theta = scaled_normal(rng, d, cfg.init_std);
    let mut u_cur = models::potential_energy(spec, data, &theta, cfg.weight_decay)?;
    let mut chain = Chain {
        samples: Vec::with_capacity(cfg.iterations - cfg.burn_in),
        accepted: Some(0),
        potentials: Vec::with_capacity(cfg.iterations),
        rejected_non_finite: 0,
    };
    for t in 0..cfg.iterations {
        let r = scaled_normal(rng, d, cfg.momentum_std);
        let h_old = u_cur + kinetic(&r);
        let proposal = leapfrog(spec, data, &theta, &r, cfg.leapfrog_steps, cfg.step_size, cfg.weight_decay);
        let uniform: f64 = rng.random();
        match proposal {
            Ok((th, rn, u_new)) => {
                let h_new = u_new + kinetic(&rn);
                if !h_new.is_finite() {
                    chain.rejected_non_finite += 1;
                    log::debug!("hmc iteration {t}: non-finite Hamiltonian, rejected");
                } else if mh_accept(h_old, h_new, uniform) {
                    theta = th;
                    u_cur = u_new;
                    *chain.accepted.as_mut().expect("hmc counts acceptances") += 1;
                }
            }
            Err(Error::NonFinite { context }) => {
                chain.rejected_non_finite += 1;
                log::debug!("hmc iteration {t}: {context}, rejected");
            }
            Err(e) => return Err(e),
        }
        chain.potentials.push(u_cur);
        if t >= cfg.burn_in {
            chain.samples.push(theta.clone());
        }
    }
    Ok(chain)
}

/// Altered SGHMC: the gradient noise comes from re-augmenting the fixed
/// coreset at every step. Momentum persists across iterations and there is
/// no Metropolis test. A step that produces a non-finite state is undone
/// and the momentum redrawn.
pub fn asghmc_sample<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, cfg: &SghmcConfig, rng: &mut R) -> Result<Chain> {
    cfg.validate()?;
    check_coreset(spec, data)?;
    let d = spec.param_dim();
    let mut theta = scaled_normal(rng, d, cfg.init_std);
    let mut r = scaled_normal(rng, d, cfg.momentum_std);
    let noise_std = (2.0 * cfg.momentum_decay * cfg.noise_scale).sqrt();
    let mut chain = Chain {
        samples: Vec::with_capacity(cfg.iterations - cfg.burn_in),
        accepted: None,
        potentials: Vec::with_capacity(cfg.iterations),
        rejected_non_finite: 0,
    };
    for t in 0..cfg.iterations {
        for _ in 0..cfg.leapfrog_steps {
            let prev = theta.clone();
            for (th, rv) in theta.iter_mut().zip(&r) {
                *th += cfg.step_size * rv;
            }
            let batch = models::augment(data, cfg.augmentation, rng);
            match energy_grad(spec, &batch, &theta, cfg.weight_decay) {
                Ok((_, grad)) => {
                    let noise = scaled_normal(rng, d, noise_std);
                    for ((rv, g), n) in r.iter_mut().zip(&grad).zip(noise) {
                        *rv = (1.0 - cfg.momentum_decay) * *rv - cfg.step_size * g + n;
                    }
                }
                Err(Error::NonFinite { context }) => {
                    chain.rejected_non_finite += 1;
                    log::debug!("a-sghmc iteration {t}: {context}, step undone");
                    theta = prev;
                    r = scaled_normal(rng, d, cfg.momentum_std);
                }
                Err(e) => return Err(e),
            }
        }
        let u = models::potential_energy(spec, data, &theta, cfg.weight_decay).unwrap_or(f64::NAN);
        chain.potentials.push(u);
        if t >= cfg.burn_in {
            chain.samples.push(theta.clone());
        }
    }
    Ok(chain)
}

/// Effective sample size of a scalar series using Geyer's initial positive
/// sequence of autocorrelation pair sums.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let rho = |k: usize| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var);
    let mut tau = -1.0;
    let mut k = 0;
    while k + 1 < n {
        let pair = rho(k) + rho(k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::gaussapprox::Covariance;
    use crate::rng::stream;

    fn conjugate_target() -> (ModelSpec, Dataset) {
        let spec =
            ModelSpec::gaussian_location(1, vec![0.0], Covariance::isotropic(1.0), Covariance::isotropic(1.0)).unwrap();
        (spec, Dataset::from_rows(&[vec![2.0]], None).unwrap())
    }

    fn classifier() -> (ModelSpec, Dataset) {
        let spec = ModelSpec::mlp(2, 4, 3, 0.0).unwrap();
        let mut r = stream(3, 0);
        let x = rng::normal_vec(&mut r, 30 * 2);
        let y = (0..30).map(|i| i % 3).collect();
        (spec, Dataset::new(Tensor::matrix(30, 2, x).unwrap(), Some(y)).unwrap())
    }

    #[test]
    fn presets_match_table_rows() {
        let h = HmcConfig::preset(1).unwrap();
        assert_eq!((h.iterations, h.leapfrog_steps, h.burn_in), (20, 20, 10));
        assert_eq!((h.momentum_std, h.step_size, h.weight_decay), (0.01, 0.05, 0.5));
        let s = SghmcConfig::preset(20).unwrap();
        assert_eq!((s.step_size, s.weight_decay, s.momentum_decay, s.noise_scale), (0.01, 1.0, 0.1, 0.01));
        assert!(HmcConfig::preset(5).is_err());
    }

    #[test]
    fn metropolis_examples() {
        for u in [0.0, 0.5, 0.999_999] {
            assert!(mh_accept(3.0, 3.0, u));
            assert!(mh_accept(3.0, 1.0, u));
        }
        assert!(!mh_accept(0.0, f64::NAN, 0.0));
        assert!(!mh_accept(0.0, f64::INFINITY, 0.0));
        assert!(mh_accept(0.0, 2.0_f64.ln(), 0.49));
        assert!(!mh_accept(0.0, 2.0_f64.ln(), 0.51));
    }

    #[test]
    fn leapfrog_is_reversible_for_every_family() {
        let (g, gd) = conjugate_target();
        let soft = ModelSpec::softmax_linear(2, 3, 0.0).unwrap();
        let (mlp, cd) = classifier();
        for (spec, data) in [(g, gd), (soft, cd.clone()), (mlp, cd)] {
            let mut r = stream(9, 0);
            let th = scaled_normal(&mut r, spec.param_dim(), 0.3);
            let mo = scaled_normal(&mut r, spec.param_dim(), 0.3);
            let (t1, r1, _) = leapfrog(&spec, &data, &th, &mo, 10, 0.01, 0.5).unwrap();
            let back: Vec<f64> = r1.iter().map(|v| -v).collect();
            let (t2, r2, _) = leapfrog(&spec, &data, &t1, &back, 10, 0.01, 0.5).unwrap();
            for (a, b) in t2.iter().zip(&th) {
                assert!((a - b).abs() < 1e-8);
            }
            for (a, b) in r2.iter().zip(&mo) {
                assert!((a + b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn hmc_recovers_conjugate_moments() {
        let (spec, data) = conjugate_target();
        let cfg = HmcConfig {
            iterations: 20_000,
            leapfrog_steps: 5,
            step_size: 0.2,
            init_std: 0.1,
            momentum_std: 1.0,
            weight_decay: 0.5,
            burn_in: 500,
        };
        let chain = hmc_sample(&spec, &data, &cfg, &mut stream(1, streams_chain())).unwrap();
        assert_eq!(chain.samples.len(), cfg.iterations - cfg.burn_in);
        assert!(chain.acceptance_rate().unwrap() > 0.5);
        let xs: Vec<f64> = chain.samples.iter().map(|s| s[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ess = effective_sample_size(&xs);
        assert!((mean - 1.0).abs() < 3.0 * (var / ess).sqrt(), "mean {mean}");
        let sq: Vec<f64> = xs.iter().map(|v| (v - 1.0).powi(2)).collect();
        let m2 = sq.iter().sum::<f64>() / n;
        let sd2 = (sq.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((m2 - 0.5).abs() < 3.0 * sd2 / effective_sample_size(&sq).sqrt(), "second moment {m2}");
    }

    fn streams_chain() -> u64 {
        crate::rng::streams::CHAIN
    }

    #[test]
    fn identical_seeds_give_identical_chains() {
        let (spec, data) = classifier();
        let h = HmcConfig::preset(10).unwrap();
        let a = hmc_sample(&spec, &data, &h, &mut stream(4, 0)).unwrap();
        let b = hmc_sample(&spec, &data, &h, &mut stream(4, 0)).unwrap();
        assert_eq!(a, b);
        let mut s = SghmcConfig::preset(10).unwrap();
        s.augmentation = Augmentation::GaussianJitter { sigma: 0.1 };
        let a = asghmc_sample(&spec, &data, &s, &mut stream(4, 0)).unwrap();
        let b = asghmc_sample(&spec, &data, &s, &mut stream(4, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn asghmc_without_noise_is_deterministic_dynamics() {
        let (spec, data) = conjugate_target();
        let mut cfg = SghmcConfig::preset(10).unwrap();
        cfg.noise_scale = 0.0;
        cfg.momentum_decay = 1e-9;
        let a = asghmc_sample(&spec, &data, &cfg, &mut stream(5, 0)).unwrap();
        // Replay the same dynamics by hand from the same initial draws.
        let mut r = stream(5, 0);
        let mut th = scaled_normal(&mut r, 1, cfg.init_std);
        let mut mo = scaled_normal(&mut r, 1, cfg.momentum_std);
        for _ in 0..cfg.iterations {
            for _ in 0..cfg.leapfrog_steps {
                th[0] += cfg.step_size * mo[0];
                let grad = -(2.0 - th[0]) + 2.0 * cfg.weight_decay * th[0];
                mo[0] = (1.0 - cfg.momentum_decay) * mo[0] - cfg.step_size * grad;
            }
        }
        assert!((a.samples.last().unwrap()[0] - th[0]).abs() < 1e-9);
    }

    #[test]
    fn asghmc_mean_is_near_the_posterior_mean() {
        let d = 3;
        let spec =
            ModelSpec::gaussian_location(d, vec![0.0; d], Covariance::isotropic(1.0), Covariance::isotropic(1.0)).unwrap();
        let x = scaled_normal(&mut stream(6, 0), 4 * d, 1.0).into_iter().map(|v| v + 3.0).collect();
        let data = Dataset::new(Tensor::matrix(4, d, x).unwrap(), None).unwrap();
        let exact = models::exact_conjugate_posterior(&spec, &data).unwrap();
        let cfg = SghmcConfig {
            iterations: 4000,
            leapfrog_steps: 5,
            step_size: 0.05,
            init_std: 0.1,
            momentum_std: 0.1,
            weight_decay: 0.5,
            burn_in: 1000,
            momentum_decay: 0.1,
            noise_scale: 0.01,
            augmentation: Augmentation::Identity,
        };
        let chain = asghmc_sample(&spec, &data, &cfg, &mut stream(7, 0)).unwrap();
        for j in 0..d {
            let m = chain.samples.iter().map(|s| s[j]).sum::<f64>() / chain.samples.len() as f64;
            assert!((m - exact.mean[j]).abs() < 0.1 * exact.mean[j].abs(), "{m} vs {}", exact.mean[j]);
        }
    }

    #[test]
    fn asghmc_stays_finite_at_default_settings() {
        let (spec, data) = classifier();
        let mut cfg = SghmcConfig::preset(10).unwrap();
        cfg.augmentation = Augmentation::GaussianJitter { sigma: 0.05 };
        let chain = asghmc_sample(&spec, &data, &cfg, &mut stream(8, 0)).unwrap();
        assert!(chain.potentials.iter().all(|u| u.is_finite()));
        assert_eq!(chain.samples.len(), 50);
    }

    #[test]
    fn non_finite_proposals_are_rejected() {
        let (spec, data) = conjugate_target();
        let cfg = HmcConfig {
            iterations: 20,
            leapfrog_steps: 50,
            step_size: 1e200,
            init_std: 0.1,
            momentum_std: 1.0,
            weight_decay: 0.5,
            burn_in: 0,
        };
        let chain = hmc_sample(&spec, &data, &cfg, &mut stream(2, 0)).unwrap();
        assert!(chain.rejected_non_finite > 0);
        assert!(chain.samples.iter().all(|s| s[0].is_finite()));
    }

    #[test]
    fn ess_examples() {
        let iid = scaled_normal(&mut stream(1, 0), 5000, 1.0);
        let e = effective_sample_size(&iid);
        assert!(e > 4000.0 && e < 6000.0, "{e}");
        let mut ar = vec![0.0; 5000];
        let noise = scaled_normal(&mut stream(2, 0), 5000, 1.0);
        for i in 1..5000 {
            ar[i] = 0.9 * ar[i - 1] + noise[i];
        }
        // AR(1) with coefficient 0.9 has n(1−0.9)/(1+0.9) effective draws.
        let e = effective_sample_size(&ar);
        assert!(e > 150.0 && e < 400.0, "{e}");
    }

    #[test]
    fn retained_count_contract() {
        let (spec, data) = conjugate_target();
        for (n, burn) in [(1, 0), (5, 4), (30, 7)] {
            let mut h = HmcConfig::preset(10).unwrap();
            h.iterations = n;
            h.burn_in = burn;
            assert_eq!(hmc_sample(&spec, &data, &h, &mut stream(0, 0)).unwrap().samples.len(), n - burn);
        }
        let mut h = HmcConfig::preset(10).unwrap();
        h.burn_in = h.iterations;
        assert!(hmc_sample(&spec, &data, &h, &mut stream(0, 0)).is_err());
    }
}
