use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bpc_core::distill::{self, CoresetSize, DistillConfig, Method};
use bpc_core::evalmetrics::{self, RunLabel};
use bpc_core::gaussapprox::{self, DivergenceKind, GaussianApprox};
use bpc_core::io::{create, load_dataset, save_dataset, write_csv};
use bpc_core::models::{Augmentation, Dataset, ModelSpec};
use bpc_core::rng::{self, streams};
use bpc_core::samplers::{self, HmcConfig, SghmcConfig};
use bpc_core::synthetic::{self, SizeRow, StepRow, SyntheticConfig, SyntheticProblem};
use bpc_core::trajectories::{self, ExpertConfig, TrajectoryBuffer};
use bpc_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{layer, read_json, write_json, ConfigFile, ModelConfig, Overrides};
use crate::{
    BlobsArgs, Common, DistillArgs, DivergenceArgs, EvalArgs, ExpertsArgs, ModelArgs, SampleArgs, SamplerArg,
    SyntheticArgs,
};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const MODEL_FILE: &str = "model.json";

fn prepare(common: &Common) -> Result<(ConfigFile, u64)> {
    let file = ConfigFile::load(common.config.as_deref())?;
    let seed = common.seed.or(file.seed()?).unwrap_or(0);
    std::fs::create_dir_all(&common.out)?;
    Ok((file, seed))
}

fn resolve_model(args: &ModelArgs, file: &ConfigFile, data: &Dataset) -> Result<ModelSpec> {
    let spec = if let Some(path) = &args.model_file {
        read_json::<ModelSpec>(path)?
    } else {
        let mut flags = Overrides::default();
        flags
            .set("family", args.model)
            .set("hidden", args.hidden)
            .set("weight_decay", args.weight_decay)
            .set("classes", args.classes);
        let cfg: ModelConfig = layer(&ModelConfig::default(), file.section("model")?, flags)?;
        cfg.build(data.dim(), data.labels.as_deref())?
    };
    spec.validate()?;
    data.check(&spec)?;
    Ok(spec)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn blobs(a: &BlobsArgs) -> Result<()> {
    let data = synthetic::gaussian_blobs(a.n, a.classes, a.radius, a.std, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&a.out, &data)?;
    println!("wrote {} points to {}", data.len(), a.out.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertsConfig {
    count: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
}

impl Default for ExpertsConfig {
    fn default() -> Self {
        Self {
            count: 10,
            epochs: 30,
            lr: 1e-4,
            batch_size: 100,
        }
    }
}

pub fn experts_train(a: &ExpertsArgs) -> Result<()> {
    let (file, seed) = prepare(&a.common)?;
    let data = load_dataset(&a.data)?;
    let spec = resolve_model(&a.model, &file, &data)?;
    let mut flags = Overrides::default();
    flags
        .set("count", a.count)
        .set("epochs", a.epochs)
        .set("lr", a.lr)
        .set("batch_size", a.batch_size);
    let cfg: ExpertsConfig = layer(&ExpertsConfig::default(), file.section("experts")?, flags)?;
    if cfg.count == 0 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    write_json(
        &a.common.out.join(RESOLVED_CONFIG),
        &json!({ "command": "experts train", "seed": seed, "data": a.data, "model": spec, "experts": cfg }),
    )?;
    write_json(&a.common.out.join(MODEL_FILE), &spec)?;
    let dataset_id = sha256_file(&a.data)?;
    let buffers = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let ec = ExpertConfig {
                epochs: cfg.epochs,
                lr: cfg.lr,
                seed: rng::child_seed(seed, i as u64),
                batch_size: cfg.batch_size,
            };
            trajectories::train_expert(&spec, &data, &ec, &dataset_id)
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, b) in buffers.iter().enumerate() {
        for (epoch, loss) in b.meta.losses.iter().enumerate() {
            println!("expert {i} epoch {epoch} loss {loss:.6}");
        }
        b.save(&a.common.out.join(format!("expert_{i:03}.bpct")))?;
    }
    Ok(())
}

fn expert_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "bpct"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .bpct files in {}", dir.display())));
    }
    Ok(files)
}

pub fn distill(a: &DistillArgs) -> Result<()> {
    let (file, seed) = prepare(&a.common)?;
    let method = Method::from(a.method);
    let data = load_dataset(&a.data)?;
    let spec = resolve_model(&a.model, &file, &data)?;
    let mut flags = Overrides::default();
    flags
        .set("outer_steps", a.outer_steps)
        .set("inner_steps", a.inner_steps)
        .set("expert_steps", a.expert_steps)
        .set("max_start", a.max_start)
        .set("inner_lr", a.inner_lr)
        .set("outer_lr", a.outer_lr)
        .set("samples", a.samples)
        .set("batch_size", a.batch_size)
        .set("log_interval", a.log_interval)
        .set("seed", Some(seed));
    let cfg: DistillConfig = layer(&DistillConfig::preset(method, a.preset.preset()), file.section("distill")?, flags)?;
    if cfg.method != method {
        return Err(Error::Config(format!(
            "config file method {} disagrees with --method {}",
            cfg.method.name(),
            method.name()
        )));
    }
    cfg.validate()?;
    let size = match (a.size, a.ipc, spec.family.is_classifier()) {
        (Some(m), _, _) => CoresetSize::Total(m),
        (None, Some(k), true) => CoresetSize::PerClass(k),
        (None, None, true) => CoresetSize::PerClass(a.preset.ipc()),
        (None, Some(_), false) => return Err(Error::Config("--ipc needs a classifier; use --size".into())),
        (None, None, false) => CoresetSize::Total(a.preset.ipc()),
    };
    let expert_paths = match (&a.experts, method) {
        (Some(dir), _) => expert_files(dir)?,
        (None, Method::Dc) => Vec::new(),
        (None, _) => return Err(Error::Config(format!("{} needs --experts", method.name()))),
    };
    let (size_kind, size_value) = match size {
        CoresetSize::Total(m) => ("total", m),
        CoresetSize::PerClass(k) => ("per-class", k),
    };
    write_json(
        &a.common.out.join(RESOLVED_CONFIG),
        &json!({
            "command": "distill",
            "seed": seed,
            "data": a.data,
            "experts": expert_paths,
            "preset": format!("{:?}", a.preset).to_lowercase(),
            "coreset_size": { "kind": size_kind, "value": size_value },
            "model": spec,
            "distill": cfg,
        }),
    )?;

    let buffers = expert_paths
        .iter()
        .map(|p| TrajectoryBuffer::load(p))
        .collect::<Result<Vec<_>>>()?;
    let mut pick = rng::stream(rng::child_seed(seed, 1), streams::INIT);
    let init = distill::init_pseudocoreset(&data, size, spec.num_classes, &mut pick)?;
    let out = distill::distill(&spec, &data, &buffers, init, &cfg)?;

    let dir = &a.common.out;
    save_dataset(&dir.join("coreset.bpcd"), &out.coreset.data)?;
    write_csv(BufWriter::new(create(&dir.join("coreset.csv"))?), &out.coreset.data)?;
    write_json(&dir.join(MODEL_FILE), &spec)?;
    gaussapprox::write_reports_csv(BufWriter::new(create(&dir.join("divergences.csv"))?), &out.reports)?;
    let mut obj = BufWriter::new(create(&dir.join("objectives.csv"))?);
    writeln!(obj, "step,objective")?;
    for (i, v) in out.objectives.iter().enumerate() {
        writeln!(obj, "{},{v:e}", i + 1)?;
    }
    obj.flush()?;
    let hashes = expert_paths
        .iter()
        .map(|p| Ok(json!({ "file": file_name(p), "sha256": sha256_file(p)? })))
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "method": method.name(),
            "model_id": spec.model_id(),
            "seed": seed,
            "data": { "file": file_name(&a.data), "sha256": sha256_file(&a.data)? },
            "experts": hashes,
            "coreset_points": out.coreset.len(),
            "resampled_segments": out.resampled_segments,
        }),
    )?;
    if let Some(last) = out.objectives.last() {
        println!("{} outer steps, final objective {last:.6e}", cfg.outer_steps);
    }
    for r in out.reports.iter().filter(|r| r.step == cfg.outer_steps) {
        println!("{} {:.6e}", r.kind, r.value);
    }
    Ok(())
}

#[derive(Serialize)]
struct ChainSummary {
    sampler: &'static str,
    retained: usize,
    accepted: Option<usize>,
    acceptance_rate: Option<f64>,
    rejected_non_finite: usize,
    potentials: Vec<f64>,
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let (file, seed) = prepare(&a.common)?;
    let coreset = load_dataset(&a.coreset)?;
    let spec = resolve_model(&a.model, &file, &coreset)?;
    let mut flags = Overrides::default();
    flags
        .set("iterations", a.iterations)
        .set("leapfrog_steps", a.leapfrog_steps)
        .set("step_size", a.step_size)
        .set("burn_in", a.burn_in)
        .set("init_std", a.init_std)
        .set("momentum_std", a.momentum_std)
        .set("weight_decay", a.decay);
    let ipc = a.preset.ipc();
    let mut r = rng::stream(seed, streams::CHAIN);
    let dir = &a.common.out;
    let (name, chain) = match a.sampler {
        SamplerArg::Hmc => {
            if a.momentum_decay.is_some() || a.noise_scale.is_some() || a.jitter.is_some() {
                return Err(Error::Config("momentum decay, noise and jitter apply to asghmc only".into()));
            }
            let cfg: HmcConfig = layer(&HmcConfig::preset(ipc)?, file.section("hmc")?, flags)?;
            cfg.validate()?;
            write_json(
                &dir.join(RESOLVED_CONFIG),
                &json!({ "command": "sample", "sampler": "hmc", "seed": seed, "coreset": a.coreset, "model": spec, "hmc": cfg }),
            )?;
            ("hmc", samplers::hmc_sample(&spec, &coreset, &cfg, &mut r)?)
        }
        SamplerArg::Asghmc => {
            flags
                .set("momentum_decay", a.momentum_decay)
                .set("noise_scale", a.noise_scale)
                .set("augmentation", a.jitter.map(|sigma| Augmentation::GaussianJitter { sigma }));
            let cfg: SghmcConfig = layer(&SghmcConfig::preset(ipc)?, file.section("sghmc")?, flags)?;
            cfg.validate()?;
            write_json(
                &dir.join(RESOLVED_CONFIG),
                &json!({ "command": "sample", "sampler": "asghmc", "seed": seed, "coreset": a.coreset, "model": spec, "sghmc": cfg }),
            )?;
            ("asghmc", samplers::asghmc_sample(&spec, &coreset, &cfg, &mut r)?)
        }
    };
    chain.to_buffer(spec.model_id(), seed)?.save(&dir.join("chain.bpct"))?;
    write_json(&dir.join(MODEL_FILE), &spec)?;
    let summary = ChainSummary {
        sampler: name,
        retained: chain.samples.len(),
        accepted: chain.accepted,
        acceptance_rate: chain.acceptance_rate(),
        rejected_non_finite: chain.rejected_non_finite,
        potentials: chain.potentials.clone(),
    };
    write_json(&dir.join("chain.json"), &summary)?;
    println!(
        "{name}: {} samples retained, acceptance {}, {} non-finite rejections",
        summary.retained,
        summary.acceptance_rate.map_or("n/a".to_string(), |r| format!("{r:.3}")),
        summary.rejected_non_finite
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (file, seed) = prepare(&a.common)?;
    let test = load_dataset(&a.test)?;
    let spec = resolve_model(&a.model, &file, &test)?;
    let chain = TrajectoryBuffer::load(&a.chain)?;
    if chain.dim != spec.param_dim() {
        return Err(Error::Config(format!(
            "chain has {} parameters, model {} has {}",
            chain.dim,
            spec.model_id(),
            spec.param_dim()
        )));
    }
    let labels = test
        .labels
        .as_deref()
        .ok_or_else(|| Error::Config("test data needs labels".into()))?;
    let pred = evalmetrics::predictive(&spec, &chain.snapshots, &test)?;
    let report = evalmetrics::metrics(&pred, labels, a.bins)?;
    let label = RunLabel {
        method: a.method.clone(),
        ipc: a.ipc,
        sampler: a.sampler.clone(),
        seed,
    };
    let dir = &a.common.out;
    write_json(&dir.join("metrics.json"), &json!({ "run": label, "metrics": report }))?;
    let rows = [(label, report)];
    evalmetrics::write_metrics_csv(BufWriter::new(create(&dir.join("metrics.csv"))?), &rows)?;
    println!("{}", evalmetrics::METRICS_CSV_HEADER);
    println!("{}", evalmetrics::metrics_csv_row(&rows[0].0, &rows[0].1));
    if rows[0].1.nll_clamped {
        log::warn!("some true-class probabilities were zero; NLL used a floored log");
    }
    Ok(())
}

pub fn synthetic(a: &SyntheticArgs) -> Result<()> {
    let (file, seed) = prepare(&a.common)?;
    let mut flags = Overrides::default();
    flags
        .set("outer_steps", a.outer_steps)
        .set("sizes", a.sizes.clone())
        .set(
            "methods",
            a.methods.as_ref().map(|m| m.iter().map(|&x| Method::from(x)).collect::<Vec<_>>()),
        )
        .set("seed", Some(seed));
    let cfg: SyntheticConfig = layer(&SyntheticConfig::default(), file.section("synthetic")?, flags)?;
    cfg.validate()?;
    write_json(
        &a.common.out.join(RESOLVED_CONFIG),
        &json!({ "command": "synthetic", "seed": seed, "synthetic": cfg }),
    )?;
    let problem = SyntheticProblem::generate(&cfg)?;
    let jobs: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.sizes.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, s)| problem.run(&cfg, m, s).map(|o| (m, s, o)))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut steps = Vec::new();
    let mut sizes = Vec::new();
    let mut summary = Vec::new();
    for (m, s, out) in &results {
        steps.extend(out.reports.iter().map(|r| StepRow {
            size: *s,
            report: r.clone(),
        }));
        sizes.extend(synthetic::final_rows(*m, *s, out));
        if let Some(kind) = m.target_kind() {
            let own: Vec<f64> = out.reports.iter().filter(|r| r.kind == kind).map(|r| r.value).collect();
            let (first, last) = (own[0], own[own.len() - 1]);
            summary.push(json!({
                "method": m.name(),
                "size": s,
                "kind": kind.name(),
                "initial": first,
                "final": last,
                "reduction": if first > 0.0 { 1.0 - last / first } else { 0.0 },
            }));
        }
    }
    let mut trends = Vec::new();
    for &m in &cfg.methods {
        for kind in DivergenceKind::ALL {
            let pts: Vec<&SizeRow> = sizes.iter().filter(|r| r.method == m && r.kind == kind).collect();
            if pts.len() >= 2 {
                let x: Vec<f64> = pts.iter().map(|r| r.size as f64).collect();
                let y: Vec<f64> = pts.iter().map(|r| r.value).collect();
                trends.push(json!({ "method": m.name(), "kind": kind.name(), "spearman": synthetic::spearman(&x, &y) }));
            }
        }
    }
    let dir = &a.common.out;
    synthetic::write_steps_csv(BufWriter::new(create(&dir.join("synthetic_steps.csv"))?), &mut steps)?;
    synthetic::write_sizes_csv(BufWriter::new(create(&dir.join("synthetic_sizes.csv"))?), &mut sizes)?;
    write_json(&dir.join("synthetic_summary.json"), &json!({ "runs": summary, "size_trends": trends }))?;
    for s in &summary {
        println!(
            "{} M={} {}: {:.4e} -> {:.4e}",
            s["method"].as_str().unwrap_or_default(),
            s["size"],
            s["kind"].as_str().unwrap_or_default(),
            s["initial"].as_f64().unwrap_or(f64::NAN),
            s["final"].as_f64().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

pub fn divergence(a: &DivergenceArgs) -> Result<()> {
    let p: GaussianApprox = read_json(&a.p)?;
    let q: GaussianApprox = read_json(&a.q)?;
    let p = GaussianApprox::new(p.mean, p.cov)?;
    let q = GaussianApprox::new(q.mean, q.cov)?;
    let mut report = json!({
        "kl_pq": gaussapprox::gaussian_kl(&p, &q)?,
        "kl_qp": gaussapprox::gaussian_kl(&q, &p)?,
        "w2_squared": gaussapprox::gaussian_w2_squared(&p, &q)?,
    });
    if let Some(s) = a.mc {
        let mut r = rng::stream(a.seed, streams::NOISE);
        report["mc"] = json!({
            "kl_pq": gaussapprox::mc_kl_gaussian(&p, &q, s, &mut r)?,
            "kl_qp": gaussapprox::mc_kl_gaussian(&q, &p, s, &mut r)?,
            "w2_squared": gaussapprox::mc_w2_coupling(&p, &q, s, &mut r)?,
        });
    }
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, text + "\n")?;
    }
    Ok(())
}
