use bpc_core::distill::{self, CoresetSize, DistillConfig, Method, Preset};
use bpc_core::evalmetrics::{metrics, predictive};
use bpc_core::io::{load_dataset, save_dataset};
use bpc_core::models::ModelSpec;
use bpc_core::rng::stream;
use bpc_core::samplers::{asghmc_sample, hmc_sample, HmcConfig, SghmcConfig};
use bpc_core::synthetic::gaussian_blobs;
use bpc_core::trajectories::{train_expert, ExpertConfig, TrajectoryBuffer};

fn experts(spec: &ModelSpec, dir: &std::path::Path, data: &bpc_core::models::Dataset) -> Vec<TrajectoryBuffer> {
    (0..2)
        .map(|i| {
            let cfg = ExpertConfig { epochs: 8, lr: 1e-3, seed: i, batch_size: 50 };
            let buf = train_expert(spec, data, &cfg, "blobs").unwrap();
            let path = dir.join(format!("expert_{i}.bpct"));
            buf.save(&path).unwrap();
            TrajectoryBuffer::load(&path).unwrap()
        })
        .collect()
}

#[test]
fn files_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::softmax_linear(2, 3, 0.01).unwrap();
    let train_path = dir.path().join("train.bpcd");
    save_dataset(&train_path, &gaussian_blobs(300, 3, 2.0, 0.7, 1).unwrap()).unwrap();
    let train = load_dataset(&train_path).unwrap();
    let test = gaussian_blobs(300, 3, 2.0, 0.7, 2).unwrap();

    let buffers = experts(&spec, dir.path(), &train);
    for b in &buffers {
        assert_eq!(b.model_id, spec.model_id());
        assert_eq!(b.len(), 9);
    }

    for method in Method::ALL {
        let init = distill::init_pseudocoreset(&train, CoresetSize::PerClass(2), 3, &mut stream(3, 0)).unwrap();
        let mut cfg = DistillConfig::preset(method, Preset::Ipc1);
        cfg.outer_steps = 5;
        cfg.max_start = 3;
        cfg.expert_steps = 2;
        cfg.inner_steps = 3;
        cfg.samples = cfg.samples.min(3);
        cfg.batch_size = 100;
        let out = distill::distill(&spec, &train, &buffers, init.clone(), &cfg).unwrap();
        assert_eq!(out.coreset.data.len(), 6);
        assert_eq!(out.coreset.data.labels, init.data.labels);
        assert!(out.coreset.data.features.data().iter().all(|v| v.is_finite()));

        let coreset_path = dir.path().join(format!("{}.bpcd", method.name()));
        save_dataset(&coreset_path, &out.coreset.data).unwrap();
        let coreset = load_dataset(&coreset_path).unwrap();
        assert_eq!(coreset, out.coreset.data);

        let mut hmc = HmcConfig::preset(1).unwrap();
        hmc.iterations = 30;
        let chain = hmc_sample(&spec, &coreset, &hmc, &mut stream(4, 0)).unwrap();
        let mut sghmc = SghmcConfig::preset(1).unwrap();
        sghmc.iterations = 30;
        let chain2 = asghmc_sample(&spec, &coreset, &sghmc, &mut stream(4, 1)).unwrap();
        for c in [chain, chain2] {
            let saved = c.to_buffer(spec.model_id(), 4).unwrap();
            let path = dir.path().join("chain.bpct");
            saved.save(&path).unwrap();
            let samples = TrajectoryBuffer::load(&path).unwrap().snapshots;
            let m = metrics(&predictive(&spec, &samples, &test).unwrap(), test.labels.as_ref().unwrap(), 15).unwrap();
            assert!((0.0..=1.0).contains(&m.accuracy));
            assert!(m.nll.is_finite() && m.nll > 0.0);
            assert_eq!(m.count, 300);
        }
    }
}

#[test]
fn distillation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::mlp(2, 4, 3, 0.01).unwrap();
    let train = gaussian_blobs(200, 3, 2.0, 0.7, 5).unwrap();
    let buffers = experts(&spec, dir.path(), &train);
    let run = || {
        let init = distill::init_pseudocoreset(&train, CoresetSize::PerClass(1), 3, &mut stream(6, 0)).unwrap();
        let mut cfg = DistillConfig::preset(Method::Rkl, Preset::Ipc1);
        cfg.outer_steps = 4;
        cfg.inner_steps = 3;
        cfg.samples = 3;
        cfg.batch_size = 50;
        cfg.max_start = 3;
        distill::distill(&spec, &train, &buffers, init, &cfg).unwrap().coreset.data
    };
    assert_eq!(run(), run());
}
