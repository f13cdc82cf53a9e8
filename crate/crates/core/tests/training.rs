//! Training loop, evaluation protocol and synthetic-task checks.

use hdmole::config::ExperimentConfig;
use hdmole::experiment::{run_methods, SeedContext};
use hdmole::layer::{ComponentTag, GatingMode};
use hdmole::numeric::Vector;
use hdmole::report::results_json;
use hdmole::routing::GlobalRouter;
use hdmole::synth::{make_task, one_hot_mix, target_mix, Sample, TaskParams};
use hdmole::train::{
    evaluate, prepare_model, pretrain_base, train, EvalConfig, Method, Optimizer, OptimizerConfig,
    ParamRegistry, TrainConfig, TrainData,
};
use hdmole::{Model, ModelConfig, Rng};

const SMALL: &str = r#"{
    "version": 1,
    "seeds": [3],
    "task": {"num_domains": 4, "teacher_hidden": 8},
    "model": {"layers": 2, "model_dim": 8, "ffn_dim": 12, "rank": 2, "alpha": 2.0},
    "train": {"steps": 60, "batch_size": 8},
    "pretrain": {"steps": 200, "batch_size": 16},
    "eval": {"samples_per_domain": 32},
    "methods": ["full_finetune", "plain_lora", "topk_mole", "hdmole",
                "hdmole_no_thresholds", "hdmole_no_local", "hdmole_no_global"]
}"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_json(SMALL).unwrap()
}

fn frozen(tag: ComponentTag) -> bool {
    tag == ComponentTag::Base
}

#[test]
fn frozen_weights_survive_training() {
    let cfg = small();
    let ctx = SeedContext::prepare(&cfg, 3).unwrap();
    let router = cfg.global_router().unwrap();
    let before = ctx.base.checksum(|_| true);
    for method in Method::ALL {
        let adapters = cfg.model_config(GatingMode::Hierarchical, 3);
        let (_, model) = ctx.run_cell(&cfg, method, &adapters, &router, "").unwrap();
        if method == Method::FullFinetune {
            assert_ne!(model.checksum(|_| true), before);
        } else {
            assert_eq!(model.checksum(frozen), before, "{method}");
            assert_ne!(model.checksum(|t| !frozen(t)), 0, "{method}");
        }
    }
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = small();
    let router = cfg.global_router().unwrap();
    let adapters = cfg.model_config(GatingMode::Hierarchical, 3);
    let a = SeedContext::prepare(&cfg, 3).unwrap();
    let b = SeedContext::prepare(&cfg, 3).unwrap();
    let (ra, ma) = a.run_cell(&cfg, Method::Hdmole, &adapters, &router, "").unwrap();
    let (rb, mb) = b.run_cell(&cfg, Method::Hdmole, &adapters, &router, "").unwrap();
    assert_eq!(ma.checksum(|_| true), mb.checksum(|_| true));
    assert_eq!(ra, rb);
}

#[test]
fn results_do_not_depend_on_cell_order() {
    let cfg = small();
    let router = cfg.global_router().unwrap();
    let adapters = cfg.model_config(GatingMode::Hierarchical, 3);
    let ctx = SeedContext::prepare(&cfg, 3).unwrap();
    let forward: Vec<_> = [Method::TopKMole, Method::Hdmole]
        .into_iter()
        .map(|m| ctx.run_cell(&cfg, m, &adapters, &router, "").unwrap().0)
        .collect();
    let backward: Vec<_> = [Method::Hdmole, Method::TopKMole]
        .into_iter()
        .map(|m| ctx.run_cell(&cfg, m, &adapters, &router, "").unwrap().0)
        .collect();
    assert_eq!(forward[0], backward[1]);
    assert_eq!(forward[1], backward[0]);
}

#[test]
fn results_json_is_byte_identical_across_runs() {
    let mut cfg = small();
    cfg.methods = vec![Method::Hdmole, Method::TopKMole];
    let a = results_json(&run_methods(&cfg).unwrap(), None).unwrap();
    let b = results_json(&run_methods(&cfg).unwrap(), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn untrained_adapters_match_base_evaluation() {
    let mut cfg = small();
    cfg.train.steps = 0;
    let router = cfg.global_router().unwrap();
    let ctx = SeedContext::prepare(&cfg, 3).unwrap();
    let adapters = cfg.model_config(GatingMode::Hierarchical, 3);
    for method in [Method::Hdmole, Method::TopKMole, Method::PlainLora, Method::FullFinetune] {
        let (r, _) = ctx.run_cell(&cfg, method, &adapters, &router, "").unwrap();
        assert_eq!(r.target_loss, ctx.base_report.target_loss, "{method}");
        assert_eq!(r.forgetting_delta, 0.0, "{method}");
    }
}

fn one_sample_pool(task: &hdmole::synth::TaskSpec) -> Vec<Sample> {
    vec![task.sample(1, &mut Rng::new(11)).unwrap()]
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = small();
    let ctx = SeedContext::prepare(&cfg, 3).unwrap();
    let router = cfg.global_router().unwrap();
    let adapters = cfg.model_config(GatingMode::Hierarchical, 3);
    let pool = one_sample_pool(&ctx.task);
    for optimizer in [
        OptimizerConfig::Sgd { lr: 0.0, momentum: 0.9 },
        OptimizerConfig::Adam { lr: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
    ] {
        let mut model = prepare_model(&ctx.base, Method::Hdmole, &adapters, 2, &Rng::new(1)).unwrap();
        let before = model.checksum(|_| true);
        let tc = TrainConfig {
            optimizer,
            steps: 20,
            batch_size: 4,
        };
        let curve = train(&mut model, TrainData::Pool(&pool), &router, &tc, &Rng::new(2)).unwrap();
        assert_eq!(model.checksum(|_| true), before);
        assert!(curve.losses.windows(2).all(|w| w[0] == w[1]), "{optimizer:?}");
    }
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let cfg = ModelConfig {
        layers: 1,
        model_dim: 6,
        ffn_dim: 8,
        num_experts: 3,
        rank: 2,
        alpha: 2.0,
        wrapped_sublayers: hdmole::Sublayer::ALL.iter().copied().collect(),
        gating: GatingMode::Hierarchical,
        seed: 0,
    };
    for optimizer in [
        OptimizerConfig::Sgd { lr: 0.1, momentum: 0.5 },
        OptimizerConfig::Adam { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
    ] {
        let mut model = Model::build(&cfg, &Rng::new(5)).unwrap();
        let before = model.checksum(|_| true);
        let registry = ParamRegistry::from_model(&model).unwrap();
        let mut opt = Optimizer::new(optimizer, &registry);
        let grads = model.zero_grads();
        for _ in 0..3 {
            opt.step(&mut model, &grads).unwrap();
        }
        assert_eq!(model.checksum(|_| true), before, "{optimizer:?}");
    }
}

#[test]
fn registry_never_marks_base_trainable() {
    let cfg = small();
    let ctx = SeedContext::prepare(&cfg, 3).unwrap();
    for method in Method::ALL {
        let adapters = cfg.model_config(GatingMode::Hierarchical, 3);
        let model = prepare_model(&ctx.base, method, &adapters, 2, &Rng::new(0)).unwrap();
        let registry = ParamRegistry::from_model(&model).unwrap();
        registry.validate().unwrap();
        assert!(registry.trainable().all(|e| e.tag != ComponentTag::Base));
        assert!(registry.num_trainable() > 0, "{method}");
    }
}

fn params(shift: f64, seed: u64) -> TaskParams {
    TaskParams {
        num_domains: 9,
        dim: 32,
        shift_strength: shift,
        shift_planes: 2,
        offset_std: 2.0 * shift,
        noise_std: 0.1,
        teacher_hidden: 16,
        seed,
    }
}

/// Nearest-centroid classifier: linear in the features, fitted from labelled samples.
#[test]
fn linear_probe_detects_domains() {
    let task = make_task(&params(0.5, 0)).unwrap();
    let k = task.num_domains();
    let mut rng = Rng::new(1);
    let mut centroids = vec![Vector::zeros(task.dim()); k];
    let per_domain = 200;
    for (d, c) in centroids.iter_mut().enumerate() {
        for _ in 0..per_domain {
            c.add_scaled(1.0 / per_domain as f64, &task.sample(d, &mut rng).unwrap().features)
                .unwrap();
        }
    }
    let (w, b): (Vec<Vector>, Vec<f64>) = centroids.iter().map(|c| (c.clone(), -0.5 * c.dot(c))).unzip();
    let mut hits = 0;
    let mut total = 0;
    let mut held_out = Rng::new(2);
    for d in 0..k {
        for _ in 0..per_domain {
            let s = task.sample(d, &mut held_out).unwrap();
            let scores: Vector = w.iter().zip(&b).map(|(w, b)| w.dot(&s.features) + b).collect::<Vec<_>>().into();
            hits += (scores.argmax() == d) as usize;
            total += 1;
        }
    }
    let acc = hits as f64 / total as f64;
    assert!(acc > 0.9, "probe accuracy {acc}");
}

#[test]
fn source_fitted_base_is_worse_on_every_shifted_domain() {
    for shift in [0.3, 1.0] {
        for seed in 0..5 {
            let mut p = params(shift, seed);
            p.dim = 12;
            let task = make_task(&p).unwrap();
            let shape = ModelConfig {
                layers: 1,
                model_dim: 12,
                ffn_dim: 32,
                num_experts: 8,
                rank: 2,
                alpha: 2.0,
                wrapped_sublayers: Default::default(),
                gating: GatingMode::Hierarchical,
                seed,
            };
            let root = Rng::new(seed);
            let init = Model::random_base(&shape, &root.derive("model")).unwrap();
            let cfg = TrainConfig {
                steps: 1500,
                ..TrainConfig::default()
            };
            let (base, _) = pretrain_base(&init, &task, &cfg, &root).unwrap();
            let router = GlobalRouter::oracle(8).unwrap();
            let eval = EvalConfig {
                samples_per_domain: 256,
            };
            let r = evaluate(&base, &task, &router, &eval, &root.derive("eval")).unwrap();
            for (d, loss) in r.per_domain_loss.iter().enumerate().skip(1) {
                assert!(*loss > r.source_loss, "shift {shift} seed {seed} domain {d}: {loss} vs {}", r.source_loss);
            }
        }
    }
}

#[test]
fn training_reduces_target_loss() {
    let mut cfg = small();
    cfg.train.steps = 400;
    let ctx = SeedContext::prepare(&cfg, 3).unwrap();
    let router = cfg.global_router().unwrap();
    let adapters = cfg.model_config(GatingMode::Hierarchical, 3);
    let (r, _) = ctx.run_cell(&cfg, Method::Hdmole, &adapters, &router, "").unwrap();
    assert!(r.target_loss < 0.8 * ctx.base_report.target_loss, "{} vs {}", r.target_loss, ctx.base_report.target_loss);
    assert!(r.final_train_loss < r.initial_train_loss);
}

#[test]
fn pretraining_uses_only_the_source_domain() {
    let task = make_task(&params(1.0, 4)).unwrap();
    let mix = one_hot_mix(task.num_domains(), 0);
    let batch = task.sample_batch(&mix, 64, &mut Rng::new(0)).unwrap();
    assert!(batch.iter().all(|s| s.domain_id == 0));
    let mix = target_mix(task.num_domains());
    assert_eq!(mix[0], 0.0);
}
