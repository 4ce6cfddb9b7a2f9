use wrf_core::model::{self, FinetuneMode, Model, ModelConfig};
use wrf_core::objective::{ordered_batches, ContrastiveObjective, MeanOverBatches, Objective, TripletBatch};
use wrf_core::optim::{Optimizer, OptimizerKind};
use wrf_core::perturb::{self, PerturbConfig};
use wrf_core::synthcir::{self, Dataset, DatasetConfig};
use wrf_core::trainer::{self, PassCounter, TrainConfig, TrainState};
use wrf_core::ParameterSet;

struct Setup {
    data: Dataset,
    cfg: ModelConfig,
    obj: ContrastiveObjective,
    params: ParameterSet,
    batches: Vec<TripletBatch>,
}

fn setup(mode: FinetuneMode) -> Setup {
    let data = synthcir::generate(&DatasetConfig {
        n_train: 128,
        n_val: 32,
        gallery_size: 256,
        ..DatasetConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        hidden: vec![32, 32],
        ..ModelConfig::default()
    };
    let mut params = model::init_model(&cfg).unwrap();
    if mode != FinetuneMode::Full {
        params = model::set_finetune_mode(&cfg, &params, mode, 3).unwrap();
    }
    let obj = ContrastiveObjective::new(Model::new(cfg.clone(), mode).unwrap(), 10.0).unwrap();
    let batches = ordered_batches(&data, &data.train, 32).unwrap();
    Setup {
        data,
        cfg,
        obj,
        params,
        batches,
    }
}

fn max_diff(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.iter()
        .flat_map(|(k, l)| {
            let o = b.get(k).unwrap();
            l.tensor.data().iter().zip(o.data()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn gamma_zero_matches_plain_training() {
    let s = setup(FinetuneMode::Full);
    let zero = PerturbConfig { gamma: 0.0, rho: 1.0, seed: 0 };
    for (kind, lr) in [(OptimizerKind::Sgd, 0.3), (OptimizerKind::adamw_default(), 5e-3)] {
        let mut a = TrainState::new(s.params.clone(), kind, 0);
        let mut b = TrainState::new(s.params.clone(), kind, 0);
        for step in 0..50 {
            let batch = &s.batches[step % s.batches.len()];
            trainer::baseline_step(&mut a, &s.obj, batch, lr).unwrap();
            trainer::wrf_step(&mut b, &s.obj, batch, &zero, lr).unwrap();
            assert!(max_diff(&a.params, &b.params) <= 1e-12, "{kind:?} step {step}");
        }
    }
}

/// Replaying one step by hand (gradient, perturbation, gradient at the
/// perturbed point, step from the untouched weights) reproduces it bit for bit.
#[test]
fn step_replay_is_exact() {
    let s = setup(FinetuneMode::Full);
    let cfg = PerturbConfig { gamma: 2e-3, rho: 1.0, seed: 0 };
    let kind = OptimizerKind::adamw_default();
    let mut state = TrainState::new(s.params.clone(), kind, 0);
    let mut theta = s.params.clone();
    let mut opt = Optimizer::new(kind, &theta);
    for step in 0..5 {
        let batch = &s.batches[step % s.batches.len()];
        trainer::wrf_step(&mut state, &s.obj, batch, &cfg, 1e-3).unwrap();

        let (_, g) = s.obj.loss_and_grad(&theta, batch).unwrap();
        let delta = perturb::adversarial_perturbation(&theta, &g, cfg.gamma).unwrap();
        let (_, g2) = s.obj.loss_and_grad(&perturb::apply(&theta, &delta).unwrap(), batch).unwrap();
        opt.step(&mut theta, &g2, 1e-3).unwrap();
        assert_eq!(state.params, theta, "step {step}");
    }
}

#[test]
fn pass_counts_per_step_kind() {
    let s = setup(FinetuneMode::Full);
    let mut st = TrainState::new(s.params.clone(), OptimizerKind::Sgd, 0);
    let batch = &s.batches[0];
    trainer::baseline_step(&mut st, &s.obj, batch, 0.1).unwrap();
    assert_eq!(st.passes, PassCounter { forward: 1, backward: 1 });
    let adv = PerturbConfig { gamma: 1e-3, rho: 1.0, seed: 0 };
    for _ in 0..4 {
        trainer::wrf_step(&mut st, &s.obj, batch, &adv, 0.1).unwrap();
    }
    assert_eq!(st.passes, PassCounter { forward: 9, backward: 9 });
    assert_eq!(st.adversarial_steps, 4);
    let rand = PerturbConfig { rho: 0.0, ..adv };
    trainer::wrf_step(&mut st, &s.obj, batch, &rand, 0.1).unwrap();
    assert_eq!(st.passes, PassCounter { forward: 10, backward: 10 });
    assert_eq!(st.random_steps, 1);
    assert_eq!(st.steps, 6);
}

#[test]
fn perturbed_training_lowers_the_loss() {
    let s = setup(FinetuneMode::Full);
    let whole = MeanOverBatches(s.obj.clone());
    let before = whole.loss(&s.params, &s.batches).unwrap();
    let cfg = PerturbConfig { gamma: 2e-3, rho: 1.0, seed: 0 };
    let mut st = TrainState::new(s.params.clone(), OptimizerKind::adamw_default(), 0);
    for step in 0..100 {
        trainer::wrf_step(&mut st, &s.obj, &s.batches[step % s.batches.len()], &cfg, 3e-3).unwrap();
    }
    let after = whole.loss(&st.params, &s.batches).unwrap();
    assert!(after < 0.9 * before, "{before} -> {after}");
}

#[test]
fn lora_training_keeps_base_weights() {
    let s = setup(FinetuneMode::Lora { rank: 4 });
    let cfg = TrainConfig {
        total_epochs: 6,
        warmup_epochs: 1,
        batch_size: 32,
        gamma: 5e-3,
        finetune_mode: FinetuneMode::Lora { rank: 4 },
        ..TrainConfig::default()
    };
    let run = trainer::train_from(&cfg, &s.cfg, s.params.clone(), &s.data, None).unwrap();
    let mut adapters_moved = false;
    for (name, layer) in s.params.iter() {
        let after = run.final_params.get(name).unwrap();
        if layer.trainable {
            adapters_moved |= after != &layer.tensor;
        } else {
            let bits = |t: &wrf_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(after), bits(&layer.tensor), "{name}");
        }
    }
    assert!(adapters_moved);
}

#[test]
fn runs_are_deterministic_and_seed_sensitive() {
    let s = setup(FinetuneMode::Full);
    let cfg = TrainConfig {
        total_epochs: 4,
        warmup_epochs: 1,
        batch_size: 32,
        gamma: 1e-3,
        rho: 0.5,
        ..TrainConfig::default()
    };
    let a = trainer::train_from(&cfg, &s.cfg, s.params.clone(), &s.data, None).unwrap();
    let b = trainer::train_from(&cfg, &s.cfg, s.params.clone(), &s.data, None).unwrap();
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(a.record.best_epoch, b.record.best_epoch);
    let other = TrainConfig { seed: 9, ..cfg };
    let c = trainer::train_from(&other, &s.cfg, s.params.clone(), &s.data, None).unwrap();
    assert_ne!(a.final_params, c.final_params);
}

#[test]
fn single_precision_run_completes() {
    let s = setup(FinetuneMode::Full);
    let cfg = TrainConfig {
        total_epochs: 3,
        warmup_epochs: 1,
        batch_size: 32,
        gamma: 1e-3,
        ..TrainConfig::default()
    };
    let run = trainer::train::<f32>(&cfg, &s.cfg, &s.data, None).unwrap();
    assert_eq!(run.record.rows.len(), 3);
    assert!(run.record.best_val_rmean().unwrap().is_finite());
}
