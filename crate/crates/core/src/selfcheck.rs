//! Release gate: gradient oracle, perturbation budget, gamma = 0 collapse and
//! the two equivalent forms of the perturbed SGD update.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{compare_gradients, finite_diff_gradient, op_probe, Inputs, OpKind};
use crate::error::Result;
use crate::model::{self, FinetuneMode, Model, ModelConfig, MODS, REFS, TARGETS};
use crate::objective::{ordered_batches, ContrastiveObjective, TripletBatch};
use crate::optim::OptimizerKind;
use crate::params::{GradientSet, ParameterSet};
use crate::perturb::{self, PerturbConfig};
use crate::synthcir::{self, DatasetConfig};
use crate::tensor::Tensor;
use crate::trainer::{self, TrainState};

pub const GRADIENT_ORACLE: &str = "gradient oracle";
pub const PERTURBATION_CONSTRAINT: &str = "perturbation constraint";
pub const GAMMA_ZERO: &str = "gamma=0 equivalence";
pub const DUAL_UPDATE: &str = "perturbed update dual implementation";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SelfcheckOptions {
    /// Seeds for each gradient-oracle case.
    pub seeds: u64,
    /// Backward rule to corrupt, for mutation testing.
    pub fault: Option<OpKind>,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions { seeds: 100, fault: None }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = gaussian(rng, &[rows, cols]);
    for r in 0..rows {
        let n = crate::scalar::l2_norm(t.row(r));
        t.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn timed(name: &'static str, f: impl FnOnce() -> std::result::Result<String, String>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

pub fn run(options: &SelfcheckOptions) -> Vec<CheckResult> {
    vec![
        timed(GRADIENT_ORACLE, || gradient_oracle(options)),
        timed(PERTURBATION_CONSTRAINT, perturbation_constraint),
        timed(GAMMA_ZERO, gamma_zero_equivalence),
        timed(DUAL_UPDATE, dual_update),
    ]
}

fn err_str(e: crate::Error) -> String {
    e.to_string()
}

/// Small query-branch model with random inputs, for oracle comparisons.
pub fn model_probe(
    mode: FinetuneMode,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<(crate::diffcore::Graph, Inputs<f64>, ParameterSet)> {
    let cfg = ModelConfig {
        d_ref: 4,
        d_mod: 3,
        hidden: vec![5, 5],
        d_out: 3,
        // smooth activation and well-scaled outputs keep central differences accurate
        activation: model::Activation::Tanh,
        init_scale: 2.0,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut params = model::init_model::<f64>(&cfg)?;
    if let FinetuneMode::Lora { .. } = mode {
        params = model::set_finetune_mode(&cfg, &params, mode, seed)?;
        // move adapters off zero so their gradients are exercised
        let names: Vec<String> = params.names().filter(|n| n.ends_with(".lora_b")).map(String::from).collect();
        for n in names {
            let t = params.get_mut(&n).expect("listed");
            for v in t.data_mut() {
                *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    for (_, layer) in params.iter_mut() {
        if layer.trainable && layer.tensor.shape().len() == 1 {
            for v in layer.tensor.data_mut() {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let model = Model::new(cfg.clone(), mode)?;
    let mut b = model.training_graph_builder(1.0);
    if let Some(f) = fault {
        b.inject_sign_fault(f);
    }
    let batch = 4;
    let inputs = Inputs::from([
        (REFS.to_string(), unit_rows(&mut rng, batch, cfg.d_ref)),
        (MODS.to_string(), unit_rows(&mut rng, batch, cfg.d_mod)),
        (TARGETS.to_string(), unit_rows(&mut rng, batch, cfg.d_ref)),
    ]);
    Ok((b.build(), inputs, params))
}

fn oracle_case(graph: &crate::diffcore::Graph, inputs: &Inputs<f64>, params: &ParameterSet) -> Result<Option<String>> {
    let mut ex = graph.executor();
    ex.forward(inputs, params)?;
    let analytic = ex.backward(graph.output(), params)?;
    let numeric = finite_diff_gradient(|p| Ok(graph.eval(inputs, p)?.item()), params, 1e-5)?;
    Ok(compare_gradients(&analytic, &numeric, 1e-6, 1e-8, 1e-2)
        .err()
        .map(|m| format!("{}[{}]: analytic {:.9e} vs numeric {:.9e}", m.layer, m.index, m.analytic, m.numeric)))
}

fn gradient_oracle(options: &SelfcheckOptions) -> std::result::Result<String, String> {
    let mut cases = 0;
    for kind in OpKind::DIFFERENTIABLE {
        for seed in 0..options.seeds {
            let (g, inputs, params) = op_probe(kind, seed, options.fault);
            if let Some(m) = oracle_case(&g, &inputs, &params).map_err(err_str)? {
                return Err(format!("op {} seed {seed}: {m}", kind.name()));
            }
            cases += 1;
        }
    }
    for mode in [FinetuneMode::Full, FinetuneMode::Lora { rank: 2 }] {
        for seed in 0..options.seeds {
            let (g, inputs, params) = model_probe(mode, seed, options.fault).map_err(err_str)?;
            if let Some(m) = oracle_case(&g, &inputs, &params).map_err(err_str)? {
                return Err(format!("{} model seed {seed}: {m}", mode.name()));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} cases within rel 1e-6 / abs 1e-8"))
}

/// Random layered parameters and gradients; one gradient layer is zero.
pub fn random_layers(rng: &mut ChaCha8Rng) -> (ParameterSet, GradientSet) {
    let mut p = ParameterSet::new();
    let shapes: [&[usize]; 3] = [&[3, 4], &[5], &[2, 2]];
    for (i, s) in shapes.iter().enumerate() {
        p.insert(format!("l{i}"), gaussian(rng, s), true).expect("fresh set");
    }
    let mut g = GradientSet::zeros_like(&p);
    for name in ["l0", "l1"] {
        let t = g.get_mut(name).expect("trainable");
        for v in t.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
    }
    (p, g)
}

fn perturbation_constraint() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 1000;
    for i in 0..draws {
        let (p, g) = random_layers(&mut rng);
        let gamma = 10f64.powf(rng.random_range(-4.0..=-1.0));
        let d = perturb::adversarial_perturbation(&p, &g, gamma).map_err(err_str)?;
        for (name, l) in d.iter() {
            let g_l = g.get(name).expect("same layers");
            if g_l.norm() == 0.0 {
                if l.delta.data().iter().any(|&v| v != 0.0) {
                    return Err(format!("draw {i}: zero-gradient layer {name} was perturbed"));
                }
                continue;
            }
            let ratio = l.delta.norm() / (gamma * p.get(name).expect("layer").norm());
            if (ratio - 1.0).abs() > 1e-10 {
                return Err(format!("draw {i}: layer {name} budget ratio {ratio}"));
            }
            let cos = crate::scalar::dot(l.delta.data(), g_l.data()) / (l.delta.norm() * g_l.norm());
            if (cos - 1.0).abs() > 1e-10 {
                return Err(format!("draw {i}: layer {name} cosine {cos}"));
            }
        }
    }
    Ok(format!("{draws} draws at equality, aligned with the gradient"))
}

struct Toy {
    objective: ContrastiveObjective,
    params: ParameterSet,
    batches: Vec<TripletBatch<f64>>,
}

fn toy() -> Result<Toy> {
    let data = synthcir::generate(&DatasetConfig {
        n_train: 64,
        n_val: 8,
        gallery_size: 80,
        ..DatasetConfig::default()
    })?;
    let cfg = ModelConfig {
        hidden: vec![16],
        ..ModelConfig::default()
    };
    let params = model::init_model(&cfg)?;
    let objective = ContrastiveObjective::new(Model::new(cfg, FinetuneMode::Full)?, 10.0)?;
    let batches = ordered_batches(&data, &data.train, 16)?;
    Ok(Toy {
        objective,
        params,
        batches,
    })
}

fn max_diff(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.iter()
        .map(|(k, l)| {
            let o = b.get(k).expect("same layers");
            l.tensor
                .data()
                .iter()
                .zip(o.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn gamma_zero_equivalence() -> std::result::Result<String, String> {
    let t = toy().map_err(err_str)?;
    let cfg = PerturbConfig {
        gamma: 0.0,
        rho: 1.0,
        seed: 0,
    };
    let mut worst = 0.0f64;
    for (kind, lr) in [(OptimizerKind::Sgd, 0.5), (OptimizerKind::adamw_default(), 1e-2)] {
        let mut a = TrainState::new(t.params.clone(), kind, 0);
        let mut b = TrainState::new(t.params.clone(), kind, 0);
        for step in 0..50 {
            let batch = &t.batches[step % t.batches.len()];
            trainer::baseline_step(&mut a, &t.objective, batch, lr).map_err(err_str)?;
            trainer::wrf_step(&mut b, &t.objective, batch, &cfg, lr).map_err(err_str)?;
            let d = max_diff(&a.params, &b.params);
            if d > 1e-12 {
                return Err(format!("{kind:?} step {step}: max coordinate difference {d:e}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(format!("50 steps each for sgd and adamw, max difference {worst:e}"))
}

fn dual_update() -> std::result::Result<String, String> {
    let t = toy().map_err(err_str)?;
    let cfg = PerturbConfig {
        gamma: 1e-2,
        rho: 1.0,
        seed: 0,
    };
    let mut a = TrainState::new(t.params.clone(), OptimizerKind::Sgd, 0);
    let mut b = TrainState::new(t.params, OptimizerKind::Sgd, 0);
    let mut worst = 0.0f64;
    for step in 0..50 {
        let batch = &t.batches[step % t.batches.len()];
        trainer::wrf_step(&mut a, &t.objective, batch, &cfg, 0.5).map_err(err_str)?;
        trainer::literal_sgd_wrf_step(&mut b, &t.objective, batch, &cfg, 0.5).map_err(err_str)?;
        let d = max_diff(&a.params, &b.params);
        if d > 1e-9 {
            return Err(format!("step {step}: max coordinate difference {d:e}"));
        }
        worst = worst.max(d);
    }
    Ok(format!("50 steps, max difference {worst:e}"))
}
