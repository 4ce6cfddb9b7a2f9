use super::*;
use crate::testutil::{gaussian, rng, unit_rows};

fn small_config() -> ModelConfig {
    ModelConfig {
        d_ref: 6,
        d_mod: 3,
        hidden: vec![5, 4],
        d_out: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn reference_parameter_count() {
    let config = ModelConfig {
        d_ref: 32,
        d_mod: 8,
        hidden: vec![64, 64],
        d_out: 16,
        ..ModelConfig::default()
    };
    let params = init_model::<f64>(&config).unwrap();
    let query: usize = params
        .iter()
        .filter(|(k, _)| k.starts_with("query."))
        .map(|(_, l)| l.tensor.len())
        .sum();
    assert_eq!(query, (40 * 64 + 64) + (64 * 64 + 64) + (64 * 16 + 16));
    assert_eq!(query, 7_824);
    assert_eq!(params.num_values(), 7_824 + 32 * 16 + 16);
}

#[test]
fn init_is_deterministic_and_bounded() {
    let config = small_config();
    let a = init_model::<f64>(&config).unwrap();
    let b = init_model::<f64>(&config).unwrap();
    assert_eq!(a, b);
    let w = a.get(&query_weight(0)).unwrap();
    let bound = 1.0 / 9f64.sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    assert!(a.get(&query_bias(0)).unwrap().data().iter().all(|&v| v == 0.0));
    let other = init_model::<f64>(&ModelConfig { seed: 1, ..config }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn invalid_configs_rejected() {
    let zero_scale = ModelConfig {
        init_scale: 0.0,
        ..small_config()
    };
    assert!(init_model::<f64>(&zero_scale).is_err());
    let zero_width = ModelConfig {
        hidden: vec![4, 0],
        ..small_config()
    };
    assert!(init_model::<f64>(&zero_width).is_err());
}

#[test]
fn query_rows_are_unit_norm() {
    let config = small_config();
    let model = Model::new(config.clone(), FinetuneMode::Full).unwrap();
    let params = init_model::<f64>(&config).unwrap();
    let mut r = rng(4);
    for _ in 0..20 {
        let u = model
            .forward_query(&params, &unit_rows(&mut r, 7, 6), &gaussian(&mut r, &[7, 3]))
            .unwrap();
        for i in 0..7 {
            assert!((crate::scalar::l2_norm(u.row(i)) - 1.0).abs() <= 1e-12);
        }
        let v = model.forward_target(&params, &unit_rows(&mut r, 7, 6)).unwrap();
        for i in 0..7 {
            assert!((crate::scalar::l2_norm(v.row(i)) - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_weights_give_guarded_zero_rows() {
    let config = small_config();
    let model = Model::new(config.clone(), FinetuneMode::Full).unwrap();
    let mut params = init_model::<f64>(&config).unwrap();
    for (_, layer) in params.iter_mut() {
        layer.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let u = model
        .forward_query(&params, &Tensor::zeros(vec![2, 6]), &Tensor::zeros(vec![2, 3]))
        .unwrap();
    assert!(u.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_permutation_permutes_outputs() {
    let config = small_config();
    let model = Model::new(config.clone(), FinetuneMode::Full).unwrap();
    let params = init_model::<f64>(&config).unwrap();
    let mut r = rng(8);
    let refs = unit_rows(&mut r, 5, 6);
    let mods = gaussian(&mut r, &[5, 3]);
    let perm = [3, 0, 4, 1, 2];
    let u = model.forward_query(&params, &refs, &mods).unwrap();
    let up = model
        .forward_query(&params, &refs.select_rows(&perm), &mods.select_rows(&perm))
        .unwrap();
    assert_eq!(up, u.select_rows(&perm));
}

#[test]
fn mismatched_batch_is_shape_error() {
    let config = small_config();
    let model = Model::new(config.clone(), FinetuneMode::Full).unwrap();
    let params = init_model::<f64>(&config).unwrap();
    let err = model
        .forward_query(&params, &Tensor::zeros(vec![2, 6]), &Tensor::zeros(vec![3, 3]))
        .unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(model.forward_target(&params, &Tensor::zeros(vec![2, 5])).is_err());
}

#[test]
fn identity_target_projection() {
    let config = ModelConfig {
        d_ref: 4,
        d_out: 4,
        ..small_config()
    };
    let model = Model::new(config.clone(), FinetuneMode::Full).unwrap();
    let mut params = init_model::<f64>(&config).unwrap();
    *params.get_mut(TARGET_WEIGHT).unwrap() = Tensor::identity(4);
    let x = Tensor::from_rows(&[[0.5, -0.5, 0.5, 0.5]]).unwrap();
    let v = model.forward_target(&params, &x).unwrap();
    assert_eq!(v, x);
    assert_eq!(model.forward_target(&params, &x).unwrap(), v);
}

#[test]
fn lora_mode_starts_at_base_model() {
    let config = small_config();
    let full = init_model::<f64>(&config).unwrap();
    let lora = set_finetune_mode(&config, &full, FinetuneMode::Lora { rank: 2 }, 5).unwrap();
    let full_model = Model::new(config.clone(), FinetuneMode::Full).unwrap();
    let lora_model = Model::new(config.clone(), FinetuneMode::Lora { rank: 2 }).unwrap();
    let mut r = rng(2);
    let refs = unit_rows(&mut r, 4, 6);
    let mods = gaussian(&mut r, &[4, 3]);
    assert_eq!(
        full_model.forward_query(&full, &refs, &mods).unwrap(),
        lora_model.forward_query(&lora, &refs, &mods).unwrap()
    );
    for (name, layer) in lora.iter() {
        let expect = !name.ends_with(".weight");
        assert_eq!(layer.trainable, expect, "{name}");
    }
    assert_eq!(detect_mode(&lora), FinetuneMode::Lora { rank: 2 });
    assert_eq!(detect_mode(&full), FinetuneMode::Full);
}

#[test]
fn lora_adds_expected_trainable_values() {
    let config = ModelConfig::default();
    let full = init_model::<f64>(&config).unwrap();
    let lora = set_finetune_mode(&config, &full, FinetuneMode::Lora { rank: 4 }, 0).unwrap();
    let first = query_weight(0);
    assert_eq!(full.get(&first).unwrap().shape(), &[64, 40]);
    let added = lora.get(&lora_a(&first)).unwrap().len() + lora.get(&lora_b(&first)).unwrap().len();
    assert_eq!(added, 4 * 40 + 64 * 4);
    assert_eq!(added, 416);
}

#[test]
fn lora_rank_too_large_rejected() {
    let config = small_config();
    let full = init_model::<f64>(&config).unwrap();
    // smallest layer is 4 x 5 (query.2 is 4 x 4)
    assert!(set_finetune_mode(&config, &full, FinetuneMode::Lora { rank: 5 }, 0).is_err());
    assert!(set_finetune_mode(&config, &full, FinetuneMode::Lora { rank: 0 }, 0).is_err());
}

#[test]
fn full_mode_marks_every_layer_trainable_and_merges() {
    let config = small_config();
    let full = init_model::<f64>(&config).unwrap();
    let mut lora = set_finetune_mode(&config, &full, FinetuneMode::Lora { rank: 1 }, 0).unwrap();
    let b_name = lora_b(TARGET_WEIGHT);
    lora.get_mut(&b_name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.1);
    let merged = set_finetune_mode(&config, &lora, FinetuneMode::Full, 0).unwrap();
    assert_eq!(merged.len(), full.len());
    assert!(merged.iter().all(|(_, l)| l.trainable));
    let lora_model = Model::new(config.clone(), FinetuneMode::Lora { rank: 1 }).unwrap();
    let full_model = Model::new(config, FinetuneMode::Full).unwrap();
    let x = unit_rows(&mut rng(1), 3, 6);
    let a = lora_model.forward_target(&lora, &x).unwrap();
    let b = full_model.forward_target(&merged, &x).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn frozen_base_receives_no_gradient() {
    let config = small_config();
    let full = init_model::<f64>(&config).unwrap();
    let lora = set_finetune_mode(&config, &full, FinetuneMode::Lora { rank: 2 }, 0).unwrap();
    let model = Model::new(config, FinetuneMode::Lora { rank: 2 }).unwrap();
    let graph = model.training_graph(10.0);
    let mut r = rng(3);
    let inputs = Inputs::from([
        (REFS.to_string(), unit_rows(&mut r, 4, 6)),
        (MODS.to_string(), gaussian(&mut r, &[4, 3])),
        (TARGETS.to_string(), unit_rows(&mut r, 4, 6)),
    ]);
    let mut ex = graph.executor();
    ex.forward(&inputs, &lora).unwrap();
    let grads = ex.backward(graph.output(), &lora).unwrap();
    grads.check_matches(&lora).unwrap();
    assert!(grads.names().all(|n| !n.ends_with(".weight")));
}
