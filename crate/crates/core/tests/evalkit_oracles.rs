use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wrf_core::evalkit;
use wrf_core::model::{self, FinetuneMode, Model, ModelConfig};
use wrf_core::objective::{ordered_batches, ContrastiveObjective, Objective};
use wrf_core::perturb;
use wrf_core::synthcir::{self, DatasetConfig};
use wrf_core::Tensor;

fn scores(q: &Tensor, g: &Tensor, i: usize) -> Vec<f64> {
    (0..g.rows())
        .map(|j| q.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum())
        .collect()
}

/// 1 + items scoring higher + equal items at a lower index.
fn brute_rank(s: &[f64], target: usize) -> usize {
    1 + s
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s[target] || (v == s[target] && j < target))
        .count()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2i32..=2, rows * cols)
        .prop_map(move |v| Tensor::matrix(rows, cols, v.into_iter().map(f64::from).collect()).unwrap())
}

fn instance() -> impl Strategy<Value = (Tensor, Tensor, Vec<usize>)> {
    (1usize..8, 2usize..30, 1usize..5).prop_flat_map(|(nq, ng, d)| {
        (matrix(nq, d), matrix(ng, d), prop::collection::vec(0..ng, nq))
    })
}

proptest! {
    #[test]
    fn ranks_match_brute_force((q, g, targets) in instance(), threads in 1usize..4) {
        let ranks = evalkit::target_ranks(&q, &g, &targets, None, threads).unwrap();
        for (i, &(r, _)) in ranks.iter().enumerate() {
            prop_assert_eq!(r, brute_rank(&scores(&q, &g, i), targets[i]));
        }
        let rankings = evalkit::rank_gallery(&q, &g).unwrap();
        for k in [1, g.rows()] {
            let hits = ranks.iter().filter(|(r, _)| *r <= k).count();
            prop_assert_eq!(evalkit::recall_at_k(&rankings, &targets, k).unwrap(), 100.0 * hits as f64 / q.rows() as f64);
        }
        // recall is monotone in K and reaches 100 at the gallery size
        let all: Vec<f64> = (1..=g.rows()).map(|k| evalkit::recall_at_k(&rankings, &targets, k).unwrap()).collect();
        prop_assert!(all.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*all.last().unwrap(), 100.0);
    }
}

/// With random scores and two candidates the target wins half the time.
#[test]
fn subset_recall_of_pairs_is_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let trials = 1000;
    let gallery = 20;
    let mut rankings = Vec::new();
    let mut subsets = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..trials {
        let mut order: Vec<usize> = (0..gallery).collect();
        for i in (1..gallery).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let t = rng.random_range(0..gallery);
        let mut other = rng.random_range(0..gallery - 1);
        if other >= t {
            other += 1;
        }
        let mut s = vec![t, other];
        s.sort_unstable();
        rankings.push(order);
        subsets.push(s);
        targets.push(t);
    }
    let refs: Vec<&[usize]> = subsets.iter().map(Vec::as_slice).collect();
    let r = evalkit::recall_subset_at_k(&rankings, &refs, &targets, 1).unwrap();
    assert!((45.0..=55.0).contains(&r), "{r}");
    assert_eq!(evalkit::recall_subset_at_k(&rankings, &refs, &targets, 2).unwrap(), 100.0);
}

#[test]
fn adversarial_sharpness_is_nonnegative() {
    let data = synthcir::generate(&DatasetConfig {
        n_train: 128,
        n_val: 8,
        gallery_size: 160,
        ..DatasetConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        hidden: vec![16],
        ..ModelConfig::default()
    };
    let obj = ContrastiveObjective::new(Model::new(cfg.clone(), FinetuneMode::Full).unwrap(), 10.0).unwrap();
    let batches = ordered_batches::<f64>(&data, &data.train, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 500;
    let mut ok = 0;
    for i in 0..trials {
        let params = model::init_model::<f64>(&ModelConfig { seed: i, ..cfg.clone() }).unwrap();
        let batch = &batches[i as usize % batches.len()];
        let (_, g) = obj.loss_and_grad(&params, batch).unwrap();
        let gamma = 10f64.powf(rng.random_range(-5.0..=-3.0));
        let d = perturb::adversarial_perturbation(&params, &g, gamma).unwrap();
        if evalkit::sharpness(&obj, &params, &d, batch).unwrap() >= 0.0 {
            ok += 1;
        }
    }
    assert!(ok * 100 >= trials * 99, "{ok} of {trials}");
}
