use super::*;
use crate::model::{init_model, FinetuneMode, ModelConfig};
use crate::objective::{ContrastiveObjective, HalfSquaredNorm, MeanOverBatches, ordered_batches};
use crate::perturb::PerturbKind;
use crate::synthcir::{self, DatasetConfig};
use crate::testutil::{rng, unit_rows};

fn report(split: &str, pairs: &[(usize, f64)], rmean: f64) -> MetricReport {
    MetricReport {
        split: split.into(),
        recall_at: pairs.iter().copied().collect(),
        rmean,
        recall_subset_at: BTreeMap::new(),
    }
}

#[test]
fn exact_match_ranks_first() {
    let gallery = Tensor::identity(4);
    let q = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
    assert_eq!(rank_gallery(&q, &gallery).unwrap()[0][0], 2);
}

#[test]
fn ties_go_to_lower_index() {
    let gallery = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    assert_eq!(rank_gallery(&q, &gallery).unwrap()[0], vec![1, 2, 0]);
    let ranks = target_ranks(&q, &gallery, &[2], None, 1).unwrap();
    assert_eq!(ranks[0].0, 2);
}

#[test]
fn dimension_mismatch() {
    let q = Tensor::<f64>::zeros(vec![1, 3]);
    let g = Tensor::<f64>::zeros(vec![2, 4]);
    assert!(matches!(rank_gallery(&q, &g), Err(Error::Shape { .. })));
}

#[test]
fn hand_counted_recall() {
    // targets sit at ranks 1, 4 and 11
    let ranking: Vec<usize> = (0..20).collect();
    let rankings = vec![ranking.clone(); 3];
    let targets = [0, 3, 10];
    let third = 100.0 / 3.0;
    assert!((recall_at_k(&rankings, &targets, 1).unwrap() - third).abs() < 1e-12);
    assert!((recall_at_k(&rankings, &targets, 5).unwrap() - 2.0 * third).abs() < 1e-12);
    assert!((recall_at_k(&rankings, &targets, 10).unwrap() - 2.0 * third).abs() < 1e-12);
    assert!(recall_at_k(&rankings, &targets, 21).is_err());
    assert!(recall_at_k(&rankings, &targets, 0).is_err());
    assert!((recall_from_ranks(&[1, 4, 11], 5) - 2.0 * third).abs() < 1e-12);
}

#[test]
fn ranks_agree_with_sorting_and_threads() {
    let mut r = rng(3);
    let q = unit_rows(&mut r, 37, 6);
    let g = unit_rows(&mut r, 50, 6);
    let targets: Vec<usize> = (0..37).map(|i| (i * 7) % 50).collect();
    let rankings = rank_gallery(&q, &g).unwrap();
    let one = target_ranks(&q, &g, &targets, None, 1).unwrap();
    let four = target_ranks(&q, &g, &targets, None, 4).unwrap();
    assert_eq!(one, four);
    for ((ranking, &t), (rank, _)) in rankings.iter().zip(&targets).zip(&one) {
        assert_eq!(ranking.iter().position(|&i| i == t).unwrap() + 1, *rank);
    }
}

#[test]
fn subset_recall() {
    let ranking: Vec<usize> = (0..10).collect();
    let rankings = vec![ranking.clone(), ranking];
    let s0: &[usize] = &[2, 5, 9];
    let s1: &[usize] = &[0, 1];
    let subsets = [s0, s1];
    // target 5 is second within {2, 5, 9}; target 0 is first within {0, 1}
    assert_eq!(recall_subset_at_k(&rankings, &subsets, &[5, 0], 1).unwrap(), 50.0);
    assert_eq!(recall_subset_at_k(&rankings, &subsets, &[5, 0], 2).unwrap(), 100.0);
    assert!(matches!(
        recall_subset_at_k(&rankings, &subsets, &[4, 0], 1),
        Err(Error::Data(_))
    ));
}

#[test]
fn cirr_average() {
    let mut r = report("val", &[(5, 82.12)], 0.0);
    r.recall_subset_at.insert(1, 80.65);
    assert!((cirr_avg(&r).unwrap() - 81.385).abs() < 1e-9);
    r.recall_subset_at.clear();
    assert!(cirr_avg(&r).is_err());
}

#[test]
fn gap() {
    let train = report("train", &[(10, 90.0), (50, 90.0)], 90.0);
    let val = report("val", &[(10, 50.0), (50, 50.0)], 50.0);
    assert_eq!(generalization_gap(&train, &val).unwrap(), 40.0);
    assert_eq!(generalization_gap(&val, &train).unwrap(), -40.0);
    assert_eq!(generalization_gap(&train, &train).unwrap(), 0.0);
    let other = report("val", &[(1, 50.0)], 50.0);
    assert!(generalization_gap(&train, &other).is_err());
}

#[test]
fn quadratic_sharpness() {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::vector(vec![1.0]).unwrap(), true).unwrap();
    let mut dirs = indexmap::IndexMap::new();
    dirs.insert("w".to_string(), Tensor::vector(vec![1.0]).unwrap());
    let delta = Perturbation::from_directions(&p, dirs, 0.5, PerturbKind::Adversarial).unwrap();
    let s: f64 = sharpness(&HalfSquaredNorm, &p, &delta, &()).unwrap();
    assert!((s - 0.625).abs() < 1e-15);
    let zero = Perturbation::zeros(&p, PerturbKind::Random);
    assert_eq!(sharpness(&HalfSquaredNorm, &p, &zero, &()).unwrap(), 0.0);
}

fn small_setup() -> (Dataset, ContrastiveObjective, ParameterSet) {
    let cfg = DatasetConfig {
        n_train: 40,
        n_val: 20,
        gallery_size: 80,
        ..DatasetConfig::default()
    };
    let data = synthcir::generate(&cfg).unwrap();
    let mcfg = ModelConfig {
        hidden: vec![16],
        ..ModelConfig::default()
    };
    let model = Model::new(mcfg.clone(), FinetuneMode::Full).unwrap();
    let params = init_model(&mcfg).unwrap();
    (data, ContrastiveObjective::new(model, 10.0).unwrap(), params)
}

#[test]
fn evaluate_reports_consistent_recall() {
    let (data, obj, params) = small_setup();
    let queries: Vec<&Triplet> = data.val.iter().collect();
    let spec = RecallSpec::default();
    let rep = evaluate(obj.model(), &params, &data, &queries, "val", &spec, 1).unwrap();
    assert_eq!(rep.recall_at.keys().copied().collect::<Vec<_>>(), vec![1, 5, 10, 50]);
    let ks: Vec<f64> = rep.recall_at.values().copied().collect();
    assert!(ks.windows(2).all(|w| w[0] <= w[1]));
    assert!((rep.rmean - (rep.recall_at[&10] + rep.recall_at[&50]) / 2.0).abs() < 1e-12);
    let full = RecallSpec {
        rmean_ks: vec![10],
        subset_ks: vec![data.config.subset_size],
    };
    let rep = evaluate(obj.model(), &params, &data, &queries, "val", &full, 3).unwrap();
    assert_eq!(rep.recall_subset_at[&data.config.subset_size], 100.0);
    let too_big = RecallSpec {
        rmean_ks: vec![1000],
        subset_ks: vec![1],
    };
    assert!(evaluate(obj.model(), &params, &data, &queries, "val", &too_big, 1).is_err());
}

#[test]
fn landscape_leaves_params_and_matches_sharpness() {
    let (data, obj, params) = small_setup();
    let before = params.clone();
    let batches = ordered_batches(&data, &data.train, 16).unwrap();
    let mean = MeanOverBatches(obj.clone());
    let alphas = [-0.05, 0.0, 0.05];
    let curves = landscape_probe(&mean, &params, &batches, 3, &alphas, 9, 1).unwrap();
    assert_eq!(params, before);
    let base = dataset_loss(&obj, &params, &data, &data.train, 16).unwrap();
    for c in &curves {
        assert_eq!(c.loss_at(0.0).unwrap(), base);
        for (name, n) in &c.normalization {
            assert!((n - params.get(name).unwrap().norm()).abs() <= 1e-10 * n.max(1.0));
        }
    }
    let again = landscape_probe(&mean, &params, &batches, 3, &alphas, 9, 2).unwrap();
    assert_eq!(curves, again);

    let dirs: Vec<_> = (0..3).map(|i| normalized_direction(&params, 9, i).unwrap()).collect();
    let direct = flatness_score(&mean, &params, &batches, &dirs, 0.05).unwrap();
    let from_curves = curves.iter().map(|c| c.loss_at(0.05).unwrap() - base).sum::<f64>() / 3.0;
    assert!((direct - from_curves).abs() < 1e-12);
}

#[test]
fn landscape_rejects_bad_grid() {
    let (data, obj, params) = small_setup();
    let batches = ordered_batches(&data, &data.train, 16).unwrap();
    let mean = MeanOverBatches(obj);
    assert!(landscape_probe(&mean, &params, &batches, 1, &[0.1, 0.2], 0, 1).is_err());
    assert!(landscape_probe(&mean, &params, &batches, 1, &[0.1, 0.0], 0, 1).is_err());
    assert!(landscape_probe(&mean, &params, &batches, 0, &[0.0], 0, 1).is_err());
}

#[test]
fn landscape_csv_layout() {
    let c = LandscapeCurve {
        direction_id: 2,
        alphas: vec![0.0, 0.5],
        losses: vec![1.0, f64::NAN],
        normalization: vec![],
    };
    let mut buf = Vec::new();
    write_landscape_csv(&mut buf, &[c]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "direction_id,alpha,loss\n2,0,1\n2,0.5,NaN\n");
}
