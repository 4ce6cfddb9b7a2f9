use std::io::Write;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::objective::{ordered_batches, MeanOverBatches, Objective, TripletBatch};
use crate::params::ParameterSet;
use crate::perturb::{self, PerturbKind, Perturbation};
use crate::scalar::Scalar;
use crate::synthcir::{Dataset, Triplet};
use crate::tensor::Tensor;

/// Loss along one normalized direction.
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeCurve {
    pub direction_id: usize,
    pub alphas: Vec<f64>,
    /// NaN where the loss was not finite.
    pub losses: Vec<f64>,
    /// Per-layer norm of the direction after rescaling (equals the weight norm).
    pub normalization: Vec<(String, f64)>,
}

impl LandscapeCurve {
    pub fn loss_at(&self, alpha: f64) -> Option<f64> {
        self.alphas
            .iter()
            .position(|&a| (a - alpha).abs() < 1e-12)
            .map(|i| self.losses[i])
    }
}

/// Mean loss over `triplets` split in order into batches of `batch_size`.
pub fn dataset_loss<T: Scalar, O>(
    objective: &O,
    params: &ParameterSet<T>,
    dataset: &Dataset,
    triplets: &[Triplet],
    batch_size: usize,
) -> Result<T>
where
    O: Objective<T, Batch = TripletBatch<T>> + Clone,
{
    let batches = ordered_batches(dataset, triplets, batch_size)?;
    MeanOverBatches(objective.clone()).loss(params, &batches)
}

/// Seeded Gaussian direction rescaled per layer so `|d_l| = |theta_l|`.
pub fn normalized_direction<T: Scalar>(params: &ParameterSet<T>, seed: u64, id: usize) -> Result<Perturbation<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let dirs: IndexMap<String, Tensor<T>> = params
        .trainable()
        .map(|(name, t)| {
            let data = (0..t.len())
                .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            (name.to_string(), Tensor::from_raw(t.shape().to_vec(), data))
        })
        .collect();
    Perturbation::from_directions(params, dirs, 1.0, PerturbKind::Random)
}

fn check_grid(alphas: &[f64]) -> Result<()> {
    if !alphas.contains(&0.0) {
        return Err(Error::config("alpha grid must include 0"));
    }
    if alphas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config("alpha grid must be strictly increasing"));
    }
    Ok(())
}

fn loss_or_nan<T: Scalar, O: Objective<T>>(objective: &O, params: &ParameterSet<T>, batch: &O::Batch) -> Result<f64> {
    match objective.loss(params, batch) {
        Ok(v) if v.is_finite() => Ok(v.as_f64()),
        Ok(_) | Err(Error::NonFinite { .. }) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Evaluates `L(theta + alpha * d)` along `n_directions` normalized random
/// directions. `params` is never modified. Directions run on up to
/// `threads` threads; output order is by direction id.
pub fn landscape_probe<T: Scalar, O>(
    objective: &O,
    params: &ParameterSet<T>,
    batch: &O::Batch,
    n_directions: usize,
    alphas: &[f64],
    seed: u64,
    threads: usize,
) -> Result<Vec<LandscapeCurve>>
where
    O: Objective<T> + Sync,
    O::Batch: Sync,
{
    if n_directions == 0 {
        return Err(Error::config("need at least one direction"));
    }
    check_grid(alphas)?;
    let base = loss_or_nan(objective, params, batch)?;
    let curve = |id: usize| -> Result<LandscapeCurve> {
        let dir = normalized_direction(params, seed, id)?;
        let mut losses = Vec::with_capacity(alphas.len());
        for &a in alphas {
            losses.push(if a == 0.0 {
                base
            } else {
                loss_or_nan(objective, &perturb::apply(params, &dir.scaled(a))?, batch)?
            });
        }
        Ok(LandscapeCurve {
            direction_id: id,
            alphas: alphas.to_vec(),
            losses,
            normalization: dir.iter().map(|(k, l)| (k.to_string(), l.delta_norm.as_f64())).collect(),
        })
    };
    let threads = threads.clamp(1, n_directions);
    if threads == 1 {
        return (0..n_directions).map(curve).collect();
    }
    let mut out: Vec<Option<Result<LandscapeCurve>>> = (0..n_directions).map(|_| None).collect();
    std::thread::scope(|s| {
        for (t, slots) in out.chunks_mut(n_directions.div_ceil(threads)).enumerate() {
            let curve = &curve;
            let start = t * n_directions.div_ceil(threads);
            s.spawn(move || {
                for (i, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(curve(start + i));
                }
            });
        }
    });
    out.into_iter().map(|c| c.expect("every slot filled")).collect()
}

/// Mean over directions of `L(theta + alpha * d) - L(theta)`.
pub fn flatness_score<T: Scalar, O: Objective<T>>(
    objective: &O,
    params: &ParameterSet<T>,
    batch: &O::Batch,
    directions: &[Perturbation<T>],
    alpha: f64,
) -> Result<f64> {
    if directions.is_empty() {
        return Err(Error::config("need at least one direction"));
    }
    let mut total = 0.0;
    for d in directions {
        total += super::sharpness(objective, params, &d.scaled(alpha), batch)?.as_f64();
    }
    Ok(total / directions.len() as f64)
}

/// Writes curves as `direction_id,alpha,loss` rows.
pub fn write_landscape_csv<W: Write>(mut out: W, curves: &[LandscapeCurve]) -> Result<()> {
    writeln!(out, "direction_id,alpha,loss")?;
    for c in curves {
        for (a, l) in c.alphas.iter().zip(&c.losses) {
            writeln!(out, "{},{},{}", c.direction_id, a, l)?;
        }
    }
    Ok(())
}
