//! The fine-tuning loop: warm-up epochs of plain steps, then two-pass
//! perturbed steps (gradient at theta, perturb, gradient at theta + delta,
//! restore, optimizer step with the second gradient).

mod record;
mod state;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::{self, RecallSpec};
use crate::model::{self, checkpoint, FinetuneMode, Model, ModelConfig};
use crate::objective::{ordered_batches, ContrastiveObjective, MeanOverBatches, Objective, TripletBatch};
use crate::optim::OptimizerKind;
use crate::params::ParameterSet;
use crate::perturb::{self, PerturbConfig, PerturbKind, Perturbation};
use crate::scalar::Scalar;
use crate::synthcir::{Dataset, Triplet};

pub use record::{EpochRow, RunRecord, METRICS_HEADER};
pub use state::{PassCounter, RngStreams, TrainState};

/// Largest number of training queries used for train-split recall.
pub const TRAIN_EVAL_CAP: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::config(format!("unknown schedule `{s}`"))),
        }
    }
}

/// `eta0 * (1 + cos(pi * t / T)) / 2`.
pub fn cosine_lr(eta0: f64, t: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return eta0;
    }
    eta0 * 0.5 * (1.0 + (std::f64::consts::PI * t / total).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub rho: f64,
    pub eta0: f64,
    pub schedule: Schedule,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub tau: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub finetune_mode: FinetuneMode,
    pub recall: RecallSpec,
    /// Write `epoch_<n>.ckpt` every this many epochs; 0 keeps only the final and best.
    pub checkpoint_every: usize,
    /// Fill the `seconds` column of `metrics.csv`. Off by default so reruns are byte-identical.
    pub log_seconds: bool,
    /// Evaluation threads; does not affect results.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 1e-3,
            rho: 1.0,
            eta0: 1e-3,
            schedule: Schedule::Cosine,
            total_epochs: 60,
            warmup_epochs: 3,
            batch_size: 64,
            optimizer: OptimizerKind::adamw_default(),
            tau: crate::loss::DEFAULT_TAU,
            eval_every: 1,
            seed: 0,
            finetune_mode: FinetuneMode::Full,
            recall: RecallSpec::default(),
            checkpoint_every: 0,
            log_seconds: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.perturb_config().validate()?;
        self.optimizer.validate()?;
        crate::loss::LossConfig { tau: self.tau }.validate()?;
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if self.recall.rmean_ks.is_empty() || self.recall.rmean_ks.contains(&0) {
            return Err(Error::config("recall K set must be nonempty and positive"));
        }
        Ok(())
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        PerturbConfig {
            gamma: self.gamma,
            rho: self.rho,
            seed: self.seed,
        }
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.eta0,
            Schedule::Cosine => cosine_lr(self.eta0, epoch as f64, self.total_epochs as f64),
        }
    }
}

fn layer_norms<T: Scalar>(params: &ParameterSet<T>) -> String {
    params
        .trainable()
        .map(|(k, t)| format!("{k}={:.3e}", t.norm().as_f64()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn numeric_abort<T: Scalar>(err: Error, pass: &str, params: &ParameterSet<T>, gamma: f64) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Numeric(_) => Error::Numeric(format!(
            "{err} during the {pass} pass (gamma={gamma}; layer norms: {})",
            layer_norms(params)
        )),
        other => other,
    }
}

fn checked_loss_and_grad<T: Scalar, O: Objective<T>>(
    objective: &O,
    state: &mut TrainState<T>,
    batch: &O::Batch,
    pass: &str,
    gamma: f64,
) -> Result<(T, crate::params::GradientSet<T>)> {
    state.passes.forward += 1;
    state.passes.backward += 1;
    let out = objective
        .loss_and_grad(&state.params, batch)
        .map_err(|e| numeric_abort(e, pass, &state.params, gamma))?;
    if !out.0.is_finite() || !out.1.all_finite() {
        return Err(numeric_abort(
            Error::Numeric("non-finite loss or gradient".into()),
            pass,
            &state.params,
            gamma,
        ));
    }
    Ok(out)
}

/// One forward and backward pass at theta and an optimizer step. Returns the loss.
pub fn baseline_step<T: Scalar, O: Objective<T>>(
    state: &mut TrainState<T>,
    objective: &O,
    batch: &O::Batch,
    lr: f64,
) -> Result<T> {
    let (loss, grads) = checked_loss_and_grad(objective, state, batch, "baseline", 0.0)?;
    state.optimizer.step(&mut state.params, &grads, lr)?;
    state.steps += 1;
    Ok(loss)
}

/// Result of a perturbed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome<T> {
    /// Loss at the perturbed weights, the pass that drives the update.
    pub loss: T,
    pub kind: PerturbKind,
}

/// Builds the perturbation for one step. Adversarial steps spend a forward
/// and backward pass at theta; random steps draw from the noise stream.
fn build_delta<T: Scalar, O: Objective<T>>(
    state: &mut TrainState<T>,
    objective: &O,
    batch: &O::Batch,
    config: &PerturbConfig,
) -> Result<Perturbation<T>> {
    match perturb::choose_kind(config, &mut state.rngs.kind) {
        PerturbKind::Adversarial => {
            let (_, grads) = checked_loss_and_grad(objective, state, batch, "normal", config.gamma)?;
            perturb::adversarial_perturbation(&state.params, &grads, config.gamma)
        }
        PerturbKind::Random => perturb::random_perturbation(&state.params, config.gamma, &mut state.rngs.noise),
    }
}

/// Gradient at theta, perturbation, gradient at theta + delta, restore from a
/// snapshot, then an optimizer step with the perturbed gradient. Theta is
/// restored even when the perturbed pass fails.
pub fn wrf_step<T: Scalar, O: Objective<T>>(
    state: &mut TrainState<T>,
    objective: &O,
    batch: &O::Batch,
    config: &PerturbConfig,
    lr: f64,
) -> Result<StepOutcome<T>> {
    let delta = build_delta(state, objective, batch, config)?;
    let snapshot = state.params.clone();
    perturb::apply_in_place(&mut state.params, &delta)?;
    let perturbed = checked_loss_and_grad(objective, state, batch, "perturbed", config.gamma);
    perturb::snapshot_restore(&mut state.params, &snapshot)?;
    let (loss, grads) = perturbed?;
    state.optimizer.step(&mut state.params, &grads, lr)?;
    state.steps += 1;
    match delta.kind {
        PerturbKind::Adversarial => state.adversarial_steps += 1,
        PerturbKind::Random => state.random_steps += 1,
    }
    Ok(StepOutcome { loss, kind: delta.kind })
}

/// The SGD update written literally as `(theta + delta) - lr * g' - delta`,
/// without a snapshot. Used to cross-check [`wrf_step`].
pub fn literal_sgd_wrf_step<T: Scalar, O: Objective<T>>(
    state: &mut TrainState<T>,
    objective: &O,
    batch: &O::Batch,
    config: &PerturbConfig,
    lr: f64,
) -> Result<StepOutcome<T>> {
    if state.optimizer.kind() != OptimizerKind::Sgd {
        return Err(Error::config("the literal update is defined for SGD only"));
    }
    let delta = build_delta(state, objective, batch, config)?;
    perturb::apply_in_place(&mut state.params, &delta)?;
    let (loss, grads) = checked_loss_and_grad(objective, state, batch, "perturbed", config.gamma)?;
    let lr_t = T::of(lr);
    for (name, g) in grads.iter() {
        let d = &delta.get(name).expect("same trainable layers").delta;
        let w = state.params.get_mut(name).expect("checked");
        for ((wv, &gv), &dv) in w.data_mut().iter_mut().zip(g.data()).zip(d.data()) {
            *wv = *wv - lr_t * gv - dv;
        }
    }
    state.steps += 1;
    match delta.kind {
        PerturbKind::Adversarial => state.adversarial_steps += 1,
        PerturbKind::Random => state.random_steps += 1,
    }
    Ok(StepOutcome { loss, kind: delta.kind })
}

/// A finished (or aborted) run.
#[derive(Clone, Debug)]
pub struct TrainRun<T = f64> {
    pub record: RunRecord,
    pub best_params: ParameterSet<T>,
    pub final_params: ParameterSet<T>,
}

/// Hex SHA-256 of the resolved configuration.
pub fn config_hash(config: &TrainConfig, model_config: &ModelConfig, dataset: &Dataset) -> String {
    let mut c = config.clone();
    c.threads = 0;
    c.log_seconds = false;
    let text = format!("{c:?}\n{model_config:?}\n{:?}\n{}", dataset.config, dataset.train.len());
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Fixed seeded subset of training queries for train-split recall.
pub fn train_eval_queries(dataset: &Dataset, seed: u64) -> Vec<&Triplet> {
    if dataset.train.len() <= TRAIN_EVAL_CAP {
        return dataset.train.iter().collect();
    }
    let mut idx: Vec<usize> = (0..dataset.train.len()).collect();
    idx.shuffle(&mut state::stream(seed, 4));
    let mut keep = idx[..TRAIN_EVAL_CAP].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| &dataset.train[i]).collect()
}

/// Initializes a model per `model_config` and the configured fine-tuning
/// mode, then trains it.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainRun<T>> {
    let mut params = model::init_model::<T>(model_config)?;
    if let FinetuneMode::Lora { .. } = config.finetune_mode {
        params = model::set_finetune_mode(model_config, &params, config.finetune_mode, model_config.seed)?;
    }
    train_from(config, model_config, params, dataset, out_dir)
}

/// Trains starting from `params`, whose trainable flags must already match
/// `config.finetune_mode`.
pub fn train_from<T: Scalar>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    params: ParameterSet<T>,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainRun<T>> {
    config.validate()?;
    model_config.validate()?;
    params.validate()?;
    if model::detect_mode(&params) != config.finetune_mode {
        return Err(Error::config(format!(
            "parameters are in {} mode but the config asks for {}",
            model::detect_mode(&params).name(),
            config.finetune_mode.name()
        )));
    }
    if dataset.train.len() < 2 || dataset.val.is_empty() {
        return Err(Error::Data("training needs at least 2 train and 1 val triplet".into()));
    }
    let model = Model::new(model_config.clone(), config.finetune_mode)?;
    let objective = ContrastiveObjective::new(model, config.tau)?;
    let train_queries = train_eval_queries(dataset, config.seed);
    let val_queries: Vec<&Triplet> = dataset.val.iter().collect();
    let val_batches: Option<Vec<TripletBatch<T>>> = if dataset.val.len() >= 2 {
        Some(ordered_batches(dataset, &dataset.val, config.batch_size)?)
    } else {
        None
    };

    let mut record = RunRecord::new(config_hash(config, model_config, dataset), config.seed);
    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(w, "{METRICS_HEADER}")?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };

    let mut state = TrainState::new(params, config.optimizer, config.seed);
    let mut best_params = state.params.clone();
    let pcfg = config.perturb_config();
    let n = dataset.train.len();

    for epoch in 0..config.total_epochs {
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rngs.shuffle);
        let (adv0, rand0) = (state.adversarial_steps, state.random_steps);
        let perturbed = epoch >= config.warmup_epochs && config.gamma > 0.0;
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let triplets: Vec<&Triplet> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let batch = TripletBatch::<T>::from_triplets(dataset, &triplets);
            let step = if perturbed {
                wrf_step(&mut state, &objective, &batch, &pcfg, lr).map(|o| o.loss)
            } else {
                baseline_step(&mut state, &objective, &batch, lr)
            };
            let loss = match step {
                Ok(l) => l,
                Err(e) => {
                    if let Some(w) = metrics.as_mut() {
                        w.flush()?;
                    }
                    return Err(e);
                }
            };
            loss_sum += loss.as_f64();
            batches += 1;
        }
        let seconds = started.elapsed().as_secs_f64();
        state.epoch = epoch + 1;

        let mut row = EpochRow {
            epoch: epoch + 1,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss: None,
            train: None,
            val: None,
            gap: None,
            lr,
            seconds,
            adv_steps: state.adversarial_steps - adv0,
            rand_steps: state.random_steps - rand0,
        };
        let last = epoch + 1 == config.total_epochs;
        if (epoch + 1) % config.eval_every == 0 || last {
            let m = objective.model();
            let tr = evalkit::evaluate(m, &state.params, dataset, &train_queries, "train", &config.recall, config.threads)?;
            let va = evalkit::evaluate(m, &state.params, dataset, &val_queries, "val", &config.recall, config.threads)?;
            row.gap = Some(evalkit::generalization_gap(&tr, &va)?);
            if let Some(vb) = &val_batches {
                row.val_loss = Some(MeanOverBatches(objective.clone()).loss(&state.params, vb)?.as_f64());
            }
            let improved = record.best_val_rmean().is_none_or(|b| va.rmean > b);
            row.train = Some(tr);
            row.val = Some(va);
            if improved {
                record.best_epoch = Some(epoch + 1);
                best_params = state.params.clone();
                if let Some(dir) = out_dir {
                    checkpoint::save(&state.params, &dir.join("best.ckpt"))?;
                }
            }
        }
        if let Some(w) = metrics.as_mut() {
            row.write_csv(w, config.log_seconds)?;
            w.flush()?;
        }
        record.rows.push(row);
        if let Some(dir) = out_dir {
            let periodic = config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
            if periodic || last {
                checkpoint::save(&state.params, &dir.join(format!("epoch_{}.ckpt", epoch + 1)))?;
                fs::write(dir.join(format!("epoch_{}.state", epoch + 1)), state.describe())?;
            }
        }
    }
    record.passes = state.passes;
    Ok(TrainRun {
        record,
        best_params,
        final_params: state.params,
    })
}
