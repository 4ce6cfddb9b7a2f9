//! Toy composed-retrieval model.
//!
//! The query branch concatenates a reference feature vector with a
//! modification embedding and runs it through an MLP; the target branch is a
//! single linear projection. Both outputs are L2-normalized per row. Feature
//! vectors are treated as fixed encoder outputs, so only these two branches
//! carry parameters.
//!
//! Weight matrices are stored `out x in` and applied as `x W^T + b`. In
//! low-rank mode every weight matrix `W` is frozen and used as `W + B A`,
//! with `A: r x in`, `B: out x r`.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, GraphBuilder, Inputs, NodeId};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const REFS: &str = "refs";
pub const MODS: &str = "mods";
pub const TARGETS: &str = "targets";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    Full,
    Lora { rank: usize },
}

impl FinetuneMode {
    pub fn name(&self) -> String {
        match self {
            FinetuneMode::Full => "full".into(),
            FinetuneMode::Lora { rank } => format!("lora({rank})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_ref: usize,
    pub d_mod: usize,
    pub hidden: Vec<usize>,
    pub d_out: usize,
    pub activation: Activation,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_ref: 32,
            d_mod: 8,
            hidden: vec![64, 64],
            d_out: 16,
            activation: Activation::Relu,
            init_scale: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_ref, self.d_mod, self.d_out];
        if dims.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::config("model dimensions must be at least 1"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config(format!(
                "init_scale must be positive and finite, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    /// `(in, out)` widths of each query-branch layer.
    pub fn query_layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.d_ref + self.d_mod];
        widths.extend(&self.hidden);
        widths.push(self.d_out);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

pub fn query_weight(i: usize) -> String {
    format!("query.{i}.weight")
}

pub fn query_bias(i: usize) -> String {
    format!("query.{i}.bias")
}

pub const TARGET_WEIGHT: &str = "target.weight";
pub const TARGET_BIAS: &str = "target.bias";

pub fn lora_a(weight: &str) -> String {
    format!("{}.lora_a", weight.trim_end_matches(".weight"))
}

pub fn lora_b(weight: &str) -> String {
    format!("{}.lora_b", weight.trim_end_matches(".weight"))
}

/// Every weight matrix of the model with its `(out, in)` shape.
fn weight_layers(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut out: Vec<_> = config
        .query_layers()
        .into_iter()
        .enumerate()
        .map(|(i, (fan_in, fan_out))| (query_weight(i), fan_out, fan_in))
        .collect();
    out.push((TARGET_WEIGHT.to_string(), config.d_out, config.d_ref));
    out
}

fn uniform_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_raw(vec![rows, cols], data)
}

/// Draws fresh parameters: weights uniform in `±init_scale/sqrt(fan_in)`,
/// biases zero. Every layer is trainable.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParameterSet::new();
    for (i, (fan_in, fan_out)) in config.query_layers().into_iter().enumerate() {
        let bound = config.init_scale / (fan_in as f64).sqrt();
        params.insert(query_weight(i), uniform_matrix(&mut rng, fan_out, fan_in, bound), true)?;
        params.insert(query_bias(i), Tensor::zeros(vec![fan_out]), true)?;
    }
    let bound = config.init_scale / (config.d_ref as f64).sqrt();
    params.insert(
        TARGET_WEIGHT,
        uniform_matrix(&mut rng, config.d_out, config.d_ref, bound),
        true,
    )?;
    params.insert(TARGET_BIAS, Tensor::zeros(vec![config.d_out]), true)?;
    Ok(params)
}

/// Switches a parameter set between full and low-rank fine-tuning.
///
/// `Lora { rank }` freezes every weight matrix and adds trainable factors
/// `A` (seeded uniform) and `B` (zero), so the effective weights are
/// unchanged at the moment of switching. `Full` folds any adapters back into
/// their base weights and marks everything trainable.
pub fn set_finetune_mode<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterSet<T>,
    mode: FinetuneMode,
    seed: u64,
) -> Result<ParameterSet<T>> {
    let layers = weight_layers(config);
    let has_adapters = layers.iter().any(|(w, ..)| params.contains(&lora_a(w)));
    let mut base = ParameterSet::new();
    for (name, layer) in params.iter() {
        if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
            continue;
        }
        let mut tensor = layer.tensor.clone();
        if has_adapters && name.ends_with(".weight") {
            merge_adapter(params, name, &mut tensor)?;
        }
        base.insert(name, tensor, true)?;
    }
    match mode {
        FinetuneMode::Full => Ok(base),
        FinetuneMode::Lora { rank } => {
            if rank == 0 {
                return Err(Error::config("adapter rank must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = ParameterSet::new();
            for (name, layer) in base.iter() {
                let is_weight = name.ends_with(".weight");
                out.insert(name, layer.tensor.clone(), !is_weight)?;
            }
            for (name, fan_out, fan_in) in layers {
                if rank > fan_in.min(fan_out) {
                    return Err(Error::config(format!(
                        "rank {rank} exceeds min({fan_out}, {fan_in}) for `{name}`"
                    )));
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                out.insert(lora_a(&name), uniform_matrix(&mut rng, rank, fan_in, bound), true)?;
                out.insert(lora_b(&name), Tensor::zeros(vec![fan_out, rank]), true)?;
            }
            Ok(out)
        }
    }
}

fn merge_adapter<T: Scalar>(params: &ParameterSet<T>, weight: &str, into: &mut Tensor<T>) -> Result<()> {
    let (Some(a), Some(b)) = (params.get(&lora_a(weight)), params.get(&lora_b(weight))) else {
        return Ok(());
    };
    let (out, r, inp) = (b.rows(), b.cols(), a.cols());
    let delta = crate::diffcore::kernels::matmul(b.data(), a.data(), out, r, inp);
    if delta.len() != into.len() {
        return Err(Error::shape(weight, "adapter factors do not match base weight"));
    }
    for (w, d) in into.data_mut().iter_mut().zip(delta) {
        *w = *w + d;
    }
    Ok(())
}

/// Mode detected from the layers present in a parameter set.
pub fn detect_mode<T: Scalar>(params: &ParameterSet<T>) -> FinetuneMode {
    match params.get(&lora_a(TARGET_WEIGHT)) {
        Some(a) => FinetuneMode::Lora { rank: a.rows() },
        None => FinetuneMode::Full,
    }
}

/// Architecture plus its prebuilt computation graphs.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    mode: FinetuneMode,
    query: Graph,
    target: Graph,
}

impl Model {
    pub fn new(config: ModelConfig, mode: FinetuneMode) -> Result<Self> {
        config.validate()?;
        let mut g = GraphBuilder::new();
        build_query(&mut g, &config, mode);
        let query = g.build();
        let mut g = GraphBuilder::new();
        build_target(&mut g, mode);
        let target = g.build();
        Ok(Model {
            config,
            mode,
            query,
            target,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> FinetuneMode {
        self.mode
    }

    /// Graph computing the query-to-target contrastive loss for one batch,
    /// with `refs`, `mods` and `targets` as inputs.
    pub fn training_graph(&self, tau: f64) -> Graph {
        self.training_graph_builder(tau).build()
    }

    pub fn training_graph_builder(&self, tau: f64) -> GraphBuilder {
        let mut g = GraphBuilder::new();
        let u = build_query(&mut g, &self.config, self.mode);
        let v = build_target(&mut g, self.mode);
        let logits = g.pairwise_dot(u, v);
        let logits = g.scale(logits, tau);
        g.softmax_xent_diag(logits);
        g
    }

    /// Normalized query embeddings for a batch of references and modification embeddings.
    pub fn forward_query<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        refs: &Tensor<T>,
        mods: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if refs.cols() != self.config.d_ref || mods.cols() != self.config.d_mod {
            return Err(Error::shape(
                "forward_query",
                format!(
                    "expected widths ({}, {}), got {:?} and {:?}",
                    self.config.d_ref,
                    self.config.d_mod,
                    refs.shape(),
                    mods.shape()
                ),
            ));
        }
        if refs.rows() != mods.rows() {
            return Err(Error::shape(
                "forward_query",
                format!("batch sizes differ: {} vs {}", refs.rows(), mods.rows()),
            ));
        }
        let inputs = Inputs::from([(REFS.to_string(), refs.clone()), (MODS.to_string(), mods.clone())]);
        self.query.eval(&inputs, params)
    }

    /// Normalized target embeddings.
    pub fn forward_target<T: Scalar>(&self, params: &ParameterSet<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
        if targets.cols() != self.config.d_ref {
            return Err(Error::shape(
                "forward_target",
                format!("expected width {}, got {:?}", self.config.d_ref, targets.shape()),
            ));
        }
        let inputs = Inputs::from([(TARGETS.to_string(), targets.clone())]);
        self.target.eval(&inputs, params)
    }
}

fn linear(g: &mut GraphBuilder, x: NodeId, weight: &str, bias: &str, mode: FinetuneMode) -> NodeId {
    let w = g.param(weight);
    let w = match mode {
        FinetuneMode::Full => w,
        FinetuneMode::Lora { .. } => {
            let a = g.param(lora_a(weight));
            let b = g.param(lora_b(weight));
            let ba = g.matmul(b, a);
            g.add(w, ba)
        }
    };
    let b = g.param(bias);
    let y = g.pairwise_dot(x, w);
    g.bias_add(y, b)
}

fn build_query(g: &mut GraphBuilder, config: &ModelConfig, mode: FinetuneMode) -> NodeId {
    let refs = g.input(REFS);
    let mods = g.input(MODS);
    let mut h = g.concat_cols(refs, mods);
    let n = config.query_layers().len();
    for i in 0..n {
        h = linear(g, h, &query_weight(i), &query_bias(i), mode);
        if i + 1 < n {
            h = match config.activation {
                Activation::Tanh => g.tanh(h),
                Activation::Relu => g.relu(h),
            };
        }
    }
    g.l2_normalize_rows(h)
}

fn build_target(g: &mut GraphBuilder, mode: FinetuneMode) -> NodeId {
    let t = g.input(TARGETS);
    let h = linear(g, t, TARGET_WEIGHT, TARGET_BIAS, mode);
    g.l2_normalize_rows(h)
}

#[cfg(test)]
mod tests;
