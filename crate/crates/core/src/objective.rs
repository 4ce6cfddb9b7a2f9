//! Training objectives: something that maps parameters and a batch to a
//! scalar loss and its gradient.

use crate::diffcore::{Graph, Inputs};
use crate::error::{Error, Result};
use crate::model::{Model, MODS, REFS, TARGETS};
use crate::params::{GradientSet, ParameterSet};
use crate::scalar::Scalar;
use crate::synthcir::{Dataset, Triplet};
use crate::tensor::Tensor;

pub trait Objective<T: Scalar> {
    type Batch;

    /// One forward pass.
    fn loss(&self, params: &ParameterSet<T>, batch: &Self::Batch) -> Result<T>;

    /// One forward and one backward pass.
    fn loss_and_grad(&self, params: &ParameterSet<T>, batch: &Self::Batch) -> Result<(T, GradientSet<T>)>;
}

/// A mini-batch of `(reference, modification embedding, target)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch<T = f64> {
    pub refs: Tensor<T>,
    pub mods: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Scalar> TripletBatch<T> {
    pub fn from_triplets(dataset: &Dataset, triplets: &[&Triplet]) -> Self {
        let (refs, mods, targets) = dataset.batch_tensors(triplets);
        TripletBatch { refs, mods, targets }
    }

    pub fn len(&self) -> usize {
        self.refs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn inputs(&self) -> Inputs<T> {
        Inputs::from([
            (REFS.to_string(), self.refs.clone()),
            (MODS.to_string(), self.mods.clone()),
            (TARGETS.to_string(), self.targets.clone()),
        ])
    }
}

/// Query-to-target contrastive loss of the toy model on a batch.
#[derive(Clone, Debug)]
pub struct ContrastiveObjective {
    model: Model,
    graph: Graph,
    tau: f64,
}

impl ContrastiveObjective {
    pub fn new(model: Model, tau: f64) -> Result<Self> {
        crate::loss::LossConfig { tau }.validate()?;
        let graph = model.training_graph(tau);
        Ok(ContrastiveObjective { model, graph, tau })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }
}

impl<T: Scalar> Objective<T> for ContrastiveObjective {
    type Batch = TripletBatch<T>;

    fn loss(&self, params: &ParameterSet<T>, batch: &TripletBatch<T>) -> Result<T> {
        check_batch(batch)?;
        Ok(self.graph.eval(&batch.inputs(), params)?.item())
    }

    fn loss_and_grad(&self, params: &ParameterSet<T>, batch: &TripletBatch<T>) -> Result<(T, GradientSet<T>)> {
        check_batch(batch)?;
        let mut ex = self.graph.executor();
        let loss = ex.forward(&batch.inputs(), params)?.item();
        let grads = ex.backward(self.graph.output(), params)?;
        Ok((loss, grads))
    }
}

fn check_batch<T: Scalar>(batch: &TripletBatch<T>) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::config("contrastive batches need at least 2 triplets"));
    }
    Ok(())
}

/// `L(theta) = 1/2 |theta|^2` over trainable layers, independent of the batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct HalfSquaredNorm;

impl<T: Scalar> Objective<T> for HalfSquaredNorm {
    type Batch = ();

    fn loss(&self, params: &ParameterSet<T>, _: &()) -> Result<T> {
        let half = T::of(0.5);
        Ok(params
            .trainable()
            .map(|(_, t)| t.data().iter().map(|&v| half * v * v).sum::<T>())
            .sum())
    }

    fn loss_and_grad(&self, params: &ParameterSet<T>, batch: &()) -> Result<(T, GradientSet<T>)> {
        let loss = self.loss(params, batch)?;
        let mut grads = GradientSet::zeros_like(params);
        for (name, t) in params.trainable() {
            grads
                .get_mut(name)
                .expect("zeros_like")
                .data_mut()
                .copy_from_slice(t.data());
        }
        Ok((loss, grads))
    }
}

/// Mean of an inner objective over a list of batches.
#[derive(Clone, Debug)]
pub struct MeanOverBatches<O>(pub O);

impl<T: Scalar, O: Objective<T>> Objective<T> for MeanOverBatches<O> {
    type Batch = Vec<O::Batch>;

    fn loss(&self, params: &ParameterSet<T>, batches: &Vec<O::Batch>) -> Result<T> {
        if batches.is_empty() {
            return Err(Error::Data("no batches".into()));
        }
        let mut total = T::zero();
        for b in batches {
            total = total + self.0.loss(params, b)?;
        }
        Ok(total / T::of(batches.len() as f64))
    }

    fn loss_and_grad(&self, params: &ParameterSet<T>, batches: &Vec<O::Batch>) -> Result<(T, GradientSet<T>)> {
        if batches.is_empty() {
            return Err(Error::Data("no batches".into()));
        }
        let n = T::of(batches.len() as f64);
        let mut total = T::zero();
        let mut acc = GradientSet::zeros_like(params);
        for b in batches {
            let (l, g) = self.0.loss_and_grad(params, b)?;
            total = total + l;
            for (name, gt) in g.iter() {
                let dst = acc.get_mut(name).expect("same trainable layers");
                for (a, &v) in dst.data_mut().iter_mut().zip(gt.data()) {
                    *a = *a + v;
                }
            }
        }
        for name in params.trainable_names() {
            for a in acc.get_mut(&name).expect("zeros_like").data_mut() {
                *a = *a / n;
            }
        }
        Ok((total / n, acc))
    }
}

/// Splits `triplets` in order into batches of `batch_size`. A trailing
/// batch with a single triplet is merged into the one before it.
pub fn ordered_batches<T: Scalar>(
    dataset: &Dataset,
    triplets: &[Triplet],
    batch_size: usize,
) -> Result<Vec<TripletBatch<T>>> {
    if batch_size < 2 || triplets.len() < 2 {
        return Err(Error::config("need batch_size >= 2 and at least 2 triplets"));
    }
    let refs: Vec<&Triplet> = triplets.iter().collect();
    let mut bounds: Vec<(usize, usize)> = (0..refs.len())
        .step_by(batch_size)
        .map(|s| (s, (s + batch_size).min(refs.len())))
        .collect();
    if bounds.len() > 1 && bounds.last().map(|(s, e)| e - s) == Some(1) {
        let last = bounds.pop().expect("nonempty");
        bounds.last_mut().expect("nonempty").1 = last.1;
    }
    Ok(bounds
        .into_iter()
        .map(|(s, e)| TripletBatch::from_triplets(dataset, &refs[s..e]))
        .collect())
}
