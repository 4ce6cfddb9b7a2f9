//! Named parameter collections and their gradients.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f64> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of named layer tensors with per-layer trainable flags.
///
/// Iteration order is insertion order and therefore deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet<T = f64> {
    layers: IndexMap<String, Layer<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            layers: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.layers.contains_key(&name) {
            return Err(Error::config(format!("duplicate layer name `{name}`")));
        }
        self.layers.insert(name, Layer { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layers.get(name).map(|l| &l.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layers.get_mut(name).map(|l| &mut l.tensor)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.layers.get(name).is_some_and(|l| l.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let layer = self
            .layers
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("no layer named `{name}`")))?;
        layer.trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Layer<T>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Layer<T>)> {
        self.layers.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable layers in order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, l)| l.trainable).map(|(k, l)| (k, &l.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|(k, _)| k.to_string()).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total number of scalar values across all layers.
    pub fn num_values(&self) -> usize {
        self.layers.values().map(|l| l.tensor.len()).sum()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Checks that at least one layer is trainable.
    pub fn validate(&self) -> Result<()> {
        if self.trainable().next().is_none() {
            return Err(Error::config("parameter set has no trainable layer"));
        }
        Ok(())
    }

    /// Copies every layer value from `snapshot`, which must share names and shapes.
    pub fn copy_from(&mut self, snapshot: &ParameterSet<T>) -> Result<()> {
        if self.layers.len() != snapshot.layers.len() {
            return Err(Error::shape("restore", "layer count differs from snapshot"));
        }
        for ((name, layer), (snap_name, snap)) in self.layers.iter_mut().zip(&snapshot.layers) {
            if name != snap_name || !layer.tensor.same_shape(&snap.tensor) {
                return Err(Error::shape(
                    format!("restore `{name}`"),
                    format!("snapshot layer `{snap_name}` does not match"),
                ));
            }
            layer.tensor.data_mut().copy_from_slice(snap.tensor.data());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            layers: self
                .layers
                .iter()
                .map(|(k, l)| {
                    (
                        k.clone(),
                        Layer {
                            tensor: l.tensor.cast(),
                            trainable: l.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Gradients keyed by trainable layer name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradientSet<T = f64> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    /// All-zero gradients for every trainable layer of `params`.
    pub fn zeros_like(params: &ParameterSet<T>) -> Self {
        GradientSet {
            grads: params
                .trainable()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }

    /// Checks key set and shapes against the trainable layers of `params`.
    pub fn check_matches(&self, params: &ParameterSet<T>) -> Result<()> {
        let expected: Vec<_> = params.trainable().collect();
        if expected.len() != self.grads.len() {
            return Err(Error::shape(
                "gradient set",
                format!(
                    "{} gradients for {} trainable layers",
                    self.grads.len(),
                    expected.len()
                ),
            ));
        }
        for (name, tensor) in expected {
            match self.grads.get(name) {
                Some(g) if g.same_shape(tensor) => {}
                Some(g) => {
                    return Err(Error::shape(
                        format!("gradient `{name}`"),
                        format!("shape {:?} vs parameter {:?}", g.shape(), tensor.shape()),
                    ))
                }
                None => {
                    return Err(Error::shape(
                        "gradient set",
                        format!("missing gradient for `{name}`"),
                    ))
                }
            }
        }
        Ok(())
    }
}
