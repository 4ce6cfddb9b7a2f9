//! Weight perturbations under a layer-wise norm budget.
//!
//! For each trainable layer `l` the perturbation satisfies
//! `|delta_l| = gamma * |theta_l|`. The adversarial kind points along the
//! layer gradient (the ascent direction); the random kind draws a standard
//! normal direction and rescales it to the same budget.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{GradientSet, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Norms below this are treated as zero when normalizing a direction.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbKind {
    Adversarial,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbConfig {
    pub gamma: f64,
    /// Probability that a step uses an adversarial rather than random perturbation.
    pub rho: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            gamma: 1e-3,
            rho: 1.0,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDelta<T = f64> {
    pub delta: Tensor<T>,
    pub delta_norm: T,
    pub weight_norm: T,
}

/// Per-layer perturbation tensors for the trainable layers of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<T = f64> {
    layers: IndexMap<String, LayerDelta<T>>,
    pub kind: PerturbKind,
    pub gamma: f64,
}

impl<T: Scalar> Perturbation<T> {
    pub fn get(&self, name: &str) -> Option<&LayerDelta<T>> {
        self.layers.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerDelta<T>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// A perturbation of zeros over every trainable layer.
    pub fn zeros(params: &ParameterSet<T>, kind: PerturbKind) -> Self {
        let layers = params
            .trainable()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    LayerDelta {
                        delta: Tensor::zeros(t.shape().to_vec()),
                        delta_norm: T::zero(),
                        weight_norm: t.norm(),
                    },
                )
            })
            .collect();
        Perturbation {
            layers,
            kind,
            gamma: 0.0,
        }
    }

    /// Multiplies every layer by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let f = T::of(factor);
        let layers = self
            .layers
            .iter()
            .map(|(k, l)| {
                let delta = l.delta.map(|v| v * f);
                let delta_norm = delta.norm();
                (
                    k.clone(),
                    LayerDelta {
                        delta,
                        delta_norm,
                        weight_norm: l.weight_norm,
                    },
                )
            })
            .collect();
        Perturbation {
            layers,
            kind: self.kind,
            gamma: self.gamma * factor.abs(),
        }
    }

    /// Builds a perturbation from per-layer directions, each rescaled so
    /// that its norm equals `gamma` times the matching weight norm. Layers
    /// with a (near) zero direction or weight stay zero.
    pub fn from_directions(
        params: &ParameterSet<T>,
        mut directions: IndexMap<String, Tensor<T>>,
        gamma: f64,
        kind: PerturbKind,
    ) -> Result<Self> {
        let g = T::of(gamma);
        let eps = T::of(ZERO_NORM);
        let mut layers = IndexMap::new();
        for (name, theta) in params.trainable() {
            let dir = directions
                .swap_remove(name)
                .ok_or_else(|| Error::shape("perturbation", format!("no direction for `{name}`")))?;
            if !dir.same_shape(theta) {
                return Err(Error::shape(
                    format!("perturbation `{name}`"),
                    format!("direction {:?} vs weight {:?}", dir.shape(), theta.shape()),
                ));
            }
            let weight_norm = theta.norm();
            let dir_norm = dir.norm();
            let (delta, delta_norm) = if gamma == 0.0 || dir_norm < eps || weight_norm < eps {
                (Tensor::zeros(theta.shape().to_vec()), T::zero())
            } else {
                let scale = g * weight_norm / dir_norm;
                let d = dir.map(|v| v * scale);
                let n = d.norm();
                (d, n)
            };
            layers.insert(
                name.to_string(),
                LayerDelta {
                    delta,
                    delta_norm,
                    weight_norm,
                },
            );
        }
        Ok(Perturbation { layers, kind, gamma })
    }
}

/// `delta_l = gamma * (g_l / |g_l|) * |theta_l|` for every trainable layer.
pub fn adversarial_perturbation<T: Scalar>(
    params: &ParameterSet<T>,
    grads: &GradientSet<T>,
    gamma: f64,
) -> Result<Perturbation<T>> {
    check_gamma(gamma)?;
    grads.check_matches(params)?;
    if !grads.all_finite() {
        return Err(Error::Numeric("gradient contains non-finite values".into()));
    }
    let directions = grads.iter().map(|(k, g)| (k.to_string(), g.clone())).collect();
    Perturbation::from_directions(params, directions, gamma, PerturbKind::Adversarial)
}

/// Standard-normal direction per layer, rescaled to the same budget as
/// [`adversarial_perturbation`].
pub fn random_perturbation<T: Scalar, R: Rng + ?Sized>(
    params: &ParameterSet<T>,
    gamma: f64,
    rng: &mut R,
) -> Result<Perturbation<T>> {
    check_gamma(gamma)?;
    let directions = params
        .trainable()
        .map(|(name, t)| {
            let data = (0..t.len())
                .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            (name.to_string(), Tensor::from_raw(t.shape().to_vec(), data))
        })
        .collect();
    Perturbation::from_directions(params, directions, gamma, PerturbKind::Random)
}

/// One Bernoulli(rho) draw: adversarial with probability `rho`.
pub fn choose_kind<R: Rng + ?Sized>(config: &PerturbConfig, rng: &mut R) -> PerturbKind {
    // always consume one draw so the stream position does not depend on rho
    let u: f64 = rng.random();
    if u < config.rho {
        PerturbKind::Adversarial
    } else {
        PerturbKind::Random
    }
}

/// Adds `delta` to the trainable layers in place.
pub fn apply_in_place<T: Scalar>(params: &mut ParameterSet<T>, delta: &Perturbation<T>) -> Result<()> {
    for (name, layer) in delta.iter() {
        let target = params
            .get_mut(name)
            .ok_or_else(|| Error::shape("apply", format!("no parameter `{name}`")))?;
        if !target.same_shape(&layer.delta) {
            return Err(Error::shape(
                format!("apply `{name}`"),
                format!("delta {:?} vs weight {:?}", layer.delta.shape(), target.shape()),
            ));
        }
        for (w, &d) in target.data_mut().iter_mut().zip(layer.delta.data()) {
            *w = *w + d;
        }
    }
    Ok(())
}

/// Returns `params + delta`.
pub fn apply<T: Scalar>(params: &ParameterSet<T>, delta: &Perturbation<T>) -> Result<ParameterSet<T>> {
    let mut out = params.clone();
    apply_in_place(&mut out, delta)?;
    Ok(out)
}

/// Restores `params` from the snapshot taken before a perturbation was applied.
pub fn snapshot_restore<T: Scalar>(params: &mut ParameterSet<T>, snapshot: &ParameterSet<T>) -> Result<()> {
    params.copy_from(snapshot)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("gamma must be finite and >= 0, got {gamma}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{gaussian, rng};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(theta: &[f64]) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(theta.to_vec()).unwrap(), true).unwrap();
        p
    }

    fn grads_of(p: &ParameterSet, values: &[(&str, Vec<f64>)]) -> GradientSet {
        let mut g = GradientSet::zeros_like(p);
        for (k, v) in values {
            g.get_mut(k).unwrap().data_mut().copy_from_slice(v);
        }
        g
    }

    #[test]
    fn hand_evaluated_adversarial_delta() {
        let p = single(&[3.0, 4.0]);
        let g = grads_of(&p, &[("w", vec![0.0, 2.0])]);
        let d = adversarial_perturbation(&p, &g, 0.001).unwrap();
        let delta = d.get("w").unwrap();
        assert_eq!(delta.delta.data()[0], 0.0);
        assert!((delta.delta.data()[1] - 0.005).abs() < 1e-15);
        assert!((delta.weight_norm - 5.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gamma_is_zero() {
        let mut r = rng(0);
        let mut p = ParameterSet::new();
        p.insert("a", gaussian(&mut r, &[3, 3]), true).unwrap();
        let g = grads_of(&p, &[("a", gaussian(&mut r, &[3, 3]).into_data())]);
        let d = adversarial_perturbation(&p, &g, 0.0).unwrap();
        assert!(d.get("a").unwrap().delta.data().iter().all(|&v| v == 0.0));
        let d = random_perturbation(&p, 0.0, &mut r).unwrap();
        assert!(d.get("a").unwrap().delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_layer_left_alone() {
        let mut r = rng(1);
        let mut p = ParameterSet::new();
        p.insert("a", gaussian(&mut r, &[2, 2]), true).unwrap();
        p.insert("b", gaussian(&mut r, &[3]), true).unwrap();
        p.insert("frozen", gaussian(&mut r, &[3]), false).unwrap();
        let g = grads_of(&p, &[("b", vec![1.0, -1.0, 0.5])]);
        let d = adversarial_perturbation(&p, &g, 0.01).unwrap();
        assert!(d.get("a").unwrap().delta.data().iter().all(|&v| v == 0.0));
        let b = d.get("b").unwrap();
        assert!((b.delta_norm / b.weight_norm - 0.01).abs() < 1e-12);
        assert!(d.get("frozen").is_none());
    }

    #[test]
    fn nan_gradient_rejected() {
        let p = single(&[1.0, 2.0]);
        let mut g = GradientSet::zeros_like(&p);
        g.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
        assert!(matches!(adversarial_perturbation(&p, &g, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn random_budget_and_determinism() {
        let mut r = rng(2);
        let mut p = ParameterSet::new();
        p.insert("a", gaussian(&mut r, &[4, 5]), true).unwrap();
        p.insert("b", gaussian(&mut r, &[5]), true).unwrap();
        let d1 = random_perturbation(&p, 0.03, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let d2 = random_perturbation(&p, 0.03, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(d1, d2);
        for (_, l) in d1.iter() {
            assert!((l.delta_norm / l.weight_norm - 0.03).abs() <= 0.03 * 1e-10);
        }
        assert_eq!(d1.kind, PerturbKind::Random);
    }

    #[test]
    fn kind_selection() {
        let mut r = rng(3);
        let always = PerturbConfig { rho: 1.0, ..Default::default() };
        let never = PerturbConfig { rho: 0.0, ..Default::default() };
        for _ in 0..1000 {
            assert_eq!(choose_kind(&always, &mut r), PerturbKind::Adversarial);
            assert_eq!(choose_kind(&never, &mut r), PerturbKind::Random);
        }
        let half = PerturbConfig { rho: 0.5, ..Default::default() };
        let adv = (0..10_000)
            .filter(|_| choose_kind(&half, &mut r) == PerturbKind::Adversarial)
            .count();
        let frac = adv as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn apply_and_restore() {
        let p = single(&[1.0]);
        let g = grads_of(&p, &[("w", vec![3.0])]);
        let d = adversarial_perturbation(&p, &g, 0.25).unwrap();
        let mut q = apply(&p, &d).unwrap();
        assert_eq!(q.get("w").unwrap().data(), &[1.25]);
        snapshot_restore(&mut q, &p).unwrap();
        assert_eq!(q, p);
        let zero = Perturbation::zeros(&p, PerturbKind::Adversarial);
        assert_eq!(apply(&p, &zero).unwrap(), p);
    }

    #[test]
    fn apply_shape_mismatch() {
        let p = single(&[1.0, 2.0]);
        let other = single(&[1.0]);
        let d = Perturbation::zeros(&other, PerturbKind::Random);
        assert!(apply(&p, &d).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PerturbConfig { rho: 1.5, ..Default::default() }.validate().is_err());
        assert!(PerturbConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(PerturbConfig { gamma: f64::NAN, ..Default::default() }.validate().is_err());
        PerturbConfig::default().validate().unwrap();
    }
}
