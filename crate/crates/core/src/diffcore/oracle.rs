use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, GraphBuilder, Inputs, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::params::{GradientSet, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient estimate over every trainable coordinate:
/// `(loss(θ + h e) - loss(θ - h e)) / 2h`.
pub fn finite_diff_gradient<T, F>(mut loss_fn: F, params: &ParameterSet<T>, h: T) -> Result<GradientSet<T>>
where
    T: Scalar,
    F: FnMut(&ParameterSet<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut grads = GradientSet::zeros_like(params);
    let mut probe = params.clone();
    let names = params.trainable_names();
    let two_h = h + h;
    for name in &names {
        let n = params.get(name).expect("trainable layer").len();
        for i in 0..n {
            let orig = probe.get(name).expect("layer").data()[i];
            probe.get_mut(name).expect("layer").data_mut()[i] = orig + h;
            let up = loss_fn(&probe)?;
            probe.get_mut(name).expect("layer").data_mut()[i] = orig - h;
            let down = loss_fn(&probe)?;
            probe.get_mut(name).expect("layer").data_mut()[i] = orig;
            grads.get_mut(name).expect("zeros_like").data_mut()[i] = (up - down) / two_h;
        }
    }
    Ok(grads)
}

/// Worst disagreement found by [`compare_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMismatch {
    pub layer: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Per-coordinate agreement check: relative error at most `rel_tol`, except
/// where the analytic magnitude is below `small`, where the absolute error
/// must be at most `abs_tol`. Returns the first failing coordinate.
pub fn compare_gradients<T: Scalar>(
    analytic: &GradientSet<T>,
    numeric: &GradientSet<T>,
    rel_tol: f64,
    abs_tol: f64,
    small: f64,
) -> std::result::Result<(), GradientMismatch> {
    for (name, a) in analytic.iter() {
        let Some(n) = numeric.get(name) else {
            return Err(GradientMismatch {
                layer: name.to_string(),
                index: 0,
                analytic: f64::NAN,
                numeric: f64::NAN,
            });
        };
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let (av, nv) = (av.as_f64(), nv.as_f64());
            let err = (av - nv).abs();
            let ok = if av.abs() < small {
                err <= abs_tol
            } else {
                err / av.abs() <= rel_tol
            };
            if !ok {
                return Err(GradientMismatch {
                    layer: name.to_string(),
                    index: i,
                    analytic: av,
                    numeric: nv,
                });
            }
        }
    }
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

/// A small scalar-valued graph that exercises one operation: the op's
/// output is scored against random keys with `pairwise_dot` and reduced by
/// `softmax_xent_diag`. Unary ops get a frozen dummy `b`. Relu inputs are
/// kept at least 0.1 away from the kink.
pub fn op_probe(kind: OpKind, seed: u64, fault: Option<OpKind>) -> (Graph, Inputs<f64>, ParameterSet<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GraphBuilder::new();
    let a = g.param("a");
    let b = g.param("b");
    let (out, pa, pb): (NodeId, Vec<usize>, Option<Vec<usize>>) = match kind {
        OpKind::MatMul => (g.matmul(a, b), vec![3, 4], Some(vec![4, 2])),
        OpKind::Add => (g.add(a, b), vec![3, 2], Some(vec![3, 2])),
        OpKind::BiasAdd => (g.bias_add(a, b), vec![3, 2], Some(vec![2])),
        OpKind::Tanh => (g.tanh(a), vec![3, 2], None),
        OpKind::Relu => (g.relu(a), vec![3, 2], None),
        OpKind::ConcatCols => (g.concat_cols(a, b), vec![3, 1], Some(vec![3, 2])),
        OpKind::Scale => (g.scale(a, -1.7), vec![3, 2], None),
        OpKind::L2NormalizeRows => (g.l2_normalize_rows(a), vec![3, 2], None),
        OpKind::PairwiseDot => (g.pairwise_dot(a, b), vec![3, 2], Some(vec![4, 2])),
        OpKind::SoftmaxXentDiag => (g.softmax_xent_diag(a), vec![3, 5], None),
        OpKind::Input | OpKind::Param => panic!("`{}` is not a differentiable op", kind.name()),
    };
    if kind != OpKind::SoftmaxXentDiag {
        let keys = g.input("keys");
        let s = g.pairwise_dot(out, keys);
        g.softmax_xent_diag(s);
    }
    if let Some(f) = fault {
        g.inject_sign_fault(f);
    }
    let graph = g.build();
    let mut params = ParameterSet::new();
    let mut ta = gaussian(&mut r, &pa);
    if kind == OpKind::Relu {
        ta.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.signum() * (v.abs() + 0.1));
    }
    params.insert("a", ta, true).expect("fresh set");
    match pb {
        Some(shape) => params.insert("b", gaussian(&mut r, &shape), true),
        None => params.insert("b", Tensor::scalar(0.0), false),
    }
    .expect("fresh set");
    let out_cols = match kind {
        OpKind::MatMul => 2,
        OpKind::ConcatCols => 3,
        OpKind::PairwiseDot => 4,
        _ => 2,
    };
    let inputs = Inputs::from([("keys".to_string(), gaussian(&mut r, &[3, out_cols]))]);
    (graph, inputs, params)
}
