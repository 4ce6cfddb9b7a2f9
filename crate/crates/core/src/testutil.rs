use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = gaussian(rng, &[rows, cols]);
    for r in 0..rows {
        let n = crate::scalar::l2_norm(t.row(r));
        t.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    t
}
