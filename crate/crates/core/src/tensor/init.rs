use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Scalar, Tensor};

/// Normal(0, std) samples truncated to two standard deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("numel matches shape")
}
