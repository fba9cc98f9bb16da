//! Random initializers. All of them draw from a caller-supplied stream so that every tensor
//! in a network is a pure function of the run seed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// He initialization for layers followed by a rectifier: `N(0, 2 / fan_in)`.
pub fn kaiming_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// The default affine-layer initializer: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_variance_is_two_over_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = kaiming_normal(&[64, 32, 3, 3], 32 * 9, &mut rng);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / 288.0;
        assert!(mean.abs() < 0.01);
        assert!((var - want).abs() / want < 0.05, "var {var} want {want}");
    }

    #[test]
    fn uniform_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t: Tensor<f32> = fan_in_uniform(&[100, 25], 25, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.2));
    }
}
