use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::{NumericsError, Tensor};

/// The one generator type threaded through every stochastic operation.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Inverted-dropout mask: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Result<Tensor, NumericsError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NumericsError::Parameter(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape has no zero dims")
}
