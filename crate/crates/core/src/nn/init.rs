use rand::Rng;

use super::ops::LayerParams;
use super::tensor::Tensor;

/// Uniform initialization in `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`,
/// zero biases.
pub fn glorot_conv<R: Rng>(rng: &mut R, out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> LayerParams {
    let fan_in = (in_ch * kh * kw) as f64;
    let fan_out = (out_ch * kh * kw) as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    LayerParams {
        kernels: Tensor::from_fn(&[out_ch, in_ch, kh, kw], |_| rng.gen_range(-bound..=bound)),
        biases: Tensor::zeros(&[out_ch]),
    }
}

pub fn glorot_linear<R: Rng>(rng: &mut R, out_features: usize, in_features: usize) -> LayerParams {
    let bound = (6.0 / (in_features + out_features) as f64).sqrt();
    LayerParams {
        kernels: Tensor::from_fn(&[out_features, in_features], |_| rng.gen_range(-bound..=bound)),
        biases: Tensor::zeros(&[out_features]),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn bounded_and_seeded() {
        let a = glorot_conv(&mut ChaCha8Rng::seed_from_u64(3), 8, 4, 3, 3);
        let b = glorot_conv(&mut ChaCha8Rng::seed_from_u64(3), 8, 4, 3, 3);
        assert_eq!(a, b);
        let bound = (6.0f64 / (36.0 + 72.0)).sqrt();
        assert!(a.kernels.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.biases.shape(), &[8]);
    }
}
