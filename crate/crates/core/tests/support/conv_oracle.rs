//! Optimised 32-bit convolution against the naive 64-bit loop nest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use r3d_core::ops::{conv3d, Conv3dParams};
use r3d_core::Tensor;

use super::naive_conv3d;

/// Draws one random configuration (groups in {1, 2, 4}, kernel, stride,
/// padding, shape) and returns the largest elementwise difference.
pub fn random_config_diff(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = [1, 2, 4][rng.random_range(0..3)];
    let cin = groups * rng.random_range(1..=2);
    let cout = groups * rng.random_range(1..=3);
    let k = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
    let stride = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)];
    let pad = [rng.random_range(0..=1), rng.random_range(0..=1), rng.random_range(0..=1)];
    let shape = [rng.random_range(1..=2), cin, rng.random_range(3..=5), rng.random_range(3..=7), rng.random_range(3..=7)];
    let x = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
    let mut p = Conv3dParams::<f32>::zeros(cin, cout, k, stride, pad, groups, true).unwrap();
    p.weight = Tensor::randn(p.weight.shape(), 1.0, &mut rng);
    p.bias = Some(Tensor::randn(&[cout], 1.0, &mut rng));
    let y = conv3d(&x, &p).unwrap();
    let bias: Vec<f64> = p.bias.as_ref().unwrap().cast::<f64>().into_data();
    let reference = naive_conv3d(&x.cast(), &p.weight.cast(), Some(&bias), stride, pad, groups);
    y.cast::<f64>().max_abs_diff(&reference).unwrap()
}
