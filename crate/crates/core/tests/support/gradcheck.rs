//! Finite-difference checks for every layer kernel, each returning the
//! worst relative error between analytic and numeric gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use r3d_core::ops::*;
use r3d_core::Tensor;

use super::{dot, max_rel_err, numeric_grad};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn conv3d(seed: u64, groups: usize) -> f64 {
    let mut r = rng(seed);
    let cin = 2 * groups;
    let cout = 2 * groups;
    let k = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
    let stride = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=2)];
    let pad = [r.random_range(0..=1), r.random_range(0..=1), r.random_range(0..=1)];
    let x = Tensor::<f64>::randn(&[2, cin, 3, 4, 4], 1.0, &mut r);
    let mut p = Conv3dParams::<f64>::zeros(cin, cout, k, stride, pad, groups, true).unwrap();
    p.weight = Tensor::randn(p.weight.shape(), 0.5, &mut r);
    p.bias = Some(Tensor::randn(&[cout], 0.5, &mut r));
    let (y, cache) = conv3d_forward(&x, &p).unwrap();
    let probe = Tensor::randn(y.shape(), 1.0, &mut r);
    let g = conv3d_backward(&probe, &cache, &p).unwrap();

    let nx = numeric_grad(&x, |x| dot(&r3d_core::ops::conv3d(x, &p).unwrap(), &probe));
    let nw = numeric_grad(&p.weight, |w| {
        let mut q = p.clone();
        q.weight = w.clone();
        dot(&r3d_core::ops::conv3d(&x, &q).unwrap(), &probe)
    });
    let nb = numeric_grad(p.bias.as_ref().unwrap(), |b| {
        let mut q = p.clone();
        q.bias = Some(b.clone());
        dot(&r3d_core::ops::conv3d(&x, &q).unwrap(), &probe)
    });
    max_rel_err(&g.input, &nx).max(max_rel_err(&g.weight, &nw)).max(max_rel_err(g.bias.as_ref().unwrap(), &nb))
}

pub fn batchnorm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::<f64>::randn(&[2, 3, 2, 4, 4], 2.0, &mut r).map(|v| v + 0.7);
    let mut p = BatchNorm3dParams::<f64>::new(3);
    p.gamma = Tensor::randn(&[3], 1.0, &mut r);
    p.beta = Tensor::randn(&[3], 1.0, &mut r);
    let (y, cache) = batchnorm3d_forward(&x, &mut p.clone(), NormMode::Training).unwrap();
    let probe = Tensor::randn(y.shape(), 1.0, &mut r);
    let g = batchnorm3d_backward(&probe, &cache, &p).unwrap();
    let f = |x: &Tensor<f64>, p: &BatchNorm3dParams<f64>| {
        let (y, _) = batchnorm3d_forward(x, &mut p.clone(), NormMode::Training).unwrap();
        dot(&y, &probe)
    };
    let nx = numeric_grad(&x, |x| f(x, &p));
    let ng = numeric_grad(&p.gamma, |gm| {
        let mut q = p.clone();
        q.gamma = gm.clone();
        f(&x, &q)
    });
    let nb = numeric_grad(&p.beta, |bt| {
        let mut q = p.clone();
        q.beta = bt.clone();
        f(&x, &q)
    });
    max_rel_err(&g.input, &nx).max(max_rel_err(&g.gamma, &ng)).max(max_rel_err(&g.beta, &nb))
}

pub fn relu_layer(seed: u64) -> f64 {
    let mut r = rng(seed);
    // keep inputs away from the kink
    let x = Tensor::<f64>::randn(&[2, 3, 2, 3, 3], 1.0, &mut r).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
    let y = relu(&x);
    let probe = Tensor::randn(y.shape(), 1.0, &mut r);
    let g = relu_backward(&probe, &y).unwrap();
    max_rel_err(&g, &numeric_grad(&x, |x| dot(&relu(x), &probe)))
}

pub fn maxpool(seed: u64) -> f64 {
    let mut r = rng(seed);
    // distinct values spaced well beyond the finite-difference step
    let n = 2 * 2 * 4 * 5 * 5;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(vec![2, 2, 4, 5, 5], vals).unwrap();
    let p = PoolParams::cubic(3, 2, 1);
    let (y, cache) = maxpool3d_forward(&x, &p).unwrap();
    let probe = Tensor::randn(y.shape(), 1.0, &mut r);
    let g = maxpool3d_backward(&probe, &cache).unwrap();
    max_rel_err(&g, &numeric_grad(&x, |x| dot(&maxpool3d_forward(x, &p).unwrap().0, &probe)))
}

pub fn avgpool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::<f64>::randn(&[2, 2, 4, 5, 4], 1.0, &mut r);
    let y = avgpool3d(&x, [2; 3], [2; 3]).unwrap();
    let probe = Tensor::randn(y.shape(), 1.0, &mut r);
    let g = avgpool3d_backward(&probe, x.shape(), [2; 3], [2; 3]).unwrap();
    max_rel_err(&g, &numeric_grad(&x, |x| dot(&avgpool3d(x, [2; 3], [2; 3]).unwrap(), &probe)))
}

pub fn global_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::<f64>::randn(&[2, 3, 2, 3, 2], 1.0, &mut r);
    let probe = Tensor::randn(&[2, 3], 1.0, &mut r);
    let g = global_avg_pool_backward(&probe, x.shape()).unwrap();
    max_rel_err(&g, &numeric_grad(&x, |x| dot(&global_avg_pool(x).unwrap(), &probe)))
}

pub fn linear_layer(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut r);
    let p = LinearParams { weight: Tensor::randn(&[4, 5], 1.0, &mut r), bias: Tensor::randn(&[4], 1.0, &mut r) };
    let probe = Tensor::randn(&[3, 4], 1.0, &mut r);
    let g = linear_backward(&probe, &x, &p).unwrap();
    let nx = numeric_grad(&x, |x| dot(&linear(x, &p).unwrap(), &probe));
    let nw = numeric_grad(&p.weight, |w| dot(&linear(&x, &LinearParams { weight: w.clone(), bias: p.bias.clone() }).unwrap(), &probe));
    let nb = numeric_grad(&p.bias, |b| dot(&linear(&x, &LinearParams { weight: p.weight.clone(), bias: b.clone() }).unwrap(), &probe));
    max_rel_err(&g.input, &nx).max(max_rel_err(&g.weight, &nw)).max(max_rel_err(&g.bias, &nb))
}

pub fn concat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = Tensor::<f64>::randn(&[2, 2, 2, 2, 2], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[2, 3, 2, 2, 2], 1.0, &mut r);
    let probe = Tensor::randn(&[2, 5, 2, 2, 2], 1.0, &mut r);
    let parts = concat_channels_backward(&probe, &[2, 3]).unwrap();
    let na = numeric_grad(&a, |a| dot(&concat_channels(&[a, &b]).unwrap(), &probe));
    let nb = numeric_grad(&b, |b| dot(&concat_channels(&[&a, b]).unwrap(), &probe));
    max_rel_err(&parts[0], &na).max(max_rel_err(&parts[1], &nb))
}

pub fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = Tensor::<f64>::randn(&[3, 5], 2.0, &mut r);
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..5)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    max_rel_err(&g, &numeric_grad(&logits, |z| softmax_cross_entropy(z, &labels).unwrap().0))
}

/// Every layer check by name, for sweeping over seeds.
pub fn all_layers() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("conv3d groups=1", |s| conv3d(s, 1)),
        ("conv3d groups=2", |s| conv3d(s, 2)),
        ("conv3d groups=4", |s| conv3d(s, 4)),
        ("batchnorm3d", batchnorm),
        ("relu", relu_layer),
        ("maxpool3d", maxpool),
        ("avgpool3d", avgpool),
        ("global_avg_pool", global_pool),
        ("linear", linear_layer),
        ("concat_channels", concat),
        ("softmax_cross_entropy", cross_entropy),
    ]
}
