//! Per-channel batch normalisation over `(B, T, H, W)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Training,
    /// Running statistics; nothing is updated.
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm3dParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNorm3dParams<T> {
    /// gamma = 1, beta = 0, running statistics (0, 1).
    pub fn new(channels: usize) -> Self {
        BatchNorm3dParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [channels] {
                return Err(Error::dim(format!(
                    "batch norm {name} has shape {:?}, input has {channels} channels",
                    t.shape()
                )));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("batch norm epsilon must be positive"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config("batch norm momentum must lie in (0, 1)"));
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::config("batch norm running variance is negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    mode: NormMode,
    x_hat: Tensor<T>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Iterates over the contiguous `(T·H·W)` planes of channel `c`.
fn planes<T>(data: &[T], c: usize, channels: usize, vol: usize) -> impl Iterator<Item = &[T]> {
    data.chunks(vol).skip(c).step_by(channels)
}

pub fn batchnorm3d_forward<T: Element>(
    input: &Tensor<T>,
    params: &mut BatchNorm3dParams<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [b, c, t, h, w] = input.dims5()?;
    params.validate(c)?;
    let vol = t * h * w;
    let count = b * vol;
    let x = input.data();
    let eps = params.epsilon;

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        NormMode::Training => {
            if count < 2 {
                return Err(Error::InsufficientStatistics(count));
            }
            (0..c)
                .into_par_iter()
                .map(|ch| {
                    let mut sum = 0.0;
                    for p in planes(x, ch, c, vol) {
                        sum += p.iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for p in planes(x, ch, c, vol) {
                        sq += p.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>();
                    }
                    (mean, sq / count as f64)
                })
                .unzip()
        }
        NormMode::Inference => (
            params.running_mean.data().iter().map(|v| v.to_f64().unwrap()).collect(),
            params.running_var.data().iter().map(|v| v.to_f64().unwrap()).collect(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut x_hat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let gamma = params.gamma.data();
    let beta = params.beta.data();
    x_hat
        .data_mut()
        .par_chunks_mut(vol)
        .zip(out.data_mut().par_chunks_mut(vol))
        .enumerate()
        .for_each(|(i, (xh, y))| {
            let ch = i % c;
            let src = &x[i * vol..(i + 1) * vol];
            let (m, s) = (mean[ch], inv_std[ch]);
            let (g, bt) = (gamma[ch], beta[ch]);
            for ((xh, y), &v) in xh.iter_mut().zip(y.iter_mut()).zip(src) {
                let n = T::from_f64_lossy((v.to_f64().unwrap() - m) * s);
                *xh = n;
                *y = g * n + bt;
            }
        });

    if mode == NormMode::Training {
        let mom = params.momentum;
        // Running variance tracks the unbiased estimate.
        let unbias = count as f64 / (count - 1) as f64;
        for ch in 0..c {
            let rm = &mut params.running_mean.data_mut()[ch];
            *rm = T::from_f64_lossy((1.0 - mom) * rm.to_f64().unwrap() + mom * mean[ch]);
            let rv = &mut params.running_var.data_mut()[ch];
            *rv = T::from_f64_lossy((1.0 - mom) * rv.to_f64().unwrap() + mom * var[ch] * unbias);
        }
    }

    let cache = BatchNormCache {
        mode,
        x_hat,
        inv_std,
        shape: input.shape().to_vec(),
    };
    Ok((out, cache))
}

/// Inference-mode normalisation that does not build a cache.
pub fn batchnorm3d_inference<T: Element>(input: &Tensor<T>, params: &BatchNorm3dParams<T>) -> Result<Tensor<T>> {
    let [_, c, t, h, w] = input.dims5()?;
    params.validate(c)?;
    let vol = t * h * w;
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    out.data_mut().par_chunks_mut(vol).enumerate().for_each(|(i, y)| {
        let ch = i % c;
        let m = params.running_mean.data()[ch].to_f64().unwrap();
        let bt = params.beta.data()[ch];
        let g = params.gamma.data()[ch];
        let s = 1.0 / (params.running_var.data()[ch].to_f64().unwrap() + params.epsilon).sqrt();
        for (y, &v) in y.iter_mut().zip(&x[i * vol..(i + 1) * vol]) {
            *y = g * T::from_f64_lossy((v.to_f64().unwrap() - m) * s) + bt;
        }
    });
    Ok(out)
}

pub fn batchnorm3d_backward<T: Element>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    params: &BatchNorm3dParams<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::dim(format!(
            "batch norm grad_out shape {:?} does not match forward input {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let [b, c, t, h, w] = grad_out.dims5()?;
    let vol = t * h * w;
    let count = (b * vol) as f64;
    let dy = grad_out.data();

    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    let mut grad_input = Tensor::zeros(grad_out.shape());

    let xh = cache.x_hat.data();
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut sdy, mut sdyx) = (0.0, 0.0);
            for (pd, px) in planes(dy, ch, c, vol).zip(planes(xh, ch, c, vol)) {
                for (&d, &x) in pd.iter().zip(px) {
                    let d = d.to_f64().unwrap();
                    sdy += d;
                    sdyx += d * x.to_f64().unwrap();
                }
            }
            (sdy, sdyx)
        })
        .collect();
    for (ch, &(sdy, sdyx)) in sums.iter().enumerate() {
        grad_beta.data_mut()[ch] = T::from_f64_lossy(sdy);
        grad_gamma.data_mut()[ch] = T::from_f64_lossy(sdyx);
    }
    let training = cache.mode == NormMode::Training;
    grad_input.data_mut().par_chunks_mut(vol).enumerate().for_each(|(i, dx)| {
        let ch = i % c;
        let (sdy, sdyx) = sums[ch];
        let gs = params.gamma.data()[ch].to_f64().unwrap() * cache.inv_std[ch];
        let d = &dy[i * vol..(i + 1) * vol];
        let x = &xh[i * vol..(i + 1) * vol];
        for ((dx, &d), &x) in dx.iter_mut().zip(d).zip(x) {
            let d = d.to_f64().unwrap();
            // In inference mode the statistics are constants and the map is affine.
            let v = if training { gs * (d - sdy / count - x.to_f64().unwrap() * sdyx / count) } else { gs * d };
            *dx = T::from_f64_lossy(v);
        }
    });

    Ok(BatchNormGrads { input: grad_input, gamma: grad_gamma, beta: grad_beta })
}
