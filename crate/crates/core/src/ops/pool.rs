//! Max, average and global average pooling over `(T, H, W)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::conv::output_extent;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl PoolParams {
    pub fn cubic(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolParams { kernel: [kernel; 3], stride: [stride; 3], padding: [padding; 3] }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 5]> {
        let &[b, c, t, h, w] = input else {
            return Err(Error::dim(format!("pooling expects a 5-D input, got shape {input:?}")));
        };
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::config(format!("pool kernel and stride must be >= 1, got {self:?}")));
        }
        for i in 0..3 {
            // Every window must overlap the unpadded input.
            if 2 * self.padding[i] > self.kernel[i] {
                return Err(Error::config(format!(
                    "pool padding {:?} exceeds half the kernel {:?}",
                    self.padding, self.kernel
                )));
            }
        }
        let mut out = [b, c, 0, 0, 0];
        for (i, x) in [t, h, w].into_iter().enumerate() {
            out[2 + i] = output_extent(x, self.kernel[i], self.stride[i], self.padding[i])?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    /// Flat input index chosen by each output element.
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

/// Max pooling with `-inf` padding. Ties go to the lowest input index.
pub fn maxpool3d_forward<T: Element>(input: &Tensor<T>, params: &PoolParams) -> Result<(Tensor<T>, MaxPoolCache)> {
    let [b, c, t, h, w] = input.dims5()?;
    let out_shape = params.output_shape(input.shape())?;
    let [_, _, to, ho, wo] = out_shape;
    let in_vol = t * h * w;
    let out_vol = to * ho * wo;
    let x = input.data();
    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = vec![0usize; b * c * out_vol];
    out.data_mut()
        .par_chunks_mut(out_vol)
        .zip(argmax.par_chunks_mut(out_vol))
        .enumerate()
        .for_each(|(plane, (y, am))| {
            let base = plane * in_vol;
            let mut o = 0;
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for dt in 0..params.kernel[0] {
                            let Some(it) = index(ot, dt, params.stride[0], params.padding[0], t) else { continue };
                            for dh in 0..params.kernel[1] {
                                let Some(ih) = index(oh, dh, params.stride[1], params.padding[1], h) else { continue };
                                for dw in 0..params.kernel[2] {
                                    let Some(iw) = index(ow, dw, params.stride[2], params.padding[2], w) else { continue };
                                    let i = (it * h + ih) * w + iw;
                                    let v = x[base + i];
                                    if best_i == usize::MAX || v > best {
                                        best = v;
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        y[o] = best;
                        am[o] = base + best_i;
                        o += 1;
                    }
                }
            }
        });
    let cache = MaxPoolCache { argmax, input_shape: input.shape().to_vec(), output_shape: out_shape.to_vec() };
    Ok((out, cache))
}

fn index(o: usize, d: usize, s: usize, p: usize, extent: usize) -> Option<usize> {
    let i = (o * s + d).checked_sub(p)?;
    (i < extent).then_some(i)
}

pub fn maxpool3d_backward<T: Element>(grad_out: &Tensor<T>, cache: &MaxPoolCache) -> Result<Tensor<T>> {
    if grad_out.shape() != cache.output_shape.as_slice() {
        return Err(Error::dim(format!(
            "max-pool grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            cache.output_shape
        )));
    }
    let mut grad = Tensor::zeros(&cache.input_shape);
    let g = grad.data_mut();
    for (&i, &d) in cache.argmax.iter().zip(grad_out.data()) {
        g[i] = g[i] + d;
    }
    Ok(grad)
}

/// Average pooling without padding.
pub fn avgpool3d<T: Element>(input: &Tensor<T>, kernel: [usize; 3], stride: [usize; 3]) -> Result<Tensor<T>> {
    let [_, _, t, h, w] = input.dims5()?;
    let params = PoolParams { kernel, stride, padding: [0; 3] };
    let out_shape = params.output_shape(input.shape())?;
    let [_, _, to, ho, wo] = out_shape;
    let (in_vol, out_vol) = (t * h * w, to * ho * wo);
    let norm = T::from_usize(kernel.iter().product()).unwrap();
    let x = input.data();
    let mut out = Tensor::zeros(&out_shape);
    out.data_mut().par_chunks_mut(out_vol).enumerate().for_each(|(plane, y)| {
        let src = &x[plane * in_vol..(plane + 1) * in_vol];
        let mut o = 0;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for dt in 0..kernel[0] {
                        for dh in 0..kernel[1] {
                            let row = ((ot * stride[0] + dt) * h + oh * stride[1] + dh) * w + ow * stride[2];
                            for dw in 0..kernel[2] {
                                acc = acc + src[row + dw];
                            }
                        }
                    }
                    y[o] = acc / norm;
                    o += 1;
                }
            }
        }
    });
    Ok(out)
}

pub fn avgpool3d_backward<T: Element>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    kernel: [usize; 3],
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let params = PoolParams { kernel, stride, padding: [0; 3] };
    let out_shape = params.output_shape(input_shape)?;
    if grad_out.shape() != out_shape {
        return Err(Error::dim(format!(
            "avg-pool grad_out shape {:?} does not match forward output {out_shape:?}",
            grad_out.shape()
        )));
    }
    let [_, _, t, h, w] = input_shape.try_into().unwrap();
    let [_, _, to, ho, wo] = out_shape;
    let (in_vol, out_vol) = (t * h * w, to * ho * wo);
    let norm = T::from_usize(kernel.iter().product()).unwrap();
    let dy = grad_out.data();
    let mut grad = Tensor::zeros(input_shape);
    grad.data_mut().par_chunks_mut(in_vol).enumerate().for_each(|(plane, dx)| {
        let src = &dy[plane * out_vol..(plane + 1) * out_vol];
        let mut o = 0;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let v = src[o] / norm;
                    o += 1;
                    for dt in 0..kernel[0] {
                        for dh in 0..kernel[1] {
                            let row = ((ot * stride[0] + dt) * h + oh * stride[1] + dh) * w + ow * stride[2];
                            for dw in 0..kernel[2] {
                                dx[row + dw] = dx[row + dw] + v;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(grad)
}

/// Mean over `(T, H, W)`: `(B, C, T, H, W) -> (B, C)`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, t, h, w] = input.dims5()?;
    let vol = t * h * w;
    let norm = T::from_usize(vol).unwrap();
    let data = input.data().chunks(vol).map(|p| p.iter().copied().sum::<T>() / norm).collect();
    Tensor::new(vec![b, c], data)
}

pub fn global_avg_pool_backward<T: Element>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let &[b, c, t, h, w] = input_shape else {
        return Err(Error::dim(format!("global pool input must be 5-D, got {input_shape:?}")));
    };
    if grad_out.shape() != [b, c] {
        return Err(Error::dim(format!("global pool grad_out shape {:?} is not ({b}, {c})", grad_out.shape())));
    }
    let vol = t * h * w;
    let norm = T::from_usize(vol).unwrap();
    let mut grad = Tensor::zeros(input_shape);
    for (plane, &g) in grad.data_mut().chunks_mut(vol).zip(grad_out.data()) {
        plane.fill(g / norm);
    }
    Ok(grad)
}
