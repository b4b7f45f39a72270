use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Concatenates 5-D tensors along the channel axis, in argument order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| Error::dim("concat needs at least one input"))?;
    let [b, _, t, h, w] = first.dims5()?;
    let mut channels = 0;
    for x in inputs {
        let [xb, xc, xt, xh, xw] = x.dims5()?;
        if (xb, xt, xh, xw) != (b, t, h, w) {
            return Err(Error::dim(format!(
                "concat inputs disagree outside the channel axis: {:?} vs {:?}",
                first.shape(),
                x.shape()
            )));
        }
        channels += xc;
    }
    let vol = t * h * w;
    let mut data = Vec::with_capacity(b * channels * vol);
    for i in 0..b {
        for x in inputs {
            let c = x.shape()[1];
            data.extend_from_slice(&x.data()[i * c * vol..(i + 1) * c * vol]);
        }
    }
    Tensor::new(vec![b, channels, t, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn concat_channels_backward<T: Element>(grad_out: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [b, c, t, h, w] = grad_out.dims5()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::dim(format!("channel split {channels:?} does not add up to {c}")));
    }
    let vol = t * h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&ci| Vec::with_capacity(b * ci * vol)).collect();
    let g = grad_out.data();
    for i in 0..b {
        let mut offset = i * c * vol;
        for (part, &ci) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&g[offset..offset + ci * vol]);
            offset += ci * vol;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &ci)| Tensor::new(vec![b, ci, t, h, w], data))
        .collect()
}
