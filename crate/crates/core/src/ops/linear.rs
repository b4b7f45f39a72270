use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T = f32> {
    /// `(out_features, in_features)`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> LinearParams<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        LinearParams { weight: Tensor::zeros(&[out_features, in_features]), bias: Tensor::zeros(&[out_features]) }
    }

    fn dims(&self) -> Result<(usize, usize)> {
        let [k, f] = self.weight.dims2()?;
        if self.bias.shape() != [k] {
            return Err(Error::dim(format!("linear bias shape {:?} does not match {k} outputs", self.bias.shape())));
        }
        Ok((k, f))
    }
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `x · Wᵀ + b`. Each output row depends only on its own input row.
pub fn linear<T: Element>(input: &Tensor<T>, params: &LinearParams<T>) -> Result<Tensor<T>> {
    let [b, f] = input.dims2()?;
    let (k, fw) = params.dims()?;
    if f != fw {
        return Err(Error::dim(format!("linear input has {f} features, weights expect {fw}")));
    }
    let w = params.weight.data();
    let mut out = Vec::with_capacity(b * k);
    for row in input.data().chunks(f) {
        for (j, wrow) in w.chunks(f).enumerate() {
            let dot = row.iter().zip(wrow).fold(T::zero(), |acc, (&x, &w)| acc + x * w);
            out.push(dot + params.bias.data()[j]);
        }
    }
    Tensor::new(vec![b, k], out)
}

pub fn linear_backward<T: Element>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &LinearParams<T>,
) -> Result<LinearGrads<T>> {
    let [b, f] = input.dims2()?;
    let (k, _) = params.dims()?;
    if grad_out.shape() != [b, k] {
        return Err(Error::dim(format!("linear grad_out shape {:?} is not ({b}, {k})", grad_out.shape())));
    }
    let (x, w, dy) = (input.data(), params.weight.data(), grad_out.data());
    let mut gx = Tensor::zeros(&[b, f]);
    let mut gw = Tensor::zeros(&[k, f]);
    let mut gb = Tensor::zeros(&[k]);
    for i in 0..b {
        for j in 0..k {
            let d = dy[i * k + j];
            gb.data_mut()[j] = gb.data()[j] + d;
            for l in 0..f {
                gx.data_mut()[i * f + l] = gx.data()[i * f + l] + d * w[j * f + l];
                gw.data_mut()[j * f + l] = gw.data()[j * f + l] + d * x[i * f + l];
            }
        }
    }
    Ok(LinearGrads { input: gx, weight: gw, bias: gb })
}
