//! Independent reference implementations used only by tests.
#![allow(dead_code)]

pub mod baseline;
pub mod conv_oracle;
pub mod counting;
pub mod fixtures;
pub mod gradcheck;
pub mod invariants;

use r3d_core::Tensor;

/// Direct 7-nested-loop grouped cross-correlation.
pub fn naive_conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
) -> Tensor<f64> {
    let s = x.shape();
    let (b, cin, t, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    let ws = w.shape();
    let (cout, cin_g, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let cout_g = cout / groups;
    let to = (t + 2 * pad[0] - kt) / stride[0] + 1;
    let ho = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let wo = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; b * cout * to * ho * wo];
    for n in 0..b {
        for oc in 0..cout {
            let g = oc / cout_g;
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                        for ic in 0..cin_g {
                            let c = g * cin_g + ic;
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let it = (ot * stride[0] + dt) as isize - pad[0] as isize;
                                        let ih = (oh * stride[1] + dh) as isize - pad[1] as isize;
                                        let iw = (ow * stride[2] + dw) as isize - pad[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((n * cin + c) * t + it as usize) * h + ih as usize) * wd + iw as usize;
                                        let wi = (((oc * cin_g + ic) * kt + dt) * kh + dh) * kw + dw;
                                        acc += xd[xi] * wdat[wi];
                                    }
                                }
                            }
                        }
                        out[(((n * cout + oc) * to + ot) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, to, ho, wo], out).unwrap()
}

/// Window-scan max pooling with `-inf` padding.
pub fn naive_maxpool3d(x: &Tensor<f64>, k: usize, s: usize, p: usize) -> Tensor<f64> {
    let sh = x.shape();
    let (b, c, t, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let o = |n: usize| (n + 2 * p - k) / s + 1;
    let (to, ho, wo) = (o(t), o(h), o(w));
    let mut out = Vec::new();
    for plane in 0..b * c {
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for it in (ot * s) as isize - p as isize..(ot * s + k) as isize - p as isize {
                        for ih in (oh * s) as isize - p as isize..(oh * s + k) as isize - p as isize {
                            for iw in (ow * s) as isize - p as isize..(ow * s + k) as isize - p as isize {
                                if it >= 0 && ih >= 0 && iw >= 0 && (it as usize) < t && (ih as usize) < h && (iw as usize) < w {
                                    m = m.max(x.data()[((plane * t + it as usize) * h + ih as usize) * w + iw as usize]);
                                }
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(vec![b, c, to, ho, wo], out).unwrap()
}

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar function at `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * FD_STEP));
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

/// Elementwise relative error, maximised over the tensor. Denominators are
/// floored at 1e-4 so entries that are zero in both gradients compare as absolute error.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// `sum(out * weights)`: a scalar probe whose gradient w.r.t. `out` is `weights`.
pub fn dot(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}
