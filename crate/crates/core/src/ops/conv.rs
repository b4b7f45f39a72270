//! Grouped 3-D cross-correlation.
//!
//! The kernel lowers each `(batch item, group)` pair to GEMMs over fixed-size
//! chunks of output rows (im2col), so the floating-point accumulation order of
//! every output element is independent of how many worker threads run.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Output columns per im2col chunk (rounded to whole output rows).
const CHUNK_COLS: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dParams<T = f32> {
    /// `(out_ch, in_ch / groups, kT, kH, kW)`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl<T: Element> Conv3dParams<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Result<Self> {
        let p = Conv3dParams { weight, bias, stride, padding, groups };
        p.validate()?;
        Ok(p)
    }

    /// Zero-initialised parameters for the given layer extents.
    pub fn zeros(
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::config(format!(
                "channels {in_ch}->{out_ch} are not divisible by {groups} groups"
            )));
        }
        if kernel.contains(&0) {
            return Err(Error::config(format!("kernel extents must be >= 1, got {kernel:?}")));
        }
        let weight = Tensor::zeros(&[out_ch, in_ch / groups, kernel[0], kernel[1], kernel[2]]);
        let bias = bias.then(|| Tensor::zeros(&[out_ch]));
        Self::new(weight, bias, stride, padding, groups)
    }

    pub fn validate(&self) -> Result<()> {
        let [out_ch, cin_g, ..] = self.weight.dims5()?;
        if self.groups == 0 || out_ch % self.groups != 0 {
            return Err(Error::config(format!(
                "{out_ch} output channels are not divisible by {} groups",
                self.groups
            )));
        }
        if cin_g == 0 {
            return Err(Error::config("weight has no input channels"));
        }
        if self.stride.contains(&0) {
            return Err(Error::config(format!("strides must be >= 1, got {:?}", self.stride)));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [out_ch] {
                return Err(Error::dim(format!("bias shape {:?} does not match {out_ch} output channels", b.shape())));
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[2], s[3], s[4]]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Output shape for an input of shape `(B, C, T, H, W)`.
    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 5]> {
        let geo = Geometry::new(input, self)?;
        Ok([geo.batch, geo.cout, geo.out[0], geo.out[1], geo.out[2]])
    }
}

/// `floor((x + 2p - k) / s) + 1`, or a configuration error when it would be < 1.
pub fn output_extent(x: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let padded = x + 2 * p;
    if padded < k {
        return Err(Error::config(format!(
            "kernel {k} is larger than padded extent {padded} (input {x}, padding {p})"
        )));
    }
    Ok((padded - k) / s + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    cin_g: usize,
    cout: usize,
    cout_g: usize,
    groups: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn new<T: Element>(input: &[usize], p: &Conv3dParams<T>) -> Result<Self> {
        let &[batch, cin, t, h, w] = input else {
            return Err(Error::dim(format!("conv3d expects a 5-D input, got shape {input:?}")));
        };
        p.validate()?;
        if cin != p.in_channels() {
            return Err(Error::dim(format!(
                "conv3d input has {cin} channels, weights expect {}",
                p.in_channels()
            )));
        }
        let kernel = p.kernel();
        let mut out = [0; 3];
        for (i, x) in [t, h, w].into_iter().enumerate() {
            out[i] = output_extent(x, kernel[i], p.stride[i], p.padding[i])?;
        }
        Ok(Geometry {
            batch,
            cin,
            cin_g: cin / p.groups,
            cout: p.out_channels(),
            cout_g: p.out_channels() / p.groups,
            groups: p.groups,
            input: [t, h, w],
            kernel,
            stride: p.stride,
            padding: p.padding,
            out,
        })
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.cin_g * self.kernel.iter().product::<usize>()
    }

    /// Pointwise convolutions read the input directly, no lowering needed.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    fn rows(&self) -> usize {
        self.out[0] * self.out[1]
    }

    fn row_chunks(&self) -> Vec<(usize, usize)> {
        let per = (CHUNK_COLS / self.out[2]).max(1);
        let rows = self.rows();
        (0..rows).step_by(per).map(|r0| (r0, (r0 + per).min(rows))).collect()
    }
}

/// Unfolds output rows `[r0, r1)` of one group into a `(patch_len, n)` matrix.
fn im2col<T: Element>(x: &[T], geo: &Geometry, r0: usize, r1: usize, col: &mut [T]) {
    let [t_in, h_in, w_in] = geo.input;
    let [kt, kh, kw] = geo.kernel;
    let [st, sh, sw] = geo.stride;
    let [pt, ph, pw] = geo.padding;
    let [_, ho, wo] = geo.out;
    let n = (r1 - r0) * wo;
    let mut krow = 0;
    for c in 0..geo.cin_g {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[krow * n..(krow + 1) * n];
                    krow += 1;
                    for r in r0..r1 {
                        let seg = &mut dst[(r - r0) * wo..(r - r0 + 1) * wo];
                        let it = ((r / ho) * st + dt) as isize - pt as isize;
                        let ih = ((r % ho) * sh + dh) as isize - ph as isize;
                        if it < 0 || it >= t_in as isize || ih < 0 || ih >= h_in as isize {
                            seg.fill(T::zero());
                            continue;
                        }
                        let base = ((c * t_in + it as usize) * h_in + ih as usize) * w_in;
                        for (ow, v) in seg.iter_mut().enumerate() {
                            let iw = (ow * sw + dw) as isize - pw as isize;
                            *v = if iw < 0 || iw >= w_in as isize { T::zero() } else { x[base + iw as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a `(patch_len, n)` matrix back into `dx`.
fn col2im<T: Element>(col: &[T], geo: &Geometry, r0: usize, r1: usize, dx: &mut [T]) {
    let [t_in, h_in, w_in] = geo.input;
    let [kt, kh, kw] = geo.kernel;
    let [st, sh, sw] = geo.stride;
    let [pt, ph, pw] = geo.padding;
    let [_, ho, wo] = geo.out;
    let n = (r1 - r0) * wo;
    let mut krow = 0;
    for c in 0..geo.cin_g {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[krow * n..(krow + 1) * n];
                    krow += 1;
                    for r in r0..r1 {
                        let seg = &src[(r - r0) * wo..(r - r0 + 1) * wo];
                        let it = ((r / ho) * st + dt) as isize - pt as isize;
                        let ih = ((r % ho) * sh + dh) as isize - ph as isize;
                        if it < 0 || it >= t_in as isize || ih < 0 || ih >= h_in as isize {
                            continue;
                        }
                        let base = ((c * t_in + it as usize) * h_in + ih as usize) * w_in;
                        for (ow, &v) in seg.iter().enumerate() {
                            let iw = (ow * sw + dw) as isize - pw as isize;
                            if iw >= 0 && iw < w_in as isize {
                                let i = base + iw as usize;
                                dx[i] = dx[i] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T> SendPtr<T> {
    fn get(self) -> *mut T {
        self.0
    }
}

/// Forward convolution without retaining a cache.
pub fn conv3d<T: Element>(input: &Tensor<T>, params: &Conv3dParams<T>) -> Result<Tensor<T>> {
    let geo = Geometry::new(input.shape(), params)?;
    let p_out = geo.out_volume();
    let mut out = Tensor::<T>::zeros(&[geo.batch, geo.cout, geo.out[0], geo.out[1], geo.out[2]]);
    let chunks = geo.row_chunks();
    let mut tasks = Vec::with_capacity(geo.batch * geo.groups * chunks.len());
    for b in 0..geo.batch {
        for g in 0..geo.groups {
            tasks.extend(chunks.iter().map(|&rows| (b, g, rows)));
        }
    }

    let x = input.data();
    let w = params.weight.data();
    let out_ptr = SendPtr(out.data_mut().as_mut_ptr());
    let k = geo.patch_len();
    let wo = geo.out[2];
    let in_vol = geo.in_volume();

    tasks.par_iter().for_each_init(Vec::new, |col, &(b, g, (r0, r1))| {
        let n = (r1 - r0) * wo;
        let x_g = &x[(b * geo.cin + g * geo.cin_g) * in_vol..][..geo.cin_g * in_vol];
        let w_g = &w[g * geo.cout_g * k..][..geo.cout_g * k];
        let (b_ptr, rsb) = if geo.is_pointwise() {
            (x_g[r0 * wo..].as_ptr(), in_vol as isize)
        } else {
            col.resize(k * n, T::zero());
            im2col(x_g, &geo, r0, r1, col);
            (col.as_ptr(), n as isize)
        };
        // Tasks write disjoint column ranges of disjoint (b, g) row blocks.
        unsafe {
            let c_ptr = out_ptr.get().add((b * geo.cout + g * geo.cout_g) * p_out + r0 * wo);
            T::gemm(
                geo.cout_g,
                k,
                n,
                T::one(),
                w_g.as_ptr(),
                k as isize,
                1,
                b_ptr,
                rsb,
                1,
                T::zero(),
                c_ptr,
                p_out as isize,
                1,
            );
        }
    });

    if let Some(bias) = &params.bias {
        for (i, plane) in out.data_mut().chunks_mut(p_out).enumerate() {
            let bv = bias.data()[i % geo.cout];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Ok(out)
}

/// State kept by [`conv3d_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Conv3dCache<T = f32> {
    input: Tensor<T>,
    output_shape: Vec<usize>,
}

impl<T: Element> Conv3dCache<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }
}

#[derive(Clone, Debug)]
pub struct Conv3dGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_forward<T: Element>(
    input: &Tensor<T>,
    params: &Conv3dParams<T>,
) -> Result<(Tensor<T>, Conv3dCache<T>)> {
    let out = conv3d(input, params)?;
    let cache = Conv3dCache { input: input.clone(), output_shape: out.shape().to_vec() };
    Ok((out, cache))
}

pub fn conv3d_backward<T: Element>(
    grad_out: &Tensor<T>,
    cache: &Conv3dCache<T>,
    params: &Conv3dParams<T>,
) -> Result<Conv3dGrads<T>> {
    let geo = Geometry::new(cache.input.shape(), params)?;
    if grad_out.shape() != cache.output_shape.as_slice() {
        return Err(Error::dim(format!(
            "conv3d grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            cache.output_shape
        )));
    }
    let k = geo.patch_len();
    let p_out = geo.out_volume();
    let in_vol = geo.in_volume();
    let wo = geo.out[2];
    let chunks = geo.row_chunks();
    let x = cache.input.data();
    let w = params.weight.data();
    let dy = grad_out.data();

    let mut grad_input = Tensor::zeros(cache.input.shape());
    let partial_dw: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(geo.cin_g * in_vol)
        .enumerate()
        .map(|(i, dx_g)| {
            let (b, g) = (i / geo.groups, i % geo.groups);
            let x_g = &x[(b * geo.cin + g * geo.cin_g) * in_vol..][..geo.cin_g * in_vol];
            let w_g = &w[g * geo.cout_g * k..][..geo.cout_g * k];
            let dy_g = &dy[(b * geo.cout + g * geo.cout_g) * p_out..][..geo.cout_g * p_out];
            let mut dw = vec![T::zero(); geo.cout_g * k];
            let mut col = Vec::new();
            let mut dcol = Vec::new();
            for &(r0, r1) in &chunks {
                let n = (r1 - r0) * wo;
                let dy_ptr = dy_g[r0 * wo..].as_ptr();
                unsafe {
                    // dW += dY · colᵀ
                    let (b_ptr, csb) = if geo.is_pointwise() {
                        (x_g[r0 * wo..].as_ptr(), in_vol as isize)
                    } else {
                        col.resize(k * n, T::zero());
                        im2col(x_g, &geo, r0, r1, &mut col);
                        (col.as_ptr(), n as isize)
                    };
                    T::gemm(geo.cout_g, n, k, T::one(), dy_ptr, p_out as isize, 1, b_ptr, 1, csb, T::one(), dw.as_mut_ptr(), k as isize, 1);

                    // dcol = Wᵀ · dY
                    if geo.is_pointwise() {
                        let dst = dx_g[r0 * wo..].as_mut_ptr();
                        T::gemm(k, geo.cout_g, n, T::one(), w_g.as_ptr(), 1, k as isize, dy_ptr, p_out as isize, 1, T::one(), dst, in_vol as isize, 1);
                    } else {
                        dcol.resize(k * n, T::zero());
                        T::gemm(k, geo.cout_g, n, T::one(), w_g.as_ptr(), 1, k as isize, dy_ptr, p_out as isize, 1, T::zero(), dcol.as_mut_ptr(), n as isize, 1);
                        col2im(&dcol, &geo, r0, r1, dx_g);
                    }
                }
            }
            dw
        })
        .collect();

    let mut grad_weight = Tensor::zeros(params.weight.shape());
    let gw = grad_weight.data_mut();
    for (i, part) in partial_dw.iter().enumerate() {
        let g = i % geo.groups;
        for (dst, &v) in gw[g * geo.cout_g * k..][..geo.cout_g * k].iter_mut().zip(part) {
            *dst = *dst + v;
        }
    }

    let grad_bias = params.bias.as_ref().map(|_| {
        let mut gb = Tensor::zeros(&[geo.cout]);
        for (i, plane) in dy.chunks(p_out).enumerate() {
            let c = i % geo.cout;
            gb.data_mut()[c] = gb.data()[c] + plane.iter().copied().sum::<T>();
        }
        gb
    });

    Ok(Conv3dGrads { input: grad_input, weight: grad_weight, bias: grad_bias })
}
