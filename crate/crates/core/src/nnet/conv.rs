//! Valid-mode 3D convolution as im2col + matrix product.
//!
//! The reduction index runs input-channel major, then kernel offset with x
//! fastest, and the bias is added after the reduction. Every output voxel
//! therefore sees the same summation order no matter how the input was
//! tiled, which keeps tiled and whole-volume inference bitwise equal.

use super::real::{gemm, MatRef};
use super::{Batch, Real};
use crate::error::{Error, Result};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// One convolution layer. Weights are laid out `(out, in, kz, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, activation: Activation) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weights: vec![T::zero(); out_channels * in_channels * kernel.pow(3)],
            bias: vec![T::zero(); out_channels],
            activation,
        }
    }

    /// Reduction length of one output value.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    pub fn weight_index(&self, oc: usize, ic: usize, dx: usize, dy: usize, dz: usize) -> usize {
        let k = self.kernel;
        (((oc * self.in_channels + ic) * k + dz) * k + dy) * k + dx
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Shape(format!("kernel extent {} must be odd", self.kernel)));
        }
        if self.weights.len() != self.out_channels * self.fan_in() || self.bias.len() != self.out_channels {
            return Err(Error::Shape("layer parameter arrays do not match channel counts".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite layer parameter".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ConvLayer<U> {
        ConvLayer {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            weights: self.weights.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            activation: self.activation,
        }
    }
}

struct Geometry {
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    batch: usize,
    kernel: usize,
    k: usize,
    rows_total: usize,
    rows_per_chunk: usize,
}

impl Geometry {
    fn new<T: Real>(input: &Batch<T>, layer: &ConvLayer<T>) -> Result<Self> {
        if input.channels != layer.in_channels {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {}",
                layer.in_channels, input.channels
            )));
        }
        let kernel = layer.kernel;
        if input.dims.iter().any(|&d| d < kernel) {
            return Err(Error::Shape(format!(
                "input spatial dims {:?} smaller than kernel {kernel}",
                input.dims
            )));
        }
        let out_dims = input.dims.map(|d| d - kernel + 1);
        let k = layer.fan_in();
        let rows_total = input.batch * out_dims[1] * out_dims[2];
        let rows_per_chunk = (COL_BUDGET / (k * out_dims[0])).clamp(1, rows_total.max(1));
        Ok(Self {
            in_dims: input.dims,
            out_dims,
            batch: input.batch,
            kernel,
            k,
            rows_total,
            rows_per_chunk,
        })
    }

    fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows_total)
            .step_by(self.rows_per_chunk)
            .map(move |r0| (r0, (r0 + self.rows_per_chunk).min(self.rows_total)))
    }

    /// Start of the input x-row feeding output row `r` at kernel offset
    /// `(ic, dy, dz)` (before adding `dx`).
    #[inline]
    fn src_row(&self, ic: usize, r: usize, dy: usize, dz: usize) -> usize {
        let [_, ody, odz] = self.out_dims;
        let oy = r % ody;
        let oz = (r / ody) % odz;
        let b = r / (ody * odz);
        let [nx, ny, nz] = self.in_dims;
        (((ic * self.batch + b) * nz + oz + dz) * ny + oy + dy) * nx
    }

    #[inline]
    fn split_k(&self, kk: usize) -> (usize, usize, usize, usize) {
        let ks = self.kernel;
        let k3 = ks * ks * ks;
        let (ic, d) = (kk / k3, kk % k3);
        (ic, d % ks, (d / ks) % ks, d / (ks * ks))
    }

    fn im2col<T: Real>(&self, input: &[T], r0: usize, r1: usize, col: &mut [T]) {
        let odx = self.out_dims[0];
        let nc = (r1 - r0) * odx;
        for kk in 0..self.k {
            let (ic, dx, dy, dz) = self.split_k(kk);
            let dst = &mut col[kk * nc..(kk + 1) * nc];
            for (j, r) in (r0..r1).enumerate() {
                let s = self.src_row(ic, r, dy, dz) + dx;
                dst[j * odx..(j + 1) * odx].copy_from_slice(&input[s..s + odx]);
            }
        }
    }

    fn col2im_add<T: Real>(&self, col: &[T], r0: usize, r1: usize, grad_in: &mut [T]) {
        let odx = self.out_dims[0];
        let nc = (r1 - r0) * odx;
        for kk in 0..self.k {
            let (ic, dx, dy, dz) = self.split_k(kk);
            let src = &col[kk * nc..(kk + 1) * nc];
            for (j, r) in (r0..r1).enumerate() {
                let s = self.src_row(ic, r, dy, dz) + dx;
                for (g, &v) in grad_in[s..s + odx].iter_mut().zip(&src[j * odx..(j + 1) * odx]) {
                    *g += v;
                }
            }
        }
    }
}

/// `out[c, p] = act(bias[c] + sum_{ic, d} w[c, ic, d] * in[ic, p + d])`.
pub fn conv3d_valid_forward<T: Real>(input: &Batch<T>, layer: &ConvLayer<T>) -> Result<Batch<T>> {
    let geo = Geometry::new(input, layer)?;
    let mut out = Batch::zeros(layer.out_channels, geo.batch, geo.out_dims);
    let n_total = geo.batch * geo.out_voxels();
    let odx = geo.out_dims[0];
    let mut col = vec![T::zero(); geo.k * geo.rows_per_chunk * odx];
    let w = MatRef {
        data: &layer.weights,
        offset: 0,
        rs: geo.k,
        cs: 1,
    };
    for (r0, r1) in geo.chunks() {
        let nc = (r1 - r0) * odx;
        geo.im2col(&input.data, r0, r1, &mut col);
        let colm = MatRef {
            data: &col[..geo.k * nc],
            offset: 0,
            rs: nc,
            cs: 1,
        };
        gemm(
            layer.out_channels,
            geo.k,
            nc,
            T::one(),
            w,
            colm,
            T::zero(),
            &mut out.data,
            r0 * odx,
            n_total,
            1,
        );
    }
    for (c, row) in out.data.chunks_exact_mut(n_total).enumerate() {
        let b = layer.bias[c];
        match layer.activation {
            Activation::Linear => row.iter_mut().for_each(|v| *v += b),
            Activation::Relu => row.iter_mut().for_each(|v| {
                let s = *v + b;
                *v = if s > T::zero() { s } else { T::zero() };
            }),
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through one layer, given the layer's input,
/// its forward output and the loss gradient with respect to that output.
/// The input gradient is only formed when `want_input_grad` is set.
pub fn conv3d_valid_backward<T: Real>(
    input: &Batch<T>,
    output: &Batch<T>,
    layer: &ConvLayer<T>,
    grad_out: &Batch<T>,
    want_input_grad: bool,
) -> Result<(LayerGrads<T>, Option<Batch<T>>)> {
    let geo = Geometry::new(input, layer)?;
    if grad_out.dims != geo.out_dims
        || grad_out.channels != layer.out_channels
        || grad_out.batch != geo.batch
        || output.data.len() != grad_out.data.len()
    {
        return Err(Error::Shape("output gradient does not match layer output".into()));
    }
    let n_total = geo.batch * geo.out_voxels();
    let odx = geo.out_dims[0];

    let mut dz = grad_out.data.clone();
    if layer.activation == Activation::Relu {
        for (g, &o) in dz.iter_mut().zip(&output.data) {
            if o <= T::zero() {
                *g = T::zero();
            }
        }
    }
    let bias = dz
        .chunks_exact(n_total)
        .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v))
        .collect();

    let mut weights = vec![T::zero(); layer.weights.len()];
    let mut grad_in = want_input_grad.then(|| Batch::zeros(input.channels, geo.batch, geo.in_dims));
    let mut col = vec![T::zero(); geo.k * geo.rows_per_chunk * odx];
    let mut dcol = if want_input_grad { col.clone() } else { Vec::new() };
    for (i, (r0, r1)) in geo.chunks().enumerate() {
        let nc = (r1 - r0) * odx;
        let dz_chunk = MatRef {
            data: &dz,
            offset: r0 * odx,
            rs: n_total,
            cs: 1,
        };
        geo.im2col(&input.data, r0, r1, &mut col);
        // dW += dZ[:, chunk] * col^T
        gemm(
            layer.out_channels,
            nc,
            geo.k,
            T::one(),
            dz_chunk,
            MatRef {
                data: &col[..geo.k * nc],
                offset: 0,
                rs: 1,
                cs: nc,
            },
            if i == 0 { T::zero() } else { T::one() },
            &mut weights,
            0,
            geo.k,
            1,
        );
        if let Some(gi) = grad_in.as_mut() {
            // dcol = W^T * dZ[:, chunk]
            gemm(
                geo.k,
                layer.out_channels,
                nc,
                T::one(),
                MatRef {
                    data: &layer.weights,
                    offset: 0,
                    rs: 1,
                    cs: geo.k,
                },
                dz_chunk,
                T::zero(),
                &mut dcol[..geo.k * nc],
                0,
                nc,
                1,
            );
            geo.col2im_add(&dcol[..geo.k * nc], r0, r1, &mut gi.data);
        }
    }
    Ok((LayerGrads { weights, bias }, grad_in))
}
