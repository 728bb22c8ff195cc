use super::Real;
use crate::error::{Error, Result};

/// A single multi-channel volume: shape `(channels, nx, ny, nz)`, channel
/// major, then x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.shape[3] + z) * self.shape[2] + y) * self.shape[1] + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(c, x, y, z)]
    }

    /// Voxel values of one channel (x fastest).
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[c * n..(c + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A batch of equally shaped tensors, stored as `(channels, batch, nx, ny,
/// nz)` so a convolution over the whole batch is one matrix product.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub(crate) channels: usize,
    pub(crate) batch: usize,
    pub(crate) dims: [usize; 3],
    pub(crate) data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn zeros(channels: usize, batch: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            batch,
            dims,
            data: vec![T::zero(); channels * batch * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_tensors(items: &[&Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?
            .shape();
        if let Some(bad) = items.iter().find(|t| t.shape() != first) {
            return Err(Error::Shape(format!(
                "batch members differ in shape: {:?} vs {:?}",
                first,
                bad.shape()
            )));
        }
        let mut out = Self::zeros(first[0], items.len(), [first[1], first[2], first[3]]);
        let nv = out.voxels();
        for (b, t) in items.iter().enumerate() {
            for c in 0..out.channels {
                let dst = (c * out.batch + b) * nv;
                out.data[dst..dst + nv].copy_from_slice(t.channel(c));
            }
        }
        Ok(out)
    }

    pub fn single(t: &Tensor4<T>) -> Self {
        Self::from_tensors(&[t]).expect("one tensor is a valid batch")
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Values of channel `c` for batch member `b`.
    pub fn slot(&self, c: usize, b: usize) -> &[T] {
        let nv = self.voxels();
        let o = (c * self.batch + b) * nv;
        &self.data[o..o + nv]
    }

    pub fn slot_mut(&mut self, c: usize, b: usize) -> &mut [T] {
        let nv = self.voxels();
        let o = (c * self.batch + b) * nv;
        &mut self.data[o..o + nv]
    }

    pub fn member(&self, b: usize) -> Tensor4<T> {
        let mut data = Vec::with_capacity(self.channels * self.voxels());
        for c in 0..self.channels {
            data.extend_from_slice(self.slot(c, b));
        }
        Tensor4::from_vec([self.channels, self.dims[0], self.dims[1], self.dims[2]], data)
            .expect("consistent shape")
    }
}
