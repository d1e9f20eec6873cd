//! Dense row-major tensors and the scalar precision policy.
//!
//! Everything numeric in the crate is generic over [`Scalar`], implemented
//! for `f32` and `f64`. Training normally runs in `f32`; verification
//! (gradient checks, metric oracles) runs the same code in `f64`.

use crate::error::{Error, Result};
use std::fmt::Debug;

/// Element type tag used in binary formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            t => Err(Error::Data(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type for tensors and parameters.
pub trait Scalar:
    num_traits::Float + Copy + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the start of `bytes`; callers guarantee length.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Dense row-major tensor. Shape `[B, C, H, W]` is the convention for image
/// batches; other ranks appear for weights and per-pixel maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat index for a rank-4 `[B, C, H, W]` tensor.
    #[inline(always)]
    pub fn idx4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline(always)]
    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx4(b, c, y, x)]
    }

    /// Casts element-wise via `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Errors if any element is NaN or infinite. `what` names the tensor in
    /// the error message.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "{what} contains non-finite value {:?} at flat index {i}",
                    v
                )));
            }
        }
        Ok(())
    }

    /// Debug-build finite check used after each network operation.
    #[inline]
    pub fn debug_ensure_finite(&self, what: &str) -> Result<()> {
        if cfg!(debug_assertions) {
            self.ensure_finite(what)
        } else {
            Ok(())
        }
    }
}

/// Per-pixel boolean mask for a single `H x W` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask {h}x{w} needs {} entries, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Mask { h, w, data })
    }

    pub fn all_true(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![true; h * w] }
    }

    pub fn all_false(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Horizontal mirror, matching the image/depth flip augmentation.
    pub fn flip_lr(&self) -> Mask {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.data[y * self.w + x] = self.data[y * self.w + (self.w - 1 - x)];
            }
        }
        out
    }

    /// Run-length encoding as (start, len) pairs over the flat row-major
    /// order; used in JSON manifests.
    pub fn to_rle(&self) -> Vec<(u32, u32)> {
        let mut runs = Vec::new();
        let mut i = 0usize;
        while i < self.data.len() {
            if self.data[i] {
                let start = i;
                while i < self.data.len() && self.data[i] {
                    i += 1;
                }
                runs.push((start as u32, (i - start) as u32));
            } else {
                i += 1;
            }
        }
        runs
    }

    pub fn from_rle(h: usize, w: usize, runs: &[(u32, u32)]) -> Result<Self> {
        let mut data = vec![false; h * w];
        for &(start, len) in runs {
            let (s, l) = (start as usize, len as usize);
            if s + l > data.len() {
                return Err(Error::Data(format!(
                    "rle run ({start},{len}) exceeds mask of {} pixels",
                    data.len()
                )));
            }
            for b in &mut data[s..s + l] {
                *b = true;
            }
        }
        Ok(Mask { h, w, data })
    }
}
