//! Flat parameter storage with named segments.
//!
//! A [`ParamVector`] holds every learnable tensor of a network as named
//! segments in a fixed order. Element-wise arithmetic across whole vectors
//! is what the meta-update and the optimizers operate on; layout mismatches
//! are reported as shape errors rather than silently broadcast.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T: Scalar> {
    segments: Vec<Segment<T>>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(segments: Vec<Segment<T>>) -> Result<Self> {
        for s in &segments {
            let n: usize = s.shape.iter().product();
            if n != s.values.len() {
                return Err(Error::Shape(format!(
                    "segment '{}': shape {:?} implies {} values, got {}",
                    s.name,
                    s.shape,
                    n,
                    s.values.len()
                )));
            }
        }
        let mut names: Vec<&str> = segments.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != segments.len() {
            return Err(Error::Config("duplicate segment names in parameter vector".into()));
        }
        Ok(ParamVector { segments })
    }

    pub fn segments(&self) -> &[Segment<T>] {
        &self.segments
    }

    /// Mutable access to segment values. Callers must not change names or
    /// shapes; layout invariants are only checked at construction.
    pub fn segments_mut(&mut self) -> &mut [Segment<T>] {
        &mut self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment<T>> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same segment names and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamVector<T> {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    values: vec![T::zero(); s.values.len()],
                })
                .collect(),
        }
    }

    /// Casts every value via `f64`.
    pub fn cast<U: Scalar>(&self) -> ParamVector<U> {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    values: s.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &T> {
        self.segments.iter().flat_map(|s| s.values.iter())
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.segments.iter_mut().flat_map(|s| s.values.iter_mut())
    }

    /// Checks that `other` has identical segment names and shapes in the
    /// same order.
    pub fn check_same_layout(&self, other: &ParamVector<T>) -> Result<()> {
        if self.segments.len() != other.segments.len() {
            return Err(Error::Shape(format!(
                "parameter vectors have {} vs {} segments",
                self.segments.len(),
                other.segments.len()
            )));
        }
        for (a, b) in self.segments.iter().zip(&other.segments) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "segment mismatch: '{}' {:?} vs '{}' {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    fn zip_map(&self, other: &ParamVector<T>, f: impl Fn(T, T) -> T) -> Result<ParamVector<T>> {
        self.check_same_layout(other)?;
        let mut out = self.clone();
        for (so, sb) in out.segments.iter_mut().zip(&other.segments) {
            for (a, &b) in so.values.iter_mut().zip(&sb.values) {
                *a = f(*a, b);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &ParamVector<T>) -> Result<ParamVector<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector<T>) -> Result<ParamVector<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> ParamVector<T> {
        let mut out = self.clone();
        for v in out.iter_values_mut() {
            *v = *v * k;
        }
        out
    }

    /// `self + k * other`, the workhorse of every update rule.
    pub fn axpy(&self, k: T, other: &ParamVector<T>) -> Result<ParamVector<T>> {
        self.zip_map(other, |a, b| a + k * b)
    }

    /// In-place `self += k * other`.
    pub fn axpy_mut(&mut self, k: T, other: &ParamVector<T>) -> Result<()> {
        self.check_same_layout(other)?;
        for (so, sb) in self.segments.iter_mut().zip(&other.segments) {
            for (a, &b) in so.values.iter_mut().zip(&sb.values) {
                *a = *a + k * b;
            }
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for s in &self.segments {
            for (i, v) in s.values.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{what}: segment '{}' has non-finite value {:?} at index {i}",
                        s.name, v
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest absolute element.
    pub fn max_abs(&self) -> f64 {
        self.iter_values().fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    /// Largest element-wise absolute difference to `other`.
    pub fn max_abs_diff(&self, other: &ParamVector<T>) -> Result<f64> {
        self.check_same_layout(other)?;
        let mut m = 0.0f64;
        for (a, b) in self.iter_values().zip(other.iter_values()) {
            m = m.max((a.as_f64() - b.as_f64()).abs());
        }
        Ok(m)
    }

    /// Euclidean norm computed in `f64`.
    pub fn norm_l2(&self) -> f64 {
        self.iter_values().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }
}
