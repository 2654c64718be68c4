use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Dense rank-4 value. The buffer is shared (`Arc`) so that leafing a
/// parameter into a graph is O(1); `make_mut` keeps in-place updates cheap
/// once the graph that borrowed it is dropped.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::BadShape {
                op: "tensor",
                shape,
                reason: format!("data length {} != numel {}", data.len(), shape.numel()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: Arc::new(vec![T::zero(); shape.numel()]) }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: Arc::new(vec![value; shape.numel()]) }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// Gaussian init. Samples are drawn in `f64` so the stream is identical
    /// for the `f32` and `f64` instantiations of the same seed.
    pub fn randn(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let data: Vec<T> = (0..shape.numel()).map(|_| T::from_f64(dist.sample(rng))).collect();
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let data: Vec<T> = (0..shape.numel()).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn buffer(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    pub(crate) fn from_arc(shape: Shape, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> T {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        let data: Vec<T> = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape, data: Arc::new(data) }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::<f64>::from_arc(self.shape, Arc::new(self.data.iter().map(|v| v.as_f64()).collect()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::<U>::from_arc(
            self.shape,
            Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        )
    }
}

/// Orthogonal initialization: a seeded Gaussian matrix orthonormalized with
/// modified Gram-Schmidt along its smaller dimension, scaled by `gain`.
/// Used for the frozen feature-extractor weights, where preserving signal
/// scale through depth matters more than learned structure.
pub fn orthogonal_init<T: Scalar>(shape: Shape, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let rows = shape.b;
    let cols = shape.c * shape.h * shape.w;
    let dist = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut a: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();

    // Orthonormalize the rows if rows <= cols, otherwise the columns.
    if rows <= cols {
        gram_schmidt_rows(&mut a, rows, cols);
    } else {
        let mut t = transpose(&a, rows, cols);
        gram_schmidt_rows(&mut t, cols, rows);
        a = transpose(&t, cols, rows);
    }

    let data: Vec<T> = a.iter().map(|&v| T::from_f64(v * gain)).collect();
    Tensor { shape, data: Arc::new(data) }
}

fn gram_schmidt_rows(a: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = (0..cols).map(|k| a[i * cols + k] * a[j * cols + k]).sum();
            for k in 0..cols {
                a[i * cols + k] -= dot * a[j * cols + k];
            }
        }
        let norm: f64 = (0..cols).map(|k| a[i * cols + k] * a[i * cols + k]).sum::<f64>().sqrt();
        // A vanishing norm after projection is vanishingly unlikely for
        // Gaussian draws; guard anyway.
        let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
        for k in 0..cols {
            a[i * cols + k] *= inv;
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}
