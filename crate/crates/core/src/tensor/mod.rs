//! Dense tensors and a reverse-mode autodiff graph over the fixed set of
//! primitives the segmentation network needs.

mod conv;
mod gradcheck;
mod graph;
mod sgd;

pub use gradcheck::{grad_check, Primitive, ALL_PRIMITIVES};
pub use graph::{Graph, NodeId, INSTANCE_NORM_EPS, LEAKY_RELU_SLOPE};
pub use sgd::SgdOptimizer;

use std::fmt;

/// Element type of tensor buffers. Training runs in `f32`; gradient checks
/// run the same code paths in `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C <- alpha * A * B + beta * C with explicit strides.
    ///
    /// # Safety
    /// Pointers must be valid for the given dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Errors from tensor construction, graph ops, and the optimizer.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{primitive}: {message}")]
    ShapeMismatch {
        primitive: &'static str,
        message: String,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?} (expects {expected})")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

fn shape_err(primitive: &'static str, message: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        primitive,
        message: message.into(),
    }
}

/// Dense row-major N-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }
}

/// Integer class-index map of shape `[B, H, W]` (one byte per pixel).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), batch * height * width);
        Self {
            batch,
            height,
            width,
            data,
        }
    }

    pub fn single(height: usize, width: usize, data: Vec<u8>) -> Self {
        Self::new(1, height, width, data)
    }

    /// Stacks single-sample maps into one batch.
    pub fn stack(maps: &[&ClassMap]) -> Self {
        assert!(!maps.is_empty());
        let (h, w) = (maps[0].height, maps[0].width);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            assert_eq!((m.batch, m.height, m.width), (1, h, w));
            data.extend_from_slice(&m.data);
        }
        Self::new(maps.len(), h, w, data)
    }

    pub fn at(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }
}

/// One-hot encodes class labels into a `[B, n_classes, H, W]` tensor.
///
/// Non-differentiable by construction: the result is plain data, typically
/// wrapped as a constant graph leaf.
pub fn one_hot<E: Scalar>(labels: &ClassMap, n_classes: usize) -> Result<Tensor<E>, TensorError> {
    let (b, h, w) = (labels.batch, labels.height, labels.width);
    let plane = h * w;
    let mut data = vec![E::zero(); b * n_classes * plane];
    for bi in 0..b {
        for p in 0..plane {
            let class = labels.data[bi * plane + p] as usize;
            if class >= n_classes {
                return Err(shape_err(
                    "one_hot",
                    format!("label {class} out of range for {n_classes} classes"),
                ));
            }
            data[(bi * n_classes + class) * plane + p] = E::one();
        }
    }
    Tensor::new(vec![b, n_classes, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_mismatched_data() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn one_hot_places_single_one_per_pixel() {
        let labels = ClassMap::single(1, 3, vec![0, 2, 1]);
        let t = one_hot::<f32>(&labels, 3).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 3]);
        assert_eq!(t.data(), &[1., 0., 0., 0., 0., 1., 0., 1., 0.]);
    }

    #[test]
    fn one_hot_rejects_out_of_range_label() {
        let labels = ClassMap::single(1, 1, vec![4]);
        assert!(one_hot::<f32>(&labels, 4).is_err());
    }
}
