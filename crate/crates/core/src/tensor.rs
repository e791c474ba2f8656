//! Dense row-major tensors and the flat-loop kernels behind them.
//!
//! [`Tensor`] is a plain value: a shape plus a contiguous buffer. It knows
//! nothing about gradients — differentiation lives in [`crate::tape`], which
//! stores `Tensor` values at every node. The free functions at the bottom are
//! the shared kernels (matmul variants, broadcasting) used by both the forward
//! ops and their adjoints.

use crate::error::{Error, Result};
use crate::num::Element;

/// Shape plus contiguous row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Build a tensor from a shape and matching data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    /// Tensor of the given shape filled with one value.
    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Convert an `f64` buffer into a tensor of the working scalar type.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        let converted = data
            .iter()
            .map(|&x| T::from_f64(x).ok_or_else(|| Error::contract("f64 value not representable")))
            .collect::<Result<Vec<T>>>()?;
        Tensor::new(shape, converted)
    }

    /// Copy the buffer out as `f64` (used by checkpoints and reports).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|x| x.to_f64().expect("element converts to f64"))
            .collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// True for rank-0 or single-element tensors.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// Whether every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element at a 2-D position; panics out of range (test helper).
    pub fn at2(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.ndim(), 2);
        self.data[row * self.shape[1] + col]
    }
}

// ── shape and broadcasting helpers ──────────────────────────────────────────

/// Broadcast two shapes under right-aligned NumPy rules.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for (i, o) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, n - 1 - i);
        let db = dim_from_right(b, n - 1 - i);
        *o = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Dimension `k` positions from the right, treating missing dims as 1.
fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Decompose a linear index over `shape` into coordinates.
pub fn linear_to_coords(mut idx: usize, shape: &[usize]) -> Vec<usize> {
    let mut coords = vec![0usize; shape.len()];
    for i in (0..shape.len()).rev() {
        coords[i] = idx % shape[i];
        idx /= shape[i];
    }
    coords
}

/// Linear index into `shape` for output coordinates `coords` (right-aligned),
/// collapsing broadcast dimensions of size 1 to offset 0.
pub fn coords_to_linear_bcast(coords: &[usize], shape: &[usize]) -> usize {
    let mut idx = 0usize;
    for (k, &dim) in shape.iter().enumerate() {
        let c = coords[coords.len() - shape.len() + k];
        let c = if dim == 1 { 0 } else { c };
        idx = idx * dim + c;
    }
    idx
}

/// Apply `f` elementwise over two broadcast-compatible tensors.
pub fn broadcast_apply<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for idx in 0..numel {
        let coords = linear_to_coords(idx, &out_shape);
        let av = a.data()[coords_to_linear_bcast(&coords, a.shape())];
        let bv = b.data()[coords_to_linear_bcast(&coords, b.shape())];
        data.push(f(av, bv));
    }
    Tensor::new(out_shape, data)
}

/// Sum a gradient of `grad_shape` down to `target_shape` (the adjoint of a
/// broadcast): broadcast dimensions collapse by summation.
pub fn reduce_to_shape<T: Element>(
    grad: &[T],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<T> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![T::zero(); target_numel];
    for (idx, &g) in grad.iter().enumerate() {
        let coords = linear_to_coords(idx, grad_shape);
        out[coords_to_linear_bcast(&coords, target_shape)] += g;
    }
    out
}

// ── matmul kernels (all accumulate into `out`) ──────────────────────────────

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn mm_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn mm_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn mm_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with four-lane accumulation so the loop vectorizes.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_buffer() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn broadcast_shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shapes(&[2, 3], &[4]), None);
    }

    #[test]
    fn broadcast_apply_adds_bias_row() {
        let a = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = broadcast_apply("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_dims() {
        // Gradient of shape [2,3] reduced to a bias of shape [3].
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = reduce_to_shape(&g, &[2, 3], &[3]);
        assert_eq!(r, vec![5.0, 7.0, 9.0]);
        // And down to a scalar-like [1].
        let r1 = reduce_to_shape(&g, &[2, 3], &[1]);
        assert_eq!(r1, vec![21.0]);
    }

    #[test]
    fn mm_nn_matches_hand_product() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        mm_nn(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn mm_nt_and_mm_tn_agree_with_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // [2,3]
        // a · bᵀ : [2,2]
        let mut nt = [0.0; 4];
        mm_nt(&a, &b, 2, 3, 2, &mut nt);
        assert_eq!(nt, [50.0, 68.0, 122.0, 167.0]);
        // aᵀ · b : [3,3]
        let mut tn = [0.0; 9];
        mm_tn(&a, &b, 2, 3, 3, &mut tn);
        assert_eq!(tn, [47.0, 52.0, 57.0, 64.0, 71.0, 78.0, 81.0, 90.0, 99.0]);
    }

    #[test]
    fn kernels_accumulate_rather_than_overwrite() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [2.0, 0.0, 0.0, 2.0];
        let mut out = [1.0; 4];
        mm_nn(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [3.0, 1.0, 1.0, 3.0]);
    }
}
