//! Minimal dense layers with hand-written backward passes.
//!
//! The network is a fixed pipeline, so each layer exposes a `forward` that
//! returns its cache and a `backward` that consumes it and accumulates
//! parameter gradients. Everything is generic over [`Real`] so the same code
//! trains in `f32` and is gradient-checked in `f64`.

pub mod adam;
pub mod conv;
pub mod transformer;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};
use num_traits::Float;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

pub trait Real: Float + LinalgScalar + Sum + Debug + Display + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Real> Param<F> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![F::zero(); n],
            grad: vec![F::zero(); n],
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.fill(F::of(v));
        p
    }

    pub fn normal(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in &mut p.value {
            *v = F::of(dist.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn cast<G: Real>(&self) -> Param<G> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| G::of(v.f64())).collect(),
            grad: vec![G::zero(); self.value.len()],
        }
    }
}

/// Anything holding parameters, visited in a fixed order.
pub trait Module<F: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices, where `op(a)`
/// is `m`×`k` (stored `k`×`m` when `ta`) and `op(b)` is `k`×`n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    let av = if ta {
        ArrayView2::from_shape((k, m), a).expect("a shape").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("a shape")
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).expect("b shape").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("b shape")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("c shape");
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}

#[inline]
pub fn relu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

/// Row-wise softmax in place over rows of length `n`.
pub fn softmax_rows<F: Real>(data: &mut [F], n: usize) {
    for row in data.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn softmax_is_normalized() {
        let mut v = [1.0f64, 2.0, 3.0, 1000.0, 1000.0, 1000.0];
        softmax_rows(&mut v, 3);
        assert!((v[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-15);
    }
}
