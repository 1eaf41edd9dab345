//! Small numeric helpers shared by the attention and model code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand_distr::{Distribution, StandardNormal};

use crate::io::Rng;

/// Floating-point element type for model code (`f32` or `f64`).
pub trait Real:
    Float
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const BITS: u32 = 32;
}

impl Real for f64 {
    const BITS: u32 = 64;
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
    out
}

/// Backward of a row-wise softmax: `dz = p ⊙ (g − ⟨g, p⟩)` per row.
pub fn softmax_rows_backward<T: Real>(probs: ArrayView2<T>, grad: ArrayView2<T>) -> Array2<T> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.rows().into_iter().zip(grad.rows()).zip(out.rows_mut()) {
        let dot = p.iter().zip(g.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((o, &p), &g) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
            *o = p * (g - dot);
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn randn<T: Real>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Column sums as a `1 × n` row, the shape used for bias gradients.
pub fn col_sums<T: Real>(a: ArrayView2<T>) -> Array2<T> {
    let s: Array1<T> = a.sum_axis(Axis(0));
    s.insert_axis(Axis(0))
}

pub fn cast<A: Real, B: Real>(a: &Array2<A>) -> Array2<B> {
    a.mapv(|v| B::of(v.f64()))
}
