//! Dense row-major tensors, a thin gemm wrapper, and the parameter-set plumbing
//! (optimizer state, EMA, digests) shared by every trainable model.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Scalar type the models are generic over. Training runs in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every addressed element of
    /// `a`, `b`, `c` must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Immutable strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * rs + (cols - 1) * cs < data.len(), "matrix view out of bounds");
        }
        Self { data, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// Mutable strided matrix view.
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * rs + (cols - 1) * cs < data.len(), "matrix view out of bounds");
        }
        Self { data, rows, cols, rs, cs }
    }
}

/// `c = alpha * a·b + beta * c`.
pub fn gemm<T: Float>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "row mismatch");
    assert_eq!(b.cols, c.cols, "column mismatch");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked at construction, and `c` is an
    // exclusive borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::c(normal.sample(rng)))
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::c(x.f64())).collect(),
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let w = *self.shape.last().unwrap_or(&1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = *self.shape.last().unwrap_or(&1);
        &mut self.data[i * w..(i + 1) * w]
    }
}

/// A named collection of tensors with a fixed traversal order.
///
/// `named` and `named_mut` must yield the same names in the same order.
pub trait ParamSet<T: Float>: Clone {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn to_named_map(&self) -> BTreeMap<String, Tensor<T>> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Overwrite every tensor from `source`, casting element type. Shapes and
    /// names must match exactly; extra entries in `source` are ignored.
    fn assign_from<U: Float>(&mut self, source: &BTreeMap<String, Tensor<U>>) -> Result<()> {
        for (name, dst) in self.named_mut() {
            let src = source
                .get(&name)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` missing")))?;
            if src.shape != dst.shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape, dst.shape
                )));
            }
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = T::c(s.f64());
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and `f32` little-endian values.
    fn digest(&self) -> String {
        let mut named = self.named();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        digest_tensors(named.into_iter())
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

pub(crate) fn digest_tensors<'a, T: Float>(
    named: impl Iterator<Item = (String, &'a Tensor<T>)>,
) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in named {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for &d in &t.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for &x in &t.data {
            hasher.update((x.f64() as f32).to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<T: Float, P: ParamSet<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::c(max_norm / (norm + 1e-12)));
    }
    norm
}

/// AdamW with decoupled weight decay applied to tensors of rank ≥ 2.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new<P: ParamSet<T>>(params: &P, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let step_size = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if p.shape.len() >= 2 && self.weight_decay > 0.0 {
                let decay = T::c(1.0 - lr * self.weight_decay);
                p.data.iter_mut().for_each(|x| *x *= decay);
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p.data[i] -= step_size * m[i] / denom;
            }
        }
    }
}

/// Exponential moving average of a parameter set.
///
/// The effective decay is `min(decay, (1 + n) / (10 + n))` after `n` updates,
/// so short runs are not dominated by the initialization.
#[derive(Debug, Clone)]
pub struct Ema<P> {
    pub decay: f64,
    pub shadow: P,
    updates: u64,
}

impl<P> Ema<P> {
    pub fn new(initial: P, decay: f64) -> Self {
        Self { decay, shadow: initial, updates: 0 }
    }

    pub fn effective_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update<T: Float>(&mut self, live: &P)
    where
        P: ParamSet<T>,
    {
        let d = self.effective_decay();
        let (keep, take) = (T::c(d), T::c(1.0 - d));
        for (s, l) in self.shadow.tensors_mut().into_iter().zip(live.tensors()) {
            if d == 0.0 {
                s.data.copy_from_slice(&l.data);
            } else {
                for (a, &b) in s.data.iter_mut().zip(&l.data) {
                    *a = keep * *a + take * b;
                }
            }
        }
        self.updates += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(1.0, MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 0.0, MatMut::new(&mut c, 2, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ·a is 3x3 symmetric
        let mut ata = vec![0.0; 9];
        gemm(1.0, MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, MatMut::new(&mut ata, 3, 3));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(ata[i * 3 + j], ata[j * 3 + i]);
            }
        }
        assert_eq!(ata[0], 0.0 * 0.0 + 3.0 * 3.0);
    }

    #[derive(Clone)]
    struct Pair(Tensor<f64>, Tensor<f64>);

    impl ParamSet<f64> for Pair {
        fn named(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("a".into(), &self.0), ("b".into(), &self.1)]
        }
        fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
            vec![("a".into(), &mut self.0), ("b".into(), &mut self.1)]
        }
    }

    #[test]
    fn ema_zero_decay_tracks_live() {
        let live = Pair(Tensor::filled(&[2, 2], 3.0), Tensor::filled(&[3], -1.0));
        let mut ema = Ema::new(live.zeros_like(), 0.0);
        ema.update(&live);
        assert_eq!(ema.shadow.0, live.0);
        assert_eq!(ema.shadow.1, live.1);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut p = Pair(Tensor::filled(&[2, 2], 1.0), Tensor::filled(&[3], 1.0));
        let g = Pair(Tensor::filled(&[2, 2], 1.0), Tensor::filled(&[3], -1.0));
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 0.1);
        assert!(p.0.data.iter().all(|&x| x < 1.0));
        assert!(p.1.data.iter().all(|&x| x > 1.0));
    }

    #[test]
    fn digest_ignores_order_but_not_values() {
        let p = Pair(Tensor::filled(&[2], 1.0), Tensor::filled(&[1], 2.0));
        let mut q = p.clone();
        assert_eq!(p.digest(), q.digest());
        q.1.data[0] = 2.5;
        assert_ne!(p.digest(), q.digest());
    }
}
