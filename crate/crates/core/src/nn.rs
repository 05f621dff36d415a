//! Forward and backward kernels for the layers the models are built from.
//! Activations are flat row-major buffers of `rows × width`.

use crate::tensor::{gemm, Float, MatMut, MatRef, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·w + b` with `w` stored as `din × dout`.
pub fn linear<T: Float>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), rows * din);
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(&b.data);
    }
    gemm(T::one(), MatRef::new(x, rows, din), MatRef::new(&w.data, din, dout), T::one(), MatMut::new(&mut y, rows, dout));
    y
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` when grads are given; returns `dy·wᵀ`
/// when `want_dx`.
pub fn linear_backward<T: Float>(
    x: &[T],
    rows: usize,
    w: &Tensor<T>,
    dy: &[T],
    grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
    want_dx: bool,
) -> Vec<T> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    if let Some((gw, gb)) = grads {
        gemm(T::one(), MatRef::new(x, rows, din).t(), MatRef::new(dy, rows, dout), T::one(), MatMut::new(&mut gw.data, din, dout));
        for r in 0..rows {
            for (g, &d) in gb.data.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                *g += d;
            }
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); rows * din];
    gemm(T::one(), MatRef::new(dy, rows, dout), MatRef::new(&w.data, din, dout).t(), T::zero(), MatMut::new(&mut dx, rows, din));
    dx
}

/// Per-row normalization statistics retained for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Float>(x: &[T], width: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / width;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_w = T::c(1.0 / width as f64);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..width {
            let h = (row[j] - mean) * rs;
            xhat[r * width + j] = h;
            y[r * width + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Float>(
    dy: &[T],
    width: usize,
    gamma: &Tensor<T>,
    cache: &LayerNormCache<T>,
    grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
) -> Vec<T> {
    let rows = dy.len() / width;
    if let Some((gg, gb)) = grads {
        for r in 0..rows {
            for j in 0..width {
                let d = dy[r * width + j];
                gg.data[j] += d * cache.xhat[r * width + j];
                gb.data[j] += d;
            }
        }
    }
    let inv_w = T::c(1.0 / width as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..rows {
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let d = &dy[r * width..(r + 1) * width];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for j in 0..width {
            let dxh = d[j] * gamma.data[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let rs = cache.rstd[r];
        for j in 0..width {
            let dxh = d[j] * gamma.data[j];
            dx[r * width + j] = rs * (dxh - inv_w * sum_dxh - xh[j] * inv_w * sum_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu<T: Float>(x: &[T]) -> Vec<T> {
    let (c, a, half) = (T::c(GELU_C), T::c(GELU_A), T::c(0.5));
    x.iter()
        .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

/// `dx = dy · gelu'(x)`.
pub fn gelu_backward<T: Float>(x: &[T], dy: &[T]) -> Vec<T> {
    let (c, a, half, three) = (T::c(GELU_C), T::c(GELU_A), T::c(0.5), T::c(3.0));
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
            d * (half * (T::one() + t) + half * v * dt)
        })
        .collect()
}

pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Row-wise log-softmax of a `rows × width` buffer.
pub fn log_softmax_rows<T: Float>(x: &[T], width: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(width) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Layout of a batched multi-head attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Bidirectional scaled dot-product attention. Inputs are `(batch·seq) × d`;
/// returns the concatenated head outputs and the attention probabilities
/// laid out `batch × heads × seq × seq`.
pub fn attention<T: Float>(q: &[T], k: &[T], v: &[T], s: AttnShape) -> (Vec<T>, Vec<T>) {
    let d = s.width();
    let scale = T::c(1.0 / (s.head_dim as f64).sqrt());
    let mut out = vec![T::zero(); s.batch * s.seq * d];
    let mut probs = vec![T::zero(); s.batch * s.heads * s.seq * s.seq];
    for b in 0..s.batch {
        let base = b * s.seq * d;
        for h in 0..s.heads {
            let off = base + h * s.head_dim;
            let p_off = (b * s.heads + h) * s.seq * s.seq;
            let p = &mut probs[p_off..p_off + s.seq * s.seq];
            gemm(
                scale,
                MatRef::strided(&q[off..], s.seq, s.head_dim, d, 1),
                MatRef::strided(&k[off..], s.seq, s.head_dim, d, 1).t(),
                T::zero(),
                MatMut::new(p, s.seq, s.seq),
            );
            for row in p.chunks_mut(s.seq) {
                softmax_in_place(row);
            }
            gemm(
                T::one(),
                MatRef::new(p, s.seq, s.seq),
                MatRef::strided(&v[off..], s.seq, s.head_dim, d, 1),
                T::zero(),
                MatMut::strided(&mut out[off..], s.seq, s.head_dim, d, 1),
            );
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to `q`, `k`, `v`.
pub fn attention_backward<T: Float>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    s: AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = s.width();
    let scale = T::c(1.0 / (s.head_dim as f64).sqrt());
    let n = s.batch * s.seq * d;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut dp = vec![T::zero(); s.seq * s.seq];
    for b in 0..s.batch {
        let base = b * s.seq * d;
        for h in 0..s.heads {
            let off = base + h * s.head_dim;
            let p_off = (b * s.heads + h) * s.seq * s.seq;
            let p = &probs[p_off..p_off + s.seq * s.seq];
            let dout_h = MatRef::strided(&dout[off..], s.seq, s.head_dim, d, 1);
            // dv = pᵀ·dout
            gemm(T::one(), MatRef::new(p, s.seq, s.seq).t(), dout_h, T::zero(), MatMut::strided(&mut dv[off..], s.seq, s.head_dim, d, 1));
            // dp = dout·vᵀ
            gemm(T::one(), dout_h, MatRef::strided(&v[off..], s.seq, s.head_dim, d, 1).t(), T::zero(), MatMut::new(&mut dp, s.seq, s.seq));
            // softmax backward, folded with the score scale
            for i in 0..s.seq {
                let pr = &p[i * s.seq..(i + 1) * s.seq];
                let dr = &mut dp[i * s.seq..(i + 1) * s.seq];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..s.seq {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            gemm(T::one(), MatRef::new(&dp, s.seq, s.seq), MatRef::strided(&k[off..], s.seq, s.head_dim, d, 1), T::zero(), MatMut::strided(&mut dq[off..], s.seq, s.head_dim, d, 1));
            gemm(T::one(), MatRef::new(&dp, s.seq, s.seq).t(), MatRef::strided(&q[off..], s.seq, s.head_dim, d, 1), T::zero(), MatMut::strided(&mut dk[off..], s.seq, s.head_dim, d, 1));
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += eps;
                m[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let width = 5;
        let x = Tensor::<f64>::randn(&[3, width], 1.0, &mut rng).data;
        let gamma = Tensor::<f64>::randn(&[width], 1.0, &mut rng);
        let beta = Tensor::<f64>::randn(&[width], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, width], 1.0, &mut rng).data;
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = layer_norm(x, width, &gamma, &beta);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm(&x, width, &gamma, &beta);
        let dx = layer_norm_backward(&w, width, &gamma, &cache, None);
        assert_close(&dx, &numeric_grad(loss, &x), 1e-6);
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let x: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.37).collect();
        let ones = vec![1.0; x.len()];
        let dx = gelu_backward(&x, &ones);
        let num: Vec<f64> = x
            .iter()
            .map(|&v| (gelu(&[v + 1e-6])[0] - gelu(&[v - 1e-6])[0]) / 2e-6)
            .collect();
        assert_close(&dx, &num, 1e-6);
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let s = AttnShape { batch: 2, seq: 3, heads: 2, head_dim: 2 };
        let n = 2 * 3 * 4;
        let q = Tensor::<f64>::randn(&[n], 1.0, &mut rng).data;
        let k = Tensor::<f64>::randn(&[n], 1.0, &mut rng).data;
        let v = Tensor::<f64>::randn(&[n], 1.0, &mut rng).data;
        let w = Tensor::<f64>::randn(&[n], 1.0, &mut rng).data;
        let dot = |o: &[f64]| o.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, probs) = attention(&q, &k, &v, s);
        let (dq, dk, dv) = attention_backward(&w, &q, &k, &v, &probs, s);
        assert_close(&dq, &numeric_grad(|x| dot(&attention(x, &k, &v, s).0), &q), 1e-6);
        assert_close(&dk, &numeric_grad(|x| dot(&attention(&q, x, &v, s).0), &k), 1e-6);
        assert_close(&dv, &numeric_grad(|x| dot(&attention(&q, &k, x, s).0), &v), 1e-6);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng).data;
        let w = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2], 1.0, &mut rng);
        let dy = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng).data;
        let mut gw = Tensor::zeros(&[3, 2]);
        let mut gb = Tensor::zeros(&[2]);
        let dx = linear_backward(&x, 4, &w, &dy, Some((&mut gw, &mut gb)), true);
        let dot = |y: &[f64]| y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>();
        assert_close(&dx, &numeric_grad(|x| dot(&linear(x, 4, &w, &b)), &x), 1e-7);
        let num_w = numeric_grad(
            |wd| {
                let wt = Tensor::from_vec(&[3, 2], wd.to_vec()).unwrap();
                dot(&linear(&x, 4, &wt, &b))
            },
            &w.data,
        );
        assert_close(&gw.data, &num_w, 1e-7);
        assert_close(&gb.data, &[dy.iter().step_by(2).sum(), dy.iter().skip(1).step_by(2).sum()], 1e-12);
    }
}
