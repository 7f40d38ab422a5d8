//! Dense building blocks with hand-written backward passes.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floating-point element type of a model: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn cast<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

pub fn normal_init<F: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || cast(dist.sample(rng)))
}

/// `y = x w + b` with `b` a `1 x n` row.
pub fn linear<F: Real>(x: &ArrayView2<F>, w: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let mut y = Array2::zeros((x.nrows(), w.ncols()));
    y.assign(&b.row(0).broadcast((x.nrows(), w.ncols())).expect("bias row"));
    general_mat_mul(F::one(), x, w, F::one(), &mut y);
    y
}

/// Accumulates `gw += x^T dy`, `gb += sum_rows(dy)` and returns `dy w^T`.
pub fn linear_backward<F: Real>(
    x: &ArrayView2<F>,
    w: &Array2<F>,
    dy: &ArrayView2<F>,
    gw: &mut Array2<F>,
    gb: &mut Array2<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), gw);
    gb.row_mut(0).zip_mut_with(&dy.sum_axis(Axis(0)), |g, &d| *g += d);
    dy.dot(&w.t())
}

pub const LN_EPS: f64 = 1e-5;

pub struct LayerNormCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub fn layer_norm<F: Real>(x: &ArrayView2<F>, g: &Array2<F>, b: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
    let n = cast::<F>(x.ncols() as f64);
    let eps = cast::<F>(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / n;
        *r = F::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let mut y = xhat.clone();
    Zip::from(y.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row).and(g.row(0)).and(b.row(0)).for_each(|v, &gg, &bb| *v = *v * gg + bb);
    });
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Real>(
    dy: &ArrayView2<F>,
    cache: &LayerNormCache<F>,
    g: &Array2<F>,
    gg: &mut Array2<F>,
    gb: &mut Array2<F>,
) -> Array2<F> {
    let n = cast::<F>(dy.ncols() as f64);
    gg.row_mut(0).zip_mut_with(&(dy * &cache.xhat).sum_axis(Axis(0)), |a, &d| *a += d);
    gb.row_mut(0).zip_mut_with(&dy.sum_axis(Axis(0)), |a, &d| *a += d);
    let mut dx = dy * &g.row(0);
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh.iter()).fold(F::zero(), |a, (&d, &x)| a + d * x) / n;
        Zip::from(&mut row).and(&xh).for_each(|d, &x| *d = r * (*d - mean_d - x * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`, several times faster than the libm `tanh`.
#[inline]
fn fast_tanh<F: Real>(x: F) -> F {
    let two = cast::<F>(2.0);
    // Saturated well before exp overflows in either precision.
    let x = x.max(cast(-40.0)).min(cast(40.0));
    F::one() - two / ((two * x).exp() + F::one())
}

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let (c, a, half) = (cast::<F>(GELU_C), cast::<F>(GELU_A), cast::<F>(0.5));
    half * x * (F::one() + fast_tanh(c * (x + a * x * x * x)))
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let (c, a, half) = (cast::<F>(GELU_C), cast::<F>(GELU_A), cast::<F>(0.5));
    let inner = c * (x + a * x * x * x);
    let t = fast_tanh(inner);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + cast::<F>(3.0) * a * x * x)
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<F: Real>(x: &mut ArrayViewMut2<F>) {
    for mut row in x.rows_mut() {
        softmax_slice(row.as_slice_mut().expect("contiguous rows"));
    }
}

fn softmax_slice<F: Real>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Which keys each query may attend to. Keys `>= valid_keys` are hidden;
/// with `causal`, query `i` sees keys `j < prefix` or `j <= i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMask {
    pub prefix: usize,
    pub causal: bool,
    pub valid_keys: usize,
}

impl AttentionMask {
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        j < self.limit(i)
    }

    /// Query `i` sees exactly the keys `0..limit(i)`.
    pub fn limit(&self, i: usize) -> usize {
        if self.causal {
            self.valid_keys.min(self.prefix.max(i + 1))
        } else {
            self.valid_keys
        }
    }
}

/// Multi-head scaled dot-product attention over a packed `T x 3L` qkv
/// matrix. Returns the `T x L` head outputs and per-head probabilities.
pub fn attention<F: Real>(qkv: &Array2<F>, heads: usize, mask: AttentionMask) -> (Array2<F>, Vec<Array2<F>>) {
    let t = qkv.nrows();
    let l = qkv.ncols() / 3;
    let dh = l / heads;
    let scale = cast::<F>(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((t, l));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., l + h * dh..l + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * l + h * dh..2 * l + (h + 1) * dh]);
        let mut scores = Array2::zeros((t, t));
        general_mat_mul(scale, &q, &k.t(), F::zero(), &mut scores);
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("contiguous rows");
            let lim = mask.limit(i);
            softmax_slice(&mut row[..lim]);
            row[lim..].fill(F::zero());
        }
        general_mat_mul(F::one(), &scores, &v, F::zero(), &mut out.slice_mut(s![.., h * dh..(h + 1) * dh]));
        probs.push(scores);
    }
    (out, probs)
}

/// Gradient of [`attention`] with respect to the packed qkv matrix.
pub fn attention_backward<F: Real>(qkv: &Array2<F>, probs: &[Array2<F>], dout: &ArrayView2<F>) -> Array2<F> {
    let heads = probs.len();
    let l = qkv.ncols() / 3;
    let dh = l / heads;
    let scale = cast::<F>(1.0 / (dh as f64).sqrt());
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., l + h * dh..l + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * l + h * dh..2 * l + (h + 1) * dh]);
        let d_o = dout.slice(s![.., h * dh..(h + 1) * dh]);
        let mut dp = d_o.dot(&v.t());
        general_mat_mul(F::one(), &p.t(), &d_o, F::zero(), &mut dqkv.slice_mut(s![.., 2 * l + h * dh..2 * l + (h + 1) * dh]));
        for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
            let drow = drow.as_slice_mut().expect("contiguous rows");
            let prow = prow.to_slice().expect("contiguous rows");
            let dot = drow.iter().zip(prow).fold(F::zero(), |a, (&d, &pp)| a + d * pp);
            for (d, &pp) in drow.iter_mut().zip(prow) {
                *d = pp * (*d - dot);
            }
        }
        general_mat_mul(scale, &dp, &k, F::zero(), &mut dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]));
        general_mat_mul(scale, &dp.t(), &q, F::zero(), &mut dqkv.slice_mut(s![.., l + h * dh..l + (h + 1) * dh]));
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[(r, c)] += h;
            let mut xm = x.clone();
            xm[(r, c)] -= h;
            g[(r, c)] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - num).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Array2<f64> = normal_init(3, 6, 1.0, &mut rng);
        let g: Array2<f64> = normal_init(1, 6, 1.0, &mut rng);
        let b: Array2<f64> = normal_init(1, 6, 1.0, &mut rng);
        let w: Array2<f64> = normal_init(3, 6, 1.0, &mut rng);
        let f = |x: &Array2<f64>| (layer_norm(&x.view(), &g, &b).0 * &w).sum();
        let (_, cache) = layer_norm(&x.view(), &g, &b);
        let (mut gg, mut gb) = (Array2::zeros((1, 6)), Array2::zeros((1, 6)));
        let dx = layer_norm_backward(&w.view(), &cache, &g, &mut gg, &mut gb);
        assert_close(&dx, &numeric_grad(&f, &x), 1e-6);
    }

    #[test]
    fn attention_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, l, heads) = (5, 8, 2);
        let qkv: Array2<f64> = normal_init(t, 3 * l, 1.0, &mut rng);
        let w: Array2<f64> = normal_init(t, l, 1.0, &mut rng);
        let mask = AttentionMask { prefix: 2, causal: true, valid_keys: t };
        let f = |q: &Array2<f64>| (attention(q, heads, mask).0 * &w).sum();
        let (_, probs) = attention(&qkv, heads, mask);
        let d = attention_backward(&qkv, &probs, &w.view());
        assert_close(&d, &numeric_grad(&f, &qkv), 1e-6);
    }

    #[test]
    fn mask_semantics() {
        let m = AttentionMask { prefix: 3, causal: true, valid_keys: 10 };
        assert!(m.allowed(0, 2));
        assert!(!m.allowed(4, 5));
        assert!(m.allowed(5, 5));
        let pad = AttentionMask { prefix: 0, causal: false, valid_keys: 4 };
        assert!(pad.allowed(0, 3) && !pad.allowed(0, 4));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = ndarray::arr2(&[[1000.0f32, 0.0, -5.0], [0.1, 0.2, 0.3]]);
        softmax_rows(&mut x.view_mut());
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

