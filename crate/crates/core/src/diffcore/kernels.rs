//! Forward kernels shared by the differentiable tape and the tape-free
//! inference path.
//!
//! Both paths call exactly these functions, so a streaming forward at `f64`
//! reproduces the batched tape forward bit for bit.

use num_traits::Float;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
fn c<F: Float>(v: f64) -> F {
    F::from(v).unwrap()
}

/// `a[m,k] · b[k,n]`, row-major.
pub fn matmul<F: Float>(a: &[F], m: usize, k: usize, b: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `x[m,k] · w[k,n] + bias[n]`.
pub fn linear<F: Float>(x: &[F], m: usize, k: usize, w: &[F], n: usize, bias: Option<&[F]>) -> Vec<F> {
    let mut out = matmul(x, m, k, w, n);
    if let Some(b) = bias {
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
    }
    out
}

/// Per-row layer normalisation. Returns the output and the per-row mean and
/// reciprocal standard deviation (kept for the backward pass).
pub fn layer_norm<F: Float>(x: &[F], d: usize, gamma: &[F], beta: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / d;
    let dn = c::<F>(d as f64);
    let eps = c::<F>(LAYER_NORM_EPS);
    let mut out = vec![F::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * d..(r + 1) * d];
        let mean = xs.iter().fold(F::zero(), |a, &v| a + v) / dn;
        let var = xs.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
        let rstd = F::one() / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (xs[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<F: Float>(x: F) -> F {
    let inner = c::<F>(GELU_K) * (x + c::<F>(GELU_A) * x * x * x);
    c::<F>(0.5) * x * (F::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_A * x * x * x);
    let th = inner.tanh();
    let dinner = GELU_K * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

/// Numerically stable softmax of one slice, in place.
pub fn softmax_in_place<F: Float>(v: &mut [F]) {
    let max = v.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// `log Σ exp(v)` with max subtraction.
pub fn log_sum_exp<F: Float>(v: &[F]) -> F {
    let max = v.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let sum = v.iter().fold(F::zero(), |a, &x| a + (x - max).exp());
    max + sum.ln()
}

/// Causal multi-head attention core over packed `qkv[t, 3d]`.
///
/// Row `i` attends to rows `0..=i` only; masked positions never enter the
/// softmax, which is the same as giving them a logit of minus infinity.
/// Returns the attended values `[t, d]` and the attention probabilities laid
/// out as `[heads, t, t]` (zeros above the diagonal).
pub fn causal_attention<F: Float>(qkv: &[F], t: usize, d: usize, heads: usize) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / c::<F>(dh as f64).sqrt();
    let stride = 3 * d;
    let mut out = vec![F::zero(); t * d];
    let mut probs = vec![F::zero(); heads * t * t];
    let mut scores = Vec::with_capacity(t);
    for h in 0..heads {
        let qo = h * dh;
        let ko = d + h * dh;
        let vo = 2 * d + h * dh;
        for i in 0..t {
            let q = &qkv[i * stride + qo..i * stride + qo + dh];
            scores.clear();
            for j in 0..=i {
                let k = &qkv[j * stride + ko..j * stride + ko + dh];
                let dot = q.iter().zip(k).fold(F::zero(), |a, (&x, &y)| a + x * y);
                scores.push(dot * scale);
            }
            softmax_in_place(&mut scores);
            let dst = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &p) in scores.iter().enumerate() {
                probs[(h * t + i) * t + j] = p;
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                for (o, &vv) in dst.iter_mut().zip(v) {
                    *o = *o + p * vv;
                }
            }
        }
    }
    (out, probs)
}

/// `out[i, k] = -‖a[i] - b[k]‖₂`, plus the raw distances.
pub fn neg_l2<F: Float>(a: &[F], m: usize, b: &[F], k: usize, d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..k {
            let bj = &b[j * d..(j + 1) * d];
            let sq = ai.iter().zip(bj).fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
            out[i * k + j] = -sq.sqrt();
        }
    }
    out
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<F: Float>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
