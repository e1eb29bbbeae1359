//! Forward/backward kernels shared by the tensor-level functions and the
//! autodiff graph, plus the tensor-level entry points themselves.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `C = A·B` (or `C += A·B` when `accumulate`), with optional transposition
/// of either operand. `a` is stored as `[m,k]` (or `[k,m]` when `a_t`),
/// `b` as `[k,n]` (or `[n,k]` when `b_t`), `c` as `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address each of them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    /// Rows whose variance sat below `eps` and was floored.
    pub floored: Vec<bool>,
}

/// Normalizes each length-`c` row to zero mean and unit population
/// variance. The variance is floored at `eps`, so constant rows map to
/// zeros and rows with variance at least `eps` come out with variance
/// exactly 1.
pub(crate) fn layer_norm_fwd(
    x: &[f64],
    c: usize,
    gamma: Option<&[f64]>,
    beta: Option<&[f64]>,
    eps: f64,
) -> (Vec<f64>, LnCache) {
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let mut floored = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let low = var < eps;
        let rs = 1.0 / var.max(eps).sqrt();
        rstd.push(rs);
        floored.push(low);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            let g = gamma.map_or(1.0, |g| g[j]);
            let b = beta.map_or(0.0, |b| b[j]);
            out[r * c + j] = h * g + b;
        }
    }
    (out, LnCache { xhat, rstd, floored })
}

/// Returns `dx`; accumulates into `dgamma`/`dbeta` when given.
pub(crate) fn layer_norm_bwd(
    dy: &[f64],
    c: usize,
    cache: &LnCache,
    gamma: Option<&[f64]>,
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) -> Vec<f64> {
    let rows = dy.len() / c;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let dyr = &dy[r * c..(r + 1) * c];
        let xh = &cache.xhat[r * c..(r + 1) * c];
        for j in 0..c {
            dxhat[j] = dyr[j] * gamma.map_or(1.0, |g| g[j]);
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[j] += dyr[j] * xh[j];
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[j] += dyr[j];
            }
        }
        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
        let mean_dx = if cache.floored[r] {
            0.0
        } else {
            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64
        };
        let rs = cache.rstd[r];
        for j in 0..c {
            dx[r * c + j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

pub(crate) fn softmax_fwd(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    out
}

pub(crate) fn softmax_bwd(y: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Elementwise smooth-ℓ1 value for residual `d`.
pub fn smooth_l1_scalar(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a <= beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1_scalar`] with respect to `d`.
pub fn smooth_l1_grad_scalar(d: f64, beta: f64) -> f64 {
    if d.abs() <= beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, affine: Option<(&Tensor, &Tensor)>, eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if c == 0 {
        return Err(shape_err("layer_norm over an empty axis"));
    }
    if eps <= 0.0 {
        return Err(invalid("layer_norm eps must be positive"));
    }
    if let Some((g, b)) = affine {
        if g.len() != c || b.len() != c {
            return Err(shape_err(format!(
                "affine parameters of length {}/{} for channel size {c}",
                g.len(),
                b.len()
            )));
        }
    }
    let (out, _) = layer_norm_fwd(
        x.data(),
        c,
        affine.map(|(g, _)| g.data()),
        affine.map(|(_, b)| b.data()),
        eps,
    );
    Tensor::new(x.shape().to_vec(), out)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if n == 0 {
        return Err(shape_err("softmax over an empty axis"));
    }
    Tensor::new(x.shape().to_vec(), softmax_fwd(x.data(), n))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Per-sample residual-branch multipliers: 0 for dropped samples and
/// `1/(1-p)` for kept ones in train mode, all ones otherwise.
pub fn drop_path_scales<R: Rng + ?Sized>(
    batch: usize,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("drop path rate {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(vec![1.0; batch]);
    }
    let keep = 1.0 - p;
    Ok((0..batch)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect())
}

/// Stochastic depth on a batch-major tensor.
pub fn drop_path<R: Rng + ?Sized>(x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    let batch = *x
        .shape()
        .first()
        .ok_or_else(|| shape_err("drop_path needs a batch axis"))?;
    let scales = drop_path_scales(batch, p, mode, rng)?;
    let mut out = x.clone();
    out.clear_grad();
    if batch > 0 {
        let inner = x.len() / batch;
        for (chunk, s) in out.data_mut().chunks_exact_mut(inner.max(1)).zip(&scales) {
            if *s != 1.0 {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&t(&[1.0, 3.0]), None, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
        let y = layer_norm(&t(&[5.0, 5.0, 5.0]), None, LN_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let g = t(&[2.0, 2.0]);
        let b = t(&[1.0, 1.0]);
        let y = layer_norm(&t(&[1.0, 3.0]), Some((&g, &b)), LN_EPS).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_bad_affine() {
        let g = t(&[1.0]);
        let b = t(&[0.0, 0.0]);
        assert!(matches!(
            layer_norm(&t(&[1.0, 2.0]), Some((&g, &b)), LN_EPS),
            Err(crate::Error::Shape(_))
        ));
        assert!(layer_norm(&t(&[1.0, 2.0]), None, 0.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t(&[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&t(&[1000.0, 1000.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&t(&[0.0, 3f64.ln()])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(30.0) - 30.0).abs() < 1e-12);
        let phi1 = statrs::function::erf::erf(1.0 / SQRT_2) * 0.5 + 0.5;
        assert!((gelu_scalar(1.0) - phi1).abs() < 1e-10, "{} vs {phi1}", gelu_scalar(1.0));
        assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-6);
    }

    struct ZeroRng;

    impl RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0);
        }
    }

    #[test]
    fn drop_path_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(drop_path(&x, 0.2, Mode::Eval, &mut rng).unwrap(), x);
        assert_eq!(drop_path(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        // a generator that only ever yields 0 keeps every sample
        let mut keep_all = ZeroRng;
        let y = drop_path(&x, 0.5, Mode::Train, &mut keep_all).unwrap();
        assert_eq!(y.data(), &[2., 4., 6., 8., 10., 12.]);
        assert!(drop_path(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn drop_path_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = 0.3;
        let n = 100_000;
        let scales = drop_path_scales(n, p, Mode::Train, &mut rng).unwrap();
        let mean = scales.iter().sum::<f64>() / n as f64;
        // each draw is 0 or 1/(1-p): variance p/(1-p)
        let se = (p / (1.0 - p) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1_scalar(0.0, 2.0), 0.0);
        assert_eq!(smooth_l1_scalar(1.0, 2.0), 0.25);
        assert_eq!(smooth_l1_scalar(2.0, 2.0), 1.0);
        assert_eq!(smooth_l1_scalar(5.0, 2.0), 4.0);
        assert_eq!(smooth_l1_grad_scalar(-7.0, 2.0), -1.0);
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // transposed storage of both operands
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, false);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
