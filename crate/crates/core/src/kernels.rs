//! Numeric kernels for every graph primitive, forward and backward.
//!
//! Kernels are generic over the scalar type: the production path
//! instantiates f32, and the gradient-check oracle instantiates f64 so the
//! finite-difference comparison is not confounded by single-precision
//! rounding. Layout is flat row-major everywhere; shape arithmetic is the
//! caller's job (validated at graph construction).

/// Scalar abstraction for f32/f64 kernel instantiation.
pub trait Real:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(x: f32) -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(x: f32) -> Self {
        x
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
}

// ── dense (matmul + bias) ───────────────────────────────────────────

/// y[n,o] = sum_i x[n,i] w[o,i] + b[o]
pub fn dense_fwd<F: Real>(x: &[F], w: &[F], b: &[F], n: usize, fin: usize, fout: usize) -> Vec<F> {
    let mut y = vec![F::ZERO; n * fout];
    for row in 0..n {
        let xr = &x[row * fin..(row + 1) * fin];
        let yr = &mut y[row * fout..(row + 1) * fout];
        for o in 0..fout {
            let wr = &w[o * fin..(o + 1) * fin];
            let mut acc = b[o];
            for i in 0..fin {
                acc += xr[i] * wr[i];
            }
            yr[o] = acc;
        }
    }
    y
}

pub struct DenseGrads<F> {
    pub dx: Vec<F>,
    pub dw: Vec<F>,
    pub db: Vec<F>,
}

pub fn dense_bwd<F: Real>(
    x: &[F],
    w: &[F],
    dy: &[F],
    n: usize,
    fin: usize,
    fout: usize,
) -> DenseGrads<F> {
    let mut dx = vec![F::ZERO; n * fin];
    let mut dw = vec![F::ZERO; fout * fin];
    let mut db = vec![F::ZERO; fout];
    for row in 0..n {
        let xr = &x[row * fin..(row + 1) * fin];
        let dyr = &dy[row * fout..(row + 1) * fout];
        let dxr = &mut dx[row * fin..(row + 1) * fin];
        for o in 0..fout {
            let g = dyr[o];
            db[o] += g;
            let wr = &w[o * fin..(o + 1) * fin];
            let dwr = &mut dw[o * fin..(o + 1) * fin];
            for i in 0..fin {
                dxr[i] += g * wr[i];
                dwr[i] += g * xr[i];
            }
        }
    }
    DenseGrads { dx, dw, db }
}

// ── 2D convolution, stride 1, symmetric zero padding ────────────────

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
}

pub fn conv2d_fwd<F: Real>(x: &[F], wt: &[F], b: &[F], d: ConvDims) -> Vec<F> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut y = vec![F::ZERO; d.n * d.cout * oh * ow];
    for n in 0..d.n {
        for co in 0..d.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..d.cin {
                        for ky in 0..d.k {
                            let iy = oy + ky;
                            if iy < d.pad || iy >= d.h + d.pad {
                                continue;
                            }
                            let iy = iy - d.pad;
                            for kx in 0..d.k {
                                let ix = ox + kx;
                                if ix < d.pad || ix >= d.w + d.pad {
                                    continue;
                                }
                                let ix = ix - d.pad;
                                let xv = x[((n * d.cin + ci) * d.h + iy) * d.w + ix];
                                let wv = wt[((co * d.cin + ci) * d.k + ky) * d.k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((n * d.cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

pub struct ConvGrads<F> {
    pub dx: Vec<F>,
    pub dw: Vec<F>,
    pub db: Vec<F>,
}

pub fn conv2d_bwd<F: Real>(x: &[F], wt: &[F], dy: &[F], d: ConvDims) -> ConvGrads<F> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dx = vec![F::ZERO; d.n * d.cin * d.h * d.w];
    let mut dw = vec![F::ZERO; d.cout * d.cin * d.k * d.k];
    let mut db = vec![F::ZERO; d.cout];
    for n in 0..d.n {
        for co in 0..d.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[((n * d.cout + co) * oh + oy) * ow + ox];
                    db[co] += g;
                    for ci in 0..d.cin {
                        for ky in 0..d.k {
                            let iy = oy + ky;
                            if iy < d.pad || iy >= d.h + d.pad {
                                continue;
                            }
                            let iy = iy - d.pad;
                            for kx in 0..d.k {
                                let ix = ox + kx;
                                if ix < d.pad || ix >= d.w + d.pad {
                                    continue;
                                }
                                let ix = ix - d.pad;
                                let xi = ((n * d.cin + ci) * d.h + iy) * d.w + ix;
                                let wi = ((co * d.cin + ci) * d.k + ky) * d.k + kx;
                                dx[xi] += g * wt[wi];
                                dw[wi] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

// ── relu ────────────────────────────────────────────────────────────

pub fn relu_fwd<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| if v > F::ZERO { v } else { F::ZERO }).collect()
}

/// Subgradient at 0 is 0.
pub fn relu_bwd<F: Real>(x: &[F], dy: &[F]) -> Vec<F> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > F::ZERO { g } else { F::ZERO })
        .collect()
}

// ── batch normalization (per channel over N, H, W) ──────────────────

/// Channel statistics used by a batch-norm evaluation.
pub struct BnStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Biased per-channel mean/variance over the batch and spatial dims.
pub fn bn_batch_stats<F: Real>(x: &[F], n: usize, c: usize, hw: usize) -> BnStats<F> {
    let count = F::from_f64((n * hw) as f64);
    let mut mean = vec![F::ZERO; c];
    let mut var = vec![F::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for j in 0..hw {
                mean[ci] += x[base + j];
            }
        }
    }
    for m in mean.iter_mut() {
        *m = *m / count;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for j in 0..hw {
                let d = x[base + j] - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v = *v / count;
    }
    BnStats { mean, var }
}

pub fn bn_fwd<F: Real>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    stats: &BnStats<F>,
    eps: F,
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<F> {
    let mut y = vec![F::ZERO; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let inv = F::ONE / (stats.var[ci] + eps).sqrt();
            let (g, b, m) = (gamma[ci], beta[ci], stats.mean[ci]);
            let base = (ni * c + ci) * hw;
            for j in 0..hw {
                y[base + j] = g * (x[base + j] - m) * inv + b;
            }
        }
    }
    y
}

pub struct BnGrads<F> {
    pub dx: Vec<F>,
    pub dgamma: Vec<F>,
    pub dbeta: Vec<F>,
}

/// Backward with the statistics treated as constants (frozen mode).
pub fn bn_bwd_frozen<F: Real>(
    x: &[F],
    gamma: &[F],
    stats: &BnStats<F>,
    eps: F,
    dy: &[F],
    n: usize,
    c: usize,
    hw: usize,
) -> BnGrads<F> {
    let mut dx = vec![F::ZERO; x.len()];
    let mut dgamma = vec![F::ZERO; c];
    let mut dbeta = vec![F::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let inv = F::ONE / (stats.var[ci] + eps).sqrt();
            let g = gamma[ci];
            let m = stats.mean[ci];
            let base = (ni * c + ci) * hw;
            for j in 0..hw {
                let gy = dy[base + j];
                dx[base + j] = gy * g * inv;
                dgamma[ci] += gy * (x[base + j] - m) * inv;
                dbeta[ci] += gy;
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

/// Backward through batch statistics (training mode).
pub fn bn_bwd_batch<F: Real>(
    x: &[F],
    gamma: &[F],
    stats: &BnStats<F>,
    eps: F,
    dy: &[F],
    n: usize,
    c: usize,
    hw: usize,
) -> BnGrads<F> {
    let count = F::from_f64((n * hw) as f64);
    let mut dx = vec![F::ZERO; x.len()];
    let mut dgamma = vec![F::ZERO; c];
    let mut dbeta = vec![F::ZERO; c];
    for ci in 0..c {
        let inv = F::ONE / (stats.var[ci] + eps).sqrt();
        let m = stats.mean[ci];
        // First pass: per-channel sums of dy and dy * xhat.
        let mut sum_dy = F::ZERO;
        let mut sum_dy_xhat = F::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for j in 0..hw {
                let xhat = (x[base + j] - m) * inv;
                let gy = dy[base + j];
                sum_dy += gy;
                sum_dy_xhat += gy * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let mean_dy = sum_dy / count;
        let mean_dy_xhat = sum_dy_xhat / count;
        let g_inv = gamma[ci] * inv;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for j in 0..hw {
                let xhat = (x[base + j] - m) * inv;
                dx[base + j] = g_inv * (dy[base + j] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

// ── elementwise ─────────────────────────────────────────────────────

pub fn add_fwd<F: Real>(a: &[F], b: &[F]) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn scale_fwd<F: Real>(x: &[F], factor: F) -> Vec<F> {
    x.iter().map(|&v| v * factor).collect()
}

pub fn clamp_fwd<F: Real>(x: &[F], lo: F, hi: F) -> Vec<F> {
    x.iter()
        .map(|&v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        })
        .collect()
}

/// Gradient is zero outside the open interval, including at the boundary.
pub fn clamp_bwd<F: Real>(x: &[F], lo: F, hi: F, dy: &[F]) -> Vec<F> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > lo && v < hi { g } else { F::ZERO })
        .collect()
}

// ── softmax / cross-entropy ─────────────────────────────────────────

/// Row-wise softmax with max-shift stabilization, `[n, c]`.
pub fn softmax_fwd<F: Real>(x: &[F], n: usize, c: usize) -> Vec<F> {
    let mut y = vec![F::ZERO; x.len()];
    for row in 0..n {
        let xr = &x[row * c..(row + 1) * c];
        let yr = &mut y[row * c..(row + 1) * c];
        let mut mx = xr[0];
        for &v in xr.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::ZERO;
        for (j, &v) in xr.iter().enumerate() {
            let e = (v - mx).exp();
            yr[j] = e;
            sum += e;
        }
        for v in yr.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

/// dx_j = p_j * (dy_j - sum_k dy_k p_k), row-wise; `p` is the forward output.
pub fn softmax_bwd<F: Real>(p: &[F], dy: &[F], n: usize, c: usize) -> Vec<F> {
    let mut dx = vec![F::ZERO; p.len()];
    for row in 0..n {
        let pr = &p[row * c..(row + 1) * c];
        let dyr = &dy[row * c..(row + 1) * c];
        let mut dot = F::ZERO;
        for j in 0..c {
            dot += dyr[j] * pr[j];
        }
        let dxr = &mut dx[row * c..(row + 1) * c];
        for j in 0..c {
            dxr[j] = pr[j] * (dyr[j] - dot);
        }
    }
    dx
}

/// Mean cross-entropy over the batch from logits, accumulated in f64.
/// Uses the log-sum-exp form so no intermediate exponential can overflow.
pub fn cross_entropy_fwd<F: Real>(logits: &[F], labels: &[usize], n: usize, c: usize) -> f64 {
    let mut total = 0.0_f64;
    for row in 0..n {
        let xr = &logits[row * c..(row + 1) * c];
        let mut mx = xr[0];
        for &v in xr.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0_f64;
        for &v in xr.iter() {
            sum += (v - mx).exp().to_f64();
        }
        let lse = mx.to_f64() + sum.ln();
        total += lse - xr[labels[row]].to_f64();
    }
    total / n as f64
}

/// Gradient of mean cross-entropy wrt logits: (softmax - onehot) / n.
pub fn cross_entropy_bwd<F: Real>(logits: &[F], labels: &[usize], n: usize, c: usize) -> Vec<F> {
    let mut dx = softmax_fwd(logits, n, c);
    let inv_n = F::ONE / F::from_f64(n as f64);
    for row in 0..n {
        let dxr = &mut dx[row * c..(row + 1) * c];
        dxr[labels[row]] = dxr[labels[row]] - F::ONE;
        for v in dxr.iter_mut() {
            *v = *v * inv_n;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_passes_input_through() {
        // Identity weight, zero bias: y == x.
        let w = vec![1.0f32, 0.0, 0.0, 1.0];
        let b = vec![0.0f32; 2];
        let y = dense_fwd(&[1.0, 0.0], &w, &b, 1, 2, 2);
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        // 3x3 ones kernel over a 3x3 ones image, no padding -> 9.0.
        let d = ConvDims { n: 1, cin: 1, h: 3, w: 3, cout: 1, k: 3, pad: 0 };
        let y = conv2d_fwd(&[1.0f32; 9], &[1.0; 9], &[0.0], d);
        assert_eq!(y, vec![9.0]);
    }

    #[test]
    fn softmax_symmetric_logits() {
        let p = softmax_fwd(&[0.0f32, 0.0], 1, 2);
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let loss = cross_entropy_fwd(&[0.0f32, 0.0], &[0], 1, 2);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_large_logits() {
        let p = softmax_fwd(&[500.0f32, 400.0, -300.0], 1, 3);
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
