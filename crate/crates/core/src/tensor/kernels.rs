//! Numeric kernels shared by the tape and the tape-free evaluation path.
//!
//! Convolutions are lowered to GEMM through explicit im2col/col2im buffers.
//! The transposed convolution reuses the same patch-grid mapping with the
//! roles of gather and scatter swapped, which makes it the exact adjoint of
//! the forward convolution. All loops run in a fixed order, so results are
//! reproducible bit for bit on a given machine.

use matrixmultiply::dgemm;

/// Patch grid of a convolution over a `[n, c, h, w]` tensor: `oh * ow`
/// windows of extent `kh * kw` advancing by `stride`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PatchDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    /// Valid convolution geometry: `h_out = floor((h_in - kh) / stride) + 1`.
    pub fn conv(n: usize, c_in: usize, h_in: usize, w_in: usize, c_out: usize, kh: usize, kw: usize, stride: usize) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || h_in < kh || w_in < kw {
            return None;
        }
        Some(ConvDims {
            n,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            h_out: (h_in - kh) / stride + 1,
            w_out: (w_in - kw) / stride + 1,
        })
    }

    /// Transposed convolution geometry: `h_out = (h_in - 1) * stride + kh`.
    pub fn deconv(n: usize, c_in: usize, h_in: usize, w_in: usize, c_out: usize, kh: usize, kw: usize, stride: usize) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || h_in == 0 || w_in == 0 {
            return None;
        }
        Some(ConvDims {
            n,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            h_out: (h_in - 1) * stride + kh,
            w_out: (w_in - 1) * stride + kw,
        })
    }

    /// Patch grid over the convolution input.
    fn in_patches(&self) -> PatchDims {
        PatchDims {
            n: self.n,
            c: self.c_in,
            h: self.h_in,
            w: self.w_in,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            oh: self.h_out,
            ow: self.w_out,
        }
    }

    /// Patch grid over the transposed convolution output. One patch per input
    /// position, which is what makes deconv the adjoint of conv.
    fn out_patches(&self) -> PatchDims {
        PatchDims {
            n: self.n,
            c: self.c_out,
            h: self.h_out,
            w: self.w_out,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            oh: self.h_in,
            ow: self.w_in,
        }
    }
}

// ---------------------------------------------------------------------------
// GEMM wrappers (row-major)
// ---------------------------------------------------------------------------

/// C[m,n] = alpha * A[m,k] * B[k,n] + beta * C
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        dgemm(m, k, n, alpha, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// C[m,n] = alpha * A[m,k] * B[n,k]^T + beta * C
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        dgemm(m, k, n, alpha, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// C[m,n] = alpha * A[k,m]^T * B[k,n] + beta * C
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        dgemm(m, k, n, alpha, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

// ---------------------------------------------------------------------------
// Layout helpers
// ---------------------------------------------------------------------------

/// Gathers patches: `cols[(c,p,q), (n,i,j)] = x[n, c, i*s+p, j*s+q]`.
fn im2col(x: &[f64], d: &PatchDims, cols: &mut [f64]) {
    let spatial = d.oh * d.ow;
    let col_w = d.n * spatial;
    for ci in 0..d.c {
        for p in 0..d.kh {
            for q in 0..d.kw {
                let row = ((ci * d.kh + p) * d.kw + q) * col_w;
                for ni in 0..d.n {
                    let x_chan = (ni * d.c + ci) * d.h * d.w;
                    for oi in 0..d.oh {
                        let x_row = x_chan + (oi * d.stride + p) * d.w + q;
                        let dst = row + ni * spatial + oi * d.ow;
                        for oj in 0..d.ow {
                            cols[dst + oj] = x[x_row + oj * d.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `x`.
fn col2im_add(cols: &[f64], d: &PatchDims, x: &mut [f64]) {
    let spatial = d.oh * d.ow;
    let col_w = d.n * spatial;
    for ci in 0..d.c {
        for p in 0..d.kh {
            for q in 0..d.kw {
                let row = ((ci * d.kh + p) * d.kw + q) * col_w;
                for ni in 0..d.n {
                    let x_chan = (ni * d.c + ci) * d.h * d.w;
                    for oi in 0..d.oh {
                        let x_row = x_chan + (oi * d.stride + p) * d.w + q;
                        let src = row + ni * spatial + oi * d.ow;
                        for oj in 0..d.ow {
                            x[x_row + oj * d.stride] += cols[src + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, hw]` to `[c, n, hw]`, overwriting `dst`.
fn nchw_to_cnhw(src: &[f64], n: usize, c: usize, hw: usize, dst: &mut [f64]) {
    for ni in 0..n {
        for ci in 0..c {
            let s = (ni * c + ci) * hw;
            let d = (ci * n + ni) * hw;
            dst[d..d + hw].copy_from_slice(&src[s..s + hw]);
        }
    }
}

/// `[c, n, hw]` to `[n, c, hw]`, adding into `dst`.
fn cnhw_add_into_nchw(src: &[f64], n: usize, c: usize, hw: usize, dst: &mut [f64]) {
    for ni in 0..n {
        for ci in 0..c {
            let s = (ci * n + ni) * hw;
            let d = (ni * c + ci) * hw;
            for t in 0..hw {
                dst[d + t] += src[s + t];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Kernels are laid out `[c_out, c_in, kh, kw]`.
pub(crate) fn conv2d_forward(x: &[f64], kernels: &[f64], bias: &[f64], d: &ConvDims, out: &mut [f64]) {
    let patches = d.in_patches();
    let ckk = d.c_in * d.kh * d.kw;
    let col_w = d.n * d.h_out * d.w_out;
    let mut cols = vec![0.0; ckk * col_w];
    im2col(x, &patches, &mut cols);
    let mut y = vec![0.0; d.c_out * col_w];
    gemm_nn(d.c_out, ckk, col_w, 1.0, kernels, &cols, 0.0, &mut y);
    let spatial = d.h_out * d.w_out;
    for ni in 0..d.n {
        for ki in 0..d.c_out {
            let s = ki * col_w + ni * spatial;
            let o = (ni * d.c_out + ki) * spatial;
            let b = bias[ki];
            for t in 0..spatial {
                out[o + t] = y[s + t] + b;
            }
        }
    }
}

pub(crate) fn conv2d_grad_input(dout: &[f64], kernels: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let ckk = d.c_in * d.kh * d.kw;
    let spatial = d.h_out * d.w_out;
    let col_w = d.n * spatial;
    let mut dy = vec![0.0; d.c_out * col_w];
    nchw_to_cnhw(dout, d.n, d.c_out, spatial, &mut dy);
    let mut cols_grad = vec![0.0; ckk * col_w];
    gemm_tn(ckk, d.c_out, col_w, 1.0, kernels, &dy, 0.0, &mut cols_grad);
    col2im_add(&cols_grad, &d.in_patches(), dx);
}

pub(crate) fn conv2d_grad_kernel(dout: &[f64], x: &[f64], d: &ConvDims, dkernels: &mut [f64]) {
    let ckk = d.c_in * d.kh * d.kw;
    let spatial = d.h_out * d.w_out;
    let col_w = d.n * spatial;
    let mut cols = vec![0.0; ckk * col_w];
    im2col(x, &d.in_patches(), &mut cols);
    let mut dy = vec![0.0; d.c_out * col_w];
    nchw_to_cnhw(dout, d.n, d.c_out, spatial, &mut dy);
    gemm_nt(d.c_out, col_w, ckk, 1.0, &dy, &cols, 1.0, dkernels);
}

pub(crate) fn conv2d_grad_bias(dout: &[f64], d: &ConvDims, dbias: &mut [f64]) {
    let spatial = d.h_out * d.w_out;
    for ni in 0..d.n {
        for ki in 0..d.c_out {
            let s = (ni * d.c_out + ki) * spatial;
            dbias[ki] += dout[s..s + spatial].iter().sum::<f64>();
        }
    }
}

// ---------------------------------------------------------------------------
// Transposed convolution
// ---------------------------------------------------------------------------

/// Kernels are laid out `[c_in, c_out, kh, kw]`, matching the adjoint of a
/// forward convolution whose kernels are `[c_out, c_in, kh, kw]`.
pub(crate) fn deconv2d_forward(x: &[f64], kernels: &[f64], bias: &[f64], d: &ConvDims, out: &mut [f64]) {
    let kkk = d.c_out * d.kh * d.kw;
    let in_spatial = d.h_in * d.w_in;
    let col_w = d.n * in_spatial;
    let mut x_flat = vec![0.0; d.c_in * col_w];
    nchw_to_cnhw(x, d.n, d.c_in, in_spatial, &mut x_flat);
    let mut cols = vec![0.0; kkk * col_w];
    gemm_tn(kkk, d.c_in, col_w, 1.0, kernels, &x_flat, 0.0, &mut cols);
    let out_spatial = d.h_out * d.w_out;
    for ni in 0..d.n {
        for ki in 0..d.c_out {
            let o = (ni * d.c_out + ki) * out_spatial;
            out[o..o + out_spatial].fill(bias[ki]);
        }
    }
    col2im_add(&cols, &d.out_patches(), out);
}

pub(crate) fn deconv2d_grad_input(dout: &[f64], kernels: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let kkk = d.c_out * d.kh * d.kw;
    let in_spatial = d.h_in * d.w_in;
    let col_w = d.n * in_spatial;
    let mut dcols = vec![0.0; kkk * col_w];
    im2col(dout, &d.out_patches(), &mut dcols);
    let mut dx_flat = vec![0.0; d.c_in * col_w];
    gemm_nn(d.c_in, kkk, col_w, 1.0, kernels, &dcols, 0.0, &mut dx_flat);
    cnhw_add_into_nchw(&dx_flat, d.n, d.c_in, in_spatial, dx);
}

pub(crate) fn deconv2d_grad_kernel(dout: &[f64], x: &[f64], d: &ConvDims, dkernels: &mut [f64]) {
    let kkk = d.c_out * d.kh * d.kw;
    let in_spatial = d.h_in * d.w_in;
    let col_w = d.n * in_spatial;
    let mut dcols = vec![0.0; kkk * col_w];
    im2col(dout, &d.out_patches(), &mut dcols);
    let mut x_flat = vec![0.0; d.c_in * col_w];
    nchw_to_cnhw(x, d.n, d.c_in, in_spatial, &mut x_flat);
    gemm_nt(d.c_in, col_w, kkk, 1.0, &x_flat, &dcols, 1.0, dkernels);
}

pub(crate) fn deconv2d_grad_bias(dout: &[f64], d: &ConvDims, dbias: &mut [f64]) {
    let spatial = d.h_out * d.w_out;
    for ni in 0..d.n {
        for ki in 0..d.c_out {
            let s = (ni * d.c_out + ki) * spatial;
            dbias[ki] += dout[s..s + spatial].iter().sum::<f64>();
        }
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Weights are laid out `[in_dim, out_dim]`.
pub(crate) fn dense_forward(x: &[f64], w: &[f64], bias: &[f64], n: usize, i: usize, o: usize, out: &mut [f64]) {
    gemm_nn(n, i, o, 1.0, x, w, 0.0, out);
    for ni in 0..n {
        for oi in 0..o {
            out[ni * o + oi] += bias[oi];
        }
    }
}

pub(crate) fn dense_grad_input(dout: &[f64], w: &[f64], n: usize, i: usize, o: usize, dx: &mut [f64]) {
    gemm_nt(n, o, i, 1.0, dout, w, 1.0, dx);
}

pub(crate) fn dense_grad_weight(dout: &[f64], x: &[f64], n: usize, i: usize, o: usize, dw: &mut [f64]) {
    gemm_tn(i, n, o, 1.0, x, dout, 1.0, dw);
}

pub(crate) fn dense_grad_bias(dout: &[f64], n: usize, o: usize, dbias: &mut [f64]) {
    for ni in 0..n {
        for oi in 0..o {
            dbias[oi] += dout[ni * o + oi];
        }
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub(crate) fn relu_forward(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub(crate) fn relu_backward(x: &[f64], dout: &[f64], dx: &mut [f64]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dout) {
        if v > 0.0 {
            *d += g;
        }
    }
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_forward(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = sigmoid_scalar(v);
    }
}

/// Uses the forward output `y`, not the pre-activation.
pub(crate) fn sigmoid_backward(y: &[f64], dout: &[f64], dx: &mut [f64]) {
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dout) {
        *d += g * yv * (1.0 - yv);
    }
}

// ---------------------------------------------------------------------------
// Loss reductions (sum over all elements, no averaging)
// ---------------------------------------------------------------------------

pub(crate) fn sse_value(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub(crate) fn sse_backward(a: &[f64], b: &[f64], dl: f64, mut da: Option<&mut [f64]>, mut db: Option<&mut [f64]>) {
    for idx in 0..a.len() {
        let g = 2.0 * (a[idx] - b[idx]) * dl;
        if let Some(da) = da.as_deref_mut() {
            da[idx] += g;
        }
        if let Some(db) = db.as_deref_mut() {
            db[idx] -= g;
        }
    }
}

pub(crate) fn bce_value(target: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (t, q) in target.iter().zip(p) {
        acc -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
    }
    acc
}

pub(crate) fn bce_backward(target: &[f64], p: &[f64], dl: f64, mut dtarget: Option<&mut [f64]>, mut dp: Option<&mut [f64]>) {
    for idx in 0..target.len() {
        let (t, q) = (target[idx], p[idx]);
        if let Some(dp) = dp.as_deref_mut() {
            dp[idx] += dl * (q - t) / (q * (1.0 - q));
        }
        if let Some(dt) = dtarget.as_deref_mut() {
            dt[idx] += dl * ((1.0 - q).ln() - q.ln());
        }
    }
}

/// Returns the summed loss and the row-wise softmax probabilities, which the
/// backward rule reuses.
pub(crate) fn softmax_ce_value(logits: &[f64], classes: &[usize], n: usize, k: usize) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    for ni in 0..n {
        let row = &logits[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[ni * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            probs[ni * k + j] /= sum;
        }
        total += sum.ln() + max - row[classes[ni]];
    }
    (total, probs)
}

pub(crate) fn softmax_ce_backward(probs: &[f64], classes: &[usize], dl: f64, n: usize, k: usize, dlogits: &mut [f64]) {
    for ni in 0..n {
        for j in 0..k {
            let onehot = if j == classes[ni] { 1.0 } else { 0.0 };
            dlogits[ni * k + j] += dl * (probs[ni * k + j] - onehot);
        }
    }
}

/// Debug-build guard against silent numeric blowups inside forward ops.
#[inline]
pub(crate) fn debug_assert_finite(values: &[f64], op: &'static str) {
    debug_assert!(
        values.iter().all(|v| v.is_finite()),
        "non-finite value produced by {op}"
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        assert_eq!(a.len(), b.len(), "{what}: length mismatch");
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "{what}: element {i} differs, {x} vs {y}"
            );
        }
    }

    #[test]
    fn conv_identity_kernel_stride_two() {
        // Hand-computed: [[1,2],[3,4]] under kernel [[1,0],[0,1]] picks the diagonal.
        let d = ConvDims::conv(1, 1, 2, 2, 1, 2, 2, 2).unwrap();
        let mut out = vec![0.0; 1];
        conv2d_forward(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 1.0], &[0.0], &d, &mut out);
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn conv_ones_kernel_with_bias() {
        let d = ConvDims::conv(1, 1, 2, 2, 1, 2, 2, 2).unwrap();
        let mut out = vec![0.0; 1];
        conv2d_forward(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[1.0], &d, &mut out);
        assert_eq!(out, vec![11.0]);
    }

    #[test]
    fn deconv_broadcasts_single_pixel_to_kernel() {
        let d = ConvDims::deconv(1, 1, 1, 1, 1, 2, 2, 2).unwrap();
        assert_eq!((d.h_out, d.w_out), (2, 2));
        let mut out = vec![0.0; 4];
        deconv2d_forward(&[1.0], &[1.0, 2.0, 3.0, 4.0], &[0.0], &d, &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn dense_row_times_matrix() {
        let mut out = vec![0.0; 2];
        dense_forward(&[1.0, 0.0], &[2.0, 3.0, 5.0, 7.0], &[1.0, 1.0], 1, 2, 2, &mut out);
        assert_eq!(out, vec![3.0, 4.0]);
    }

    #[test]
    fn conv_output_extent_uses_floor() {
        let d = ConvDims::conv(1, 1, 15, 15, 1, 4, 4, 2).unwrap();
        assert_eq!((d.h_out, d.w_out), (6, 6));
        let d = ConvDims::conv(1, 3, 32, 32, 32, 4, 4, 2).unwrap();
        assert_eq!((d.h_out, d.w_out), (15, 15));
        assert!(ConvDims::conv(1, 1, 3, 3, 1, 4, 4, 2).is_none());
    }

    #[test]
    fn conv_matches_reference_on_random_inputs() {
        let mut r = rng(11);
        for &(n, c, h, w, k, kh, s) in &[(2, 3, 8, 8, 4, 4, 2), (1, 2, 7, 9, 3, 3, 2), (3, 1, 5, 5, 2, 2, 1), (2, 4, 15, 15, 8, 4, 2)] {
            let x = rand_vec(&mut r, n * c * h * w);
            let ker = rand_vec(&mut r, k * c * kh * kh);
            let bias = rand_vec(&mut r, k);
            let (want, oh, ow) = reference::conv2d(&x, &ker, &bias, (n, c, h, w), (k, kh, kh), s);
            let d = ConvDims::conv(n, c, h, w, k, kh, kh, s).unwrap();
            assert_eq!((d.h_out, d.w_out), (oh, ow));
            let mut got = vec![0.0; want.len()];
            conv2d_forward(&x, &ker, &bias, &d, &mut got);
            assert_close(&got, &want, 1e-12, "conv forward");
        }
    }

    #[test]
    fn deconv_matches_reference_on_random_inputs() {
        let mut r = rng(12);
        for &(n, c, h, w, k, kh, s) in &[(2, 3, 4, 4, 4, 4, 2), (1, 2, 3, 5, 3, 5, 2), (3, 4, 2, 2, 2, 3, 1)] {
            let x = rand_vec(&mut r, n * c * h * w);
            let ker = rand_vec(&mut r, c * k * kh * kh);
            let bias = rand_vec(&mut r, k);
            let (want, oh, ow) = reference::deconv2d(&x, &ker, &bias, (n, c, h, w), (k, kh, kh), s);
            let d = ConvDims::deconv(n, c, h, w, k, kh, kh, s).unwrap();
            assert_eq!((d.h_out, d.w_out), (oh, ow));
            let mut got = vec![0.0; want.len()];
            deconv2d_forward(&x, &ker, &bias, &d, &mut got);
            assert_close(&got, &want, 1e-12, "deconv forward");
        }
    }

    #[test]
    fn dense_matches_reference_on_random_inputs() {
        let mut r = rng(13);
        let (n, i, o) = (5, 17, 9);
        let x = rand_vec(&mut r, n * i);
        let w = rand_vec(&mut r, i * o);
        let b = rand_vec(&mut r, o);
        let want = reference::dense(&x, &w, &b, n, i, o);
        let mut got = vec![0.0; n * o];
        dense_forward(&x, &w, &b, n, i, o, &mut got);
        assert_close(&got, &want, 1e-12, "dense forward");
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x, K), y> == <x, deconv(y, K)> with the same kernel buffer,
        // read as [k, c, kh, kw] by conv and [c_in=k, c_out=c, kh, kw] by deconv.
        let mut r = rng(14);
        for &(n, c, h, k, kh, s) in &[(2, 3, 9, 4, 4, 2), (1, 2, 7, 3, 3, 1), (2, 1, 8, 2, 2, 2)] {
            let d = ConvDims::conv(n, c, h, h, k, kh, kh, s).unwrap();
            let x = rand_vec(&mut r, n * c * h * h);
            let ker = rand_vec(&mut r, k * c * kh * kh);
            let y = rand_vec(&mut r, n * k * d.h_out * d.w_out);
            let mut cx = vec![0.0; y.len()];
            conv2d_forward(&x, &ker, &vec![0.0; k], &d, &mut cx);
            let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();

            let dd = ConvDims::deconv(n, k, d.h_out, d.w_out, c, kh, kh, s).unwrap();
            // Valid convolution can drop trailing rows; the adjoint lands in the
            // top-left h x h window of the deconv output.
            let mut dy = vec![0.0; n * c * dd.h_out * dd.w_out];
            deconv2d_forward(&y, &ker, &vec![0.0; c], &dd, &mut dy);
            let mut rhs = 0.0;
            for ni in 0..n {
                for ci in 0..c {
                    for yi in 0..h.min(dd.h_out) {
                        for xi in 0..h.min(dd.w_out) {
                            rhs += x[((ni * c + ci) * h + yi) * h + xi]
                                * dy[((ni * c + ci) * dd.h_out + yi) * dd.w_out + xi];
                        }
                    }
                }
            }
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "adjoint identity: {lhs} vs {rhs}");
        }
    }

    /// Central differences of the reference forward, used to pin the gradient
    /// kernels before the tape exists.
    fn numeric_kernel_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            g[i] = (hi - lo) / (2.0 * eps);
        }
        g
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(15);
        let (n, c, h, k, kh, s) = (2, 2, 6, 3, 3, 2);
        let d = ConvDims::conv(n, c, h, h, k, kh, kh, s).unwrap();
        let x = rand_vec(&mut r, n * c * h * h);
        let ker = rand_vec(&mut r, k * c * kh * kh);
        let bias = rand_vec(&mut r, k);
        // Scalar objective: weighted sum of conv output.
        let wts = rand_vec(&mut r, n * k * d.h_out * d.w_out);
        let objective = |xv: &[f64], kv: &[f64], bv: &[f64]| {
            let (o, _, _) = reference::conv2d(xv, kv, bv, (n, c, h, h), (k, kh, kh), s);
            o.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut dx = vec![0.0; x.len()];
        conv2d_grad_input(&wts, &ker, &d, &mut dx);
        assert_close(&dx, &numeric_kernel_grad(&|v| objective(v, &ker, &bias), &x, 1e-5), 1e-6, "conv dx");

        let mut dk = vec![0.0; ker.len()];
        conv2d_grad_kernel(&wts, &x, &d, &mut dk);
        assert_close(&dk, &numeric_kernel_grad(&|v| objective(&x, v, &bias), &ker, 1e-5), 1e-6, "conv dk");

        let mut db = vec![0.0; bias.len()];
        conv2d_grad_bias(&wts, &d, &mut db);
        assert_close(&db, &numeric_kernel_grad(&|v| objective(&x, &ker, v), &bias, 1e-5), 1e-6, "conv db");
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        let mut r = rng(16);
        let (n, c, h, k, kh, s) = (2, 3, 3, 2, 4, 2);
        let d = ConvDims::deconv(n, c, h, h, k, kh, kh, s).unwrap();
        let x = rand_vec(&mut r, n * c * h * h);
        let ker = rand_vec(&mut r, c * k * kh * kh);
        let bias = rand_vec(&mut r, k);
        let wts = rand_vec(&mut r, n * k * d.h_out * d.w_out);
        let objective = |xv: &[f64], kv: &[f64], bv: &[f64]| {
            let (o, _, _) = reference::deconv2d(xv, kv, bv, (n, c, h, h), (k, kh, kh), s);
            o.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut dx = vec![0.0; x.len()];
        deconv2d_grad_input(&wts, &ker, &d, &mut dx);
        assert_close(&dx, &numeric_kernel_grad(&|v| objective(v, &ker, &bias), &x, 1e-5), 1e-6, "deconv dx");

        let mut dk = vec![0.0; ker.len()];
        deconv2d_grad_kernel(&wts, &x, &d, &mut dk);
        assert_close(&dk, &numeric_kernel_grad(&|v| objective(&x, v, &bias), &ker, 1e-5), 1e-6, "deconv dk");

        let mut db = vec![0.0; bias.len()];
        deconv2d_grad_bias(&wts, &d, &mut db);
        assert_close(&db, &numeric_kernel_grad(&|v| objective(&x, &ker, v), &bias, 1e-5), 1e-6, "deconv db");
    }

    #[test]
    fn loss_kernels_match_reference() {
        let mut r = rng(17);
        let a = rand_vec(&mut r, 40);
        let b = rand_vec(&mut r, 40);
        assert!((sse_value(&a, &b) - reference::sse(&a, &b)).abs() < 1e-12);

        let t: Vec<f64> = a.iter().map(|v| (v + 1.0) / 2.0).collect();
        let p: Vec<f64> = b.iter().map(|v| 0.02 + 0.96 * (v + 1.0) / 2.0).collect();
        assert!((bce_value(&t, &p) - reference::bce(&t, &p)).abs() < 1e-10);

        let logits = rand_vec(&mut r, 4 * 5);
        let classes = vec![0, 3, 2, 4];
        let (got, _) = softmax_ce_value(&logits, &classes, 4, 5);
        let want = reference::softmax_cross_entropy(&logits, &classes, 4, 5);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_for_large_magnitudes() {
        let mut out = vec![0.0; 3];
        sigmoid_forward(&[-800.0, 0.0, 800.0], &mut out);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.5);
        assert_eq!(out[2], 1.0);
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
