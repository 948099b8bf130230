//! Nested-loop reference implementations used only by tests.
//!
//! These are written directly from the defining formulas, with no shared code
//! or layout tricks from the production kernels. Unit tests compare kernel and
//! tape output against this module; it must stay independent and obvious.

/// Valid convolution, stride `s`, input `[n, c, h, w]`, kernels `[k, c, kh, kw]`.
/// Output spatial extent is `floor((h - kh) / s) + 1` per axis.
pub fn conv2d(
    x: &[f64],
    kernels: &[f64],
    bias: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (k, kh, kw): (usize, usize, usize),
    s: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - kh) / s + 1;
    let ow = (w - kw) / s + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bias[ki];
                    for ci in 0..c {
                        for p in 0..kh {
                            for q in 0..kw {
                                let xi = x[((ni * c + ci) * h + oi * s + p) * w + oj * s + q];
                                let kv = kernels[((ki * c + ci) * kh + p) * kw + q];
                                acc += xi * kv;
                            }
                        }
                    }
                    out[((ni * k + ki) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Transposed convolution, stride `s`, input `[n, c, h, w]`, kernels
/// `[c, k, kh, kw]`. Output spatial extent is `(h - 1) * s + kh` per axis.
pub fn deconv2d(
    x: &[f64],
    kernels: &[f64],
    bias: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (k, kh, kw): (usize, usize, usize),
    s: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * s + kh;
    let ow = (w - 1) * s + kw;
    let mut out = vec![0.0; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            for oi in 0..oh {
                for oj in 0..ow {
                    out[((ni * k + ki) * oh + oi) * ow + oj] = bias[ki];
                }
            }
        }
        for ci in 0..c {
            for ii in 0..h {
                for ij in 0..w {
                    let xv = x[((ni * c + ci) * h + ii) * w + ij];
                    for ki in 0..k {
                        for p in 0..kh {
                            for q in 0..kw {
                                let kv = kernels[((ci * k + ki) * kh + p) * kw + q];
                                out[((ni * k + ki) * oh + ii * s + p) * ow + ij * s + q] += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Fully connected layer, input `[n, i]`, weights `[i, o]`, bias `[o]`.
pub fn dense(x: &[f64], weights: &[f64], bias: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for ni in 0..n {
        for oi in 0..o {
            let mut acc = bias[oi];
            for ii in 0..i {
                acc += x[ni * i + ii] * weights[ii * o + oi];
            }
            out[ni * o + oi] = acc;
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

/// Sum of squared differences. Sum reduction, no averaging.
pub fn sse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Binary cross entropy summed over elements; `p` must lie strictly in (0, 1).
pub fn bce(target: &[f64], p: &[f64]) -> f64 {
    target
        .iter()
        .zip(p)
        .map(|(t, q)| -(t * q.ln() + (1.0 - t) * (1.0 - q).ln()))
        .sum()
}

/// Softmax cross entropy against integer class labels, summed over rows.
pub fn softmax_cross_entropy(logits: &[f64], classes: &[usize], n: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for ni in 0..n {
        let row = &logits[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += logsum - row[classes[ni]];
    }
    total
}
