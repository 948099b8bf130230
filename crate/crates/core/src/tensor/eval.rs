//! Tape-free evaluation of the same kernels the tape records.
//!
//! Validation and inference paths (checkpoint scoring, feature extraction,
//! probe testing) run through these wrappers so they share every numeric
//! detail with training, without paying for gradient bookkeeping.

use super::kernels::{self, ConvDims};
use super::{Activation, Tensor, TensorError};

fn mismatch(op: &'static str, details: String) -> TensorError {
    TensorError::ShapeMismatch { op, details }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), TensorError> {
    if t.shape().len() != rank {
        return Err(mismatch(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Valid convolution. `x` is `[n, c, h, w]`, `kernels` `[k, c, kh, kw]`,
/// `bias` `[k]`.
pub fn eval_conv2d(
    x: &Tensor,
    kernels_t: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor, TensorError> {
    expect_rank("conv2d", x, 4)?;
    expect_rank("conv2d", kernels_t, 4)?;
    expect_rank("conv2d", bias, 1)?;
    let (xs, ks) = (x.shape(), kernels_t.shape());
    if ks[1] != xs[1] {
        return Err(mismatch(
            "conv2d",
            format!("input has {} channels but kernels expect {}", xs[1], ks[1]),
        ));
    }
    if bias.shape()[0] != ks[0] {
        return Err(mismatch(
            "conv2d",
            format!("bias has {} entries for {} kernels", bias.shape()[0], ks[0]),
        ));
    }
    let dims = ConvDims::conv(xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride)
        .ok_or_else(|| {
            mismatch(
                "conv2d",
                format!(
                    "kernel {}x{} stride {stride} does not fit input {}x{}",
                    ks[2], ks[3], xs[2], xs[3]
                ),
            )
        })?;
    let mut out = vec![0.0; dims.n * dims.c_out * dims.h_out * dims.w_out];
    kernels::conv2d_forward(x.data(), kernels_t.data(), bias.data(), &dims, &mut out);
    kernels::debug_assert_finite(&out, "conv2d");
    Tensor::from_vec(&[dims.n, dims.c_out, dims.h_out, dims.w_out], out)
}

/// Transposed convolution. `x` is `[n, c, h, w]`, `kernels` `[c, k, kh, kw]`,
/// `bias` `[k]`.
pub fn eval_deconv2d(
    x: &Tensor,
    kernels_t: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor, TensorError> {
    expect_rank("deconv2d", x, 4)?;
    expect_rank("deconv2d", kernels_t, 4)?;
    expect_rank("deconv2d", bias, 1)?;
    let (xs, ks) = (x.shape(), kernels_t.shape());
    if ks[0] != xs[1] {
        return Err(mismatch(
            "deconv2d",
            format!("input has {} channels but kernels expect {}", xs[1], ks[0]),
        ));
    }
    if bias.shape()[0] != ks[1] {
        return Err(mismatch(
            "deconv2d",
            format!(
                "bias has {} entries for {} output channels",
                bias.shape()[0],
                ks[1]
            ),
        ));
    }
    let dims = ConvDims::deconv(xs[0], xs[1], xs[2], xs[3], ks[1], ks[2], ks[3], stride)
        .ok_or_else(|| {
            mismatch(
                "deconv2d",
                format!("degenerate geometry for input {xs:?} kernel {ks:?}"),
            )
        })?;
    let mut out = vec![0.0; dims.n * dims.c_out * dims.h_out * dims.w_out];
    kernels::deconv2d_forward(x.data(), kernels_t.data(), bias.data(), &dims, &mut out);
    kernels::debug_assert_finite(&out, "deconv2d");
    Tensor::from_vec(&[dims.n, dims.c_out, dims.h_out, dims.w_out], out)
}

/// Fully connected layer. `x` is `[n, i]`, `weight` `[i, o]`, `bias` `[o]`.
pub fn eval_dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank("dense", x, 2)?;
    expect_rank("dense", weight, 2)?;
    expect_rank("dense", bias, 1)?;
    let (xs, ws) = (x.shape(), weight.shape());
    if xs[1] != ws[0] {
        return Err(mismatch(
            "dense",
            format!("input width {} does not match weight rows {}", xs[1], ws[0]),
        ));
    }
    if bias.shape()[0] != ws[1] {
        return Err(mismatch(
            "dense",
            format!("bias has {} entries for {} outputs", bias.shape()[0], ws[1]),
        ));
    }
    let (n, i, o) = (xs[0], xs[1], ws[1]);
    let mut out = vec![0.0; n * o];
    kernels::dense_forward(x.data(), weight.data(), bias.data(), n, i, o, &mut out);
    kernels::debug_assert_finite(&out, "dense");
    Tensor::from_vec(&[n, o], out)
}

/// Elementwise activation, preserving shape.
pub fn eval_activation(x: &Tensor, kind: Activation) -> Tensor {
    let mut out = vec![0.0; x.numel()];
    match kind {
        Activation::Relu => kernels::relu_forward(x.data(), &mut out),
        Activation::Sigmoid => kernels::sigmoid_forward(x.data(), &mut out),
    }
    Tensor::from_vec(x.shape(), out).expect("activation preserves shape")
}

/// Sum of squared differences.
pub fn eval_sse(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            "sse",
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(kernels::sse_value(a.data(), b.data()))
}

/// Binary cross entropy summed over elements. `pred` must lie in (0, 1).
pub fn eval_bce(target: &Tensor, pred: &Tensor) -> Result<f64, TensorError> {
    if target.shape() != pred.shape() {
        return Err(mismatch(
            "bce",
            format!(
                "operand shapes {:?} and {:?} differ",
                target.shape(),
                pred.shape()
            ),
        ));
    }
    Ok(kernels::bce_value(target.data(), pred.data()))
}

/// Softmax cross entropy against integer labels, summed over rows.
pub fn eval_softmax_cross_entropy(
    logits: &Tensor,
    classes: &[usize],
) -> Result<f64, TensorError> {
    expect_rank("softmax_cross_entropy", logits, 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if classes.len() != n {
        return Err(mismatch(
            "softmax_cross_entropy",
            format!("{n} rows but {} labels", classes.len()),
        ));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(mismatch(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let (v, _) = kernels::softmax_ce_value(logits.data(), classes, n, k);
    Ok(v)
}

/// Row-wise argmax of `[n, k]` logits; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>, TensorError> {
    expect_rank("argmax", logits, 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if k == 0 {
        return Err(mismatch("argmax", "zero classes".into()));
    }
    let mut out = Vec::with_capacity(n);
    for row in 0..n {
        let slice = &logits.data()[row * k..(row + 1) * k];
        let mut best = 0;
        for (j, &v) in slice.iter().enumerate() {
            if v > slice[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Sanity guard for values that should already be finite.
pub fn assert_all_finite(t: &Tensor, op: &'static str) -> Result<(), TensorError> {
    if t.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn eval_matches_tape_forward() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let k = Tensor::from_vec(&[2, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5])
            .unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let eval = eval_conv2d(&x, &k, &b, 2).unwrap();

        let mut tape = Tape::new();
        let (xi, ki, bi) = {
            let xi = tape.constant(&x);
            let ki = tape.constant(&k);
            let bi = tape.constant(&b);
            (xi, ki, bi)
        };
        let taped = tape.conv2d(xi, ki, bi, 2).unwrap();
        assert_eq!(tape.value(taped), eval.data());
        assert_eq!(tape.shape(taped), eval.shape());
    }

    #[test]
    fn loss_values_match_tape() {
        let a = Tensor::from_vec(&[2, 2], vec![0.2, 0.8, 0.4, 0.9]).unwrap();
        let t = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let (ai, ti) = (tape.constant(&a), tape.constant(&t));
        let sse_id = tape.sse(ai, ti).unwrap();
        assert_eq!(eval_sse(&a, &t).unwrap(), tape.scalar(sse_id));
        let bce_id = tape.bce(ti, ai).unwrap();
        assert_eq!(eval_bce(&t, &a).unwrap(), tape.scalar(bce_id));

        let logits = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let labels = [1usize, 2];
        let mut tape2 = Tape::new();
        let li = tape2.constant(&logits);
        let ce = tape2.softmax_cross_entropy(li, &labels).unwrap();
        assert_eq!(
            eval_softmax_cross_entropy(&logits, &labels).unwrap(),
            tape2.scalar(ce)
        );
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let logits = Tensor::from_vec(&[3, 3], vec![
            1.0, 3.0, 2.0,
            5.0, 5.0, 1.0,
            0.0, 0.0, 0.0,
        ])
        .unwrap();
        assert_eq!(argmax_rows(&logits).unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(eval_sse(&a, &b).is_err());
        let w = Tensor::zeros(&[5, 4]);
        let bias = Tensor::zeros(&[4]);
        let err = eval_dense(&a, &w, &bias).unwrap_err();
        assert!(err.to_string().contains("input width 2"), "{err}");
    }
}
