//! The three pretraining losses and the per-batch graph assembly around them.
//!
//! Every pretraining step is encoder, decoder, then one of three heads:
//!
//! * pixel-wise: error between the reconstruction and the original image;
//! * perceptual similarity: error between loss-network features of the
//!   reconstruction, computed through the frozen network on the tape, and
//!   features of the original;
//! * feature prediction: error between the decoder output, which already
//!   lives in feature space, and precomputed features of the original.
//!
//! The heads differ in what ends up on the tape. Perceptual similarity tapes
//! the whole loss network behind the decoder; feature prediction tapes
//! nothing beyond the autoencoder, because its target comes from a cache.
//! That difference is the cost story the rest of the crate measures, so the
//! tests here pin it by inspecting recorded op counts.

use crate::nets::{Model, NetError};
use crate::tensor::{numel, Activation, Tape, Tensor, TensorError, ValueId};
use serde::{Deserialize, Serialize};

/// Which pretraining head to attach behind the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Pixelwise,
    PerceptualSimilarity,
    FeaturePrediction,
}

impl LossKind {
    pub fn code(&self) -> &'static str {
        match self {
            LossKind::Pixelwise => "pw",
            LossKind::PerceptualSimilarity => "ps",
            LossKind::FeaturePrediction => "fp",
        }
    }
}

/// Elementwise error summed over all entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementLoss {
    SquaredError,
    BinaryCrossEntropy,
}

/// What the loss head compares the reconstruction against.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Original images, for the pixel-wise head.
    Images(&'a Tensor),
    /// Loss-network features of the originals, for the perceptual and
    /// feature-prediction heads.
    Features(&'a Tensor),
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("{kind} loss requires {required} as its target")]
    WrongTarget {
        kind: &'static str,
        required: &'static str,
    },
    #[error("perceptual similarity requires a loss network")]
    MissingLossNetwork,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ids returned by [`taped_pretrain_loss`]: the scalar loss plus the
/// parameter leaves of both trainable halves, for gradient pickup.
#[derive(Debug)]
pub struct TapedStep {
    pub loss: ValueId,
    pub encoder_params: Vec<ValueId>,
    pub decoder_params: Vec<ValueId>,
}

fn scalar_loss(
    tape: &mut Tape,
    f: ElementLoss,
    pred: ValueId,
    target: ValueId,
) -> Result<ValueId, TensorError> {
    match f {
        ElementLoss::SquaredError => tape.sse(pred, target),
        ElementLoss::BinaryCrossEntropy => tape.bce(target, pred),
    }
}

/// Runs `lossnet` frozen on `x` up to its tap, flattens per sample, and
/// squashes with a sigmoid, all recorded on the tape. The taped twin of
/// [`crate::nets::extract_features`].
pub fn taped_features(
    tape: &mut Tape,
    lossnet: &Model,
    x: ValueId,
) -> Result<ValueId, LossError> {
    let (tap_out, _) = lossnet.forward_taped_to_tap(tape, x, true)?;
    let shape = tape.shape(tap_out).to_vec();
    let flat = tape.reshape(tap_out, &[shape[0], numel(&shape[1..])])?;
    Ok(tape.activation(flat, Activation::Sigmoid))
}

/// Pixel-wise head: error between the reconstruction and the images.
pub fn pixelwise_loss(
    tape: &mut Tape,
    f: ElementLoss,
    recon: ValueId,
    images: &Tensor,
) -> Result<ValueId, LossError> {
    let target = tape.constant(images);
    Ok(scalar_loss(tape, f, recon, target)?)
}

/// Perceptual head: error between frozen loss-network features of the
/// reconstruction and the given target features.
pub fn perceptual_similarity_loss(
    tape: &mut Tape,
    f: ElementLoss,
    lossnet: &Model,
    recon: ValueId,
    target_features: &Tensor,
) -> Result<ValueId, LossError> {
    let recon_features = taped_features(tape, lossnet, recon)?;
    let target = tape.constant(target_features);
    Ok(scalar_loss(tape, f, recon_features, target)?)
}

/// Feature-prediction head: error between the decoder output and the given
/// target features. Nothing else goes on the tape.
pub fn feature_prediction_loss(
    tape: &mut Tape,
    f: ElementLoss,
    recon: ValueId,
    target_features: &Tensor,
) -> Result<ValueId, LossError> {
    let target = tape.constant(target_features);
    Ok(scalar_loss(tape, f, recon, target)?)
}

/// Records one full pretraining step: encoder, decoder, and the loss head
/// selected by `kind`. `input` is whatever the encoder consumes (images or
/// cached features); `target` must match the head.
pub fn taped_pretrain_loss(
    tape: &mut Tape,
    encoder: &Model,
    decoder: &Model,
    lossnet: Option<&Model>,
    kind: LossKind,
    f: ElementLoss,
    input: &Tensor,
    target: Target,
) -> Result<TapedStep, LossError> {
    let input_id = tape.constant(input);
    let (z, encoder_params) = encoder.forward_taped(tape, input_id, false)?;
    let (recon, decoder_params) = decoder.forward_taped(tape, z, false)?;
    let loss = match (kind, target) {
        (LossKind::Pixelwise, Target::Images(images)) => pixelwise_loss(tape, f, recon, images)?,
        (LossKind::PerceptualSimilarity, Target::Features(features)) => {
            let lossnet = lossnet.ok_or(LossError::MissingLossNetwork)?;
            perceptual_similarity_loss(tape, f, lossnet, recon, features)?
        }
        (LossKind::FeaturePrediction, Target::Features(features)) => {
            feature_prediction_loss(tape, f, recon, features)?
        }
        (LossKind::Pixelwise, _) => {
            return Err(LossError::WrongTarget {
                kind: "pixel-wise",
                required: "images",
            })
        }
        (kind, _) => {
            return Err(LossError::WrongTarget {
                kind: match kind {
                    LossKind::PerceptualSimilarity => "perceptual similarity",
                    _ => "feature prediction",
                },
                required: "features",
            })
        }
    };
    Ok(TapedStep {
        loss,
        encoder_params,
        decoder_params,
    })
}

fn eval_scalar_loss(f: ElementLoss, pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    match f {
        ElementLoss::SquaredError => crate::tensor::eval_sse(pred, target),
        ElementLoss::BinaryCrossEntropy => crate::tensor::eval_bce(target, pred),
    }
}

/// Tape-free value of the same step [`taped_pretrain_loss`] records, for
/// validation scoring. Matches the taped scalar bit for bit.
pub fn pretrain_loss_value(
    encoder: &Model,
    decoder: &Model,
    lossnet: Option<&Model>,
    kind: LossKind,
    f: ElementLoss,
    input: &Tensor,
    target: Target,
) -> Result<f64, LossError> {
    let z = encoder.forward(input)?;
    let recon = decoder.forward(&z)?;
    match (kind, target) {
        (LossKind::Pixelwise, Target::Images(images)) => Ok(eval_scalar_loss(f, &recon, images)?),
        (LossKind::PerceptualSimilarity, Target::Features(features)) => {
            let lossnet = lossnet.ok_or(LossError::MissingLossNetwork)?;
            let recon_features = crate::nets::extract_features(lossnet, &recon)?;
            Ok(eval_scalar_loss(f, &recon_features, features)?)
        }
        (LossKind::FeaturePrediction, Target::Features(features)) => {
            Ok(eval_scalar_loss(f, &recon, features)?)
        }
        (LossKind::Pixelwise, _) => Err(LossError::WrongTarget {
            kind: "pixel-wise",
            required: "images",
        }),
        (kind, _) => Err(LossError::WrongTarget {
            kind: match kind {
                LossKind::PerceptualSimilarity => "perceptual similarity",
                _ => "feature prediction",
            },
            required: "features",
        }),
    }
}

/// Central-difference check of a whole pretraining step: every element of
/// every encoder and decoder parameter, against the taped gradients. Returns
/// the worst relative error.
pub fn grad_check_pretrain(
    encoder: &mut Model,
    decoder: &mut Model,
    lossnet: Option<&Model>,
    kind: LossKind,
    f: ElementLoss,
    input: &Tensor,
    target: Target,
    eps: f64,
) -> Result<f64, LossError> {
    for p in encoder.params_mut() {
        p.requires_grad = true;
        p.clear_grad();
    }
    for p in decoder.params_mut() {
        p.requires_grad = true;
        p.clear_grad();
    }

    let mut tape = Tape::new();
    let step = taped_pretrain_loss(&mut tape, encoder, decoder, lossnet, kind, f, input, target)?;
    tape.backward(step.loss)?;
    encoder.absorb_gradients(&tape, &step.encoder_params);
    decoder.absorb_gradients(&tape, &step.decoder_params);

    let mut analytic = Vec::new();
    for p in encoder.params().iter().chain(decoder.params()) {
        analytic.push(match p.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.numel()],
        });
    }

    let enc_count = encoder.params().len();
    let total = enc_count + decoder.params().len();
    let mut numeric = Vec::with_capacity(total);
    for slot in 0..total {
        let count = if slot < enc_count {
            encoder.params()[slot].numel()
        } else {
            decoder.params()[slot - enc_count].numel()
        };
        let mut grad = vec![0.0; count];
        for j in 0..count {
            let mut probe = |delta: f64| -> Result<f64, LossError> {
                let store = |enc: &mut Model, dec: &mut Model, d: f64| {
                    if slot < enc_count {
                        enc.params_mut()[slot].data_mut()[j] += d;
                    } else {
                        dec.params_mut()[slot - enc_count].data_mut()[j] += d;
                    }
                };
                store(encoder, decoder, delta);
                let v = pretrain_loss_value(encoder, decoder, lossnet, kind, f, input, target);
                store(encoder, decoder, -delta);
                v
            };
            let hi = probe(eps)?;
            let lo = probe(-eps)?;
            grad[j] = (hi - lo) / (2.0 * eps);
        }
        numeric.push(grad);
    }

    for p in encoder.params_mut() {
        p.clear_grad();
    }
    for p in decoder.params_mut() {
        p.clear_grad();
    }
    Ok(crate::tensor::compare_gradients(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{extract_features, LayerSpec, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn model(spec: ModelSpec, seed: u64) -> Model {
        Model::from_spec(spec, &mut rng(seed)).unwrap()
    }

    /// [1, 4, 4] image to a 3-dim code.
    fn tiny_image_encoder(seed: u64) -> Model {
        model(
            ModelSpec {
                layers: vec![
                    LayerSpec::Conv {
                        out_channels: 2,
                        kernel: 2,
                        stride: 2,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: 3 },
                ],
                input_shape: vec![1, 4, 4],
                tap: None,
            },
            seed,
        )
    }

    /// 3-dim code back to a [1, 4, 4] image.
    fn tiny_image_decoder(seed: u64) -> Model {
        model(
            ModelSpec {
                layers: vec![
                    LayerSpec::Dense { units: 8 },
                    LayerSpec::Relu,
                    LayerSpec::Reshape {
                        shape: vec![2, 2, 2],
                    },
                    LayerSpec::Deconv {
                        out_channels: 1,
                        kernel: 2,
                        stride: 2,
                    },
                    LayerSpec::Sigmoid,
                ],
                input_shape: vec![3],
                tap: None,
            },
            seed,
        )
    }

    /// Classifier over [1, 4, 4] images with an 8-dim tap.
    fn tiny_lossnet(seed: u64) -> Model {
        model(
            ModelSpec {
                layers: vec![
                    LayerSpec::Conv {
                        out_channels: 2,
                        kernel: 2,
                        stride: 2,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: 2 },
                ],
                input_shape: vec![1, 4, 4],
                tap: Some(1),
            },
            seed,
        )
    }

    /// 3-dim code to an 8-dim feature reconstruction.
    fn tiny_feature_decoder(seed: u64) -> Model {
        model(
            ModelSpec {
                layers: vec![
                    LayerSpec::Dense { units: 6 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { units: 8 },
                    LayerSpec::Sigmoid,
                ],
                input_shape: vec![3],
                tap: None,
            },
            seed,
        )
    }

    fn batch_images(seed: u64, n: usize) -> Tensor {
        use rand::Rng;
        let mut r = rng(seed);
        Tensor::from_vec(
            &[n, 1, 4, 4],
            (0..n * 16).map(|_| r.gen_range(0.05..0.95)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn feature_prediction_tape_carries_no_lossnet_ops() {
        let enc = tiny_image_encoder(1);
        let dec = tiny_feature_decoder(2);
        let lossnet = tiny_lossnet(3);
        let images = batch_images(4, 3);
        let features = extract_features(&lossnet, &images).unwrap();

        let mut tape = Tape::new();
        let step = taped_pretrain_loss(
            &mut tape,
            &enc,
            &dec,
            Some(&lossnet),
            LossKind::FeaturePrediction,
            ElementLoss::SquaredError,
            &images,
            Target::Features(&features),
        )
        .unwrap();
        let counts = tape.op_counts();
        assert_eq!(counts.get("conv2d"), Some(&1), "only the encoder conv");
        assert_eq!(counts.get("deconv2d"), None);
        tape.backward(step.loss).unwrap();
    }

    #[test]
    fn perceptual_tape_carries_the_frozen_lossnet() {
        let enc = tiny_image_encoder(1);
        let dec = tiny_image_decoder(2);
        let lossnet = tiny_lossnet(3);
        let images = batch_images(4, 3);
        let features = extract_features(&lossnet, &images).unwrap();

        let mut tape = Tape::new();
        let step = taped_pretrain_loss(
            &mut tape,
            &enc,
            &dec,
            Some(&lossnet),
            LossKind::PerceptualSimilarity,
            ElementLoss::SquaredError,
            &images,
            Target::Features(&features),
        )
        .unwrap();
        let counts = tape.op_counts();
        assert_eq!(
            counts.get("conv2d"),
            Some(&2),
            "encoder conv plus lossnet conv"
        );
        assert_eq!(counts.get("deconv2d"), Some(&1));

        tape.backward(step.loss).unwrap();
        for &id in step.encoder_params.iter().chain(&step.decoder_params) {
            assert!(tape.grad(id).is_some());
        }
    }

    #[test]
    fn pixelwise_tape_stops_at_the_reconstruction() {
        let enc = tiny_image_encoder(1);
        let dec = tiny_image_decoder(2);
        let images = batch_images(4, 3);

        let mut tape = Tape::new();
        taped_pretrain_loss(
            &mut tape,
            &enc,
            &dec,
            None,
            LossKind::Pixelwise,
            ElementLoss::SquaredError,
            &images,
            Target::Images(&images),
        )
        .unwrap();
        let counts = tape.op_counts();
        assert_eq!(counts.get("conv2d"), Some(&1));
        assert_eq!(counts.get("deconv2d"), Some(&1));
        assert_eq!(counts.get("sse"), Some(&1));
    }

    #[test]
    fn taped_and_eval_loss_values_agree_bitwise() {
        let enc = tiny_image_encoder(5);
        let img_dec = tiny_image_decoder(6);
        let feat_dec = tiny_feature_decoder(7);
        let lossnet = tiny_lossnet(8);
        let images = batch_images(9, 2);
        let features = extract_features(&lossnet, &images).unwrap();

        let cases: Vec<(LossKind, &Model, Target)> = vec![
            (LossKind::Pixelwise, &img_dec, Target::Images(&images)),
            (
                LossKind::PerceptualSimilarity,
                &img_dec,
                Target::Features(&features),
            ),
            (
                LossKind::FeaturePrediction,
                &feat_dec,
                Target::Features(&features),
            ),
        ];
        for (kind, dec, target) in cases {
            for f in [ElementLoss::SquaredError, ElementLoss::BinaryCrossEntropy] {
                let mut tape = Tape::new();
                let step = taped_pretrain_loss(
                    &mut tape,
                    &enc,
                    dec,
                    Some(&lossnet),
                    kind,
                    f,
                    &images,
                    target,
                )
                .unwrap();
                let eval =
                    pretrain_loss_value(&enc, dec, Some(&lossnet), kind, f, &images, target)
                        .unwrap();
                assert_eq!(tape.scalar(step.loss), eval, "{kind:?} {f:?}");
            }
        }
    }

    #[test]
    fn perceptual_head_leaves_lossnet_parameters_untouched() {
        let mut enc = tiny_image_encoder(10);
        let mut dec = tiny_image_decoder(11);
        let lossnet = tiny_lossnet(12);
        let images = batch_images(13, 2);
        let features = extract_features(&lossnet, &images).unwrap();

        for p in enc.params_mut().iter_mut().chain(dec.params_mut()) {
            p.requires_grad = true;
        }
        let mut tape = Tape::new();
        let before = lossnet.snapshot_params();
        let step = taped_pretrain_loss(
            &mut tape,
            &enc,
            &dec,
            Some(&lossnet),
            LossKind::PerceptualSimilarity,
            ElementLoss::SquaredError,
            &images,
            Target::Features(&features),
        )
        .unwrap();
        tape.backward(step.loss).unwrap();
        enc.absorb_gradients(&tape, &step.encoder_params);
        dec.absorb_gradients(&tape, &step.decoder_params);

        let moved = enc
            .params()
            .iter()
            .chain(dec.params())
            .filter(|p| p.grad().map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false))
            .count();
        assert!(moved > 0, "trainable halves receive gradient");
        for (p, b) in lossnet.params().iter().zip(&before) {
            assert_eq!(p.data(), &b[..]);
            assert!(p.grad().is_none());
        }
    }

    #[test]
    fn wrong_target_pairings_are_rejected() {
        let enc = tiny_image_encoder(1);
        let dec = tiny_image_decoder(2);
        let images = batch_images(3, 1);
        let feats = Tensor::zeros(&[1, 8]);

        let mut tape = Tape::new();
        let err = taped_pretrain_loss(
            &mut tape,
            &enc,
            &dec,
            None,
            LossKind::Pixelwise,
            ElementLoss::SquaredError,
            &images,
            Target::Features(&feats),
        )
        .unwrap_err();
        assert!(matches!(err, LossError::WrongTarget { .. }), "{err}");

        let mut tape = Tape::new();
        let err = taped_pretrain_loss(
            &mut tape,
            &enc,
            &dec,
            None,
            LossKind::PerceptualSimilarity,
            ElementLoss::SquaredError,
            &images,
            Target::Features(&feats),
        )
        .unwrap_err();
        assert!(matches!(err, LossError::MissingLossNetwork), "{err}");

        let mut tape = Tape::new();
        let err = taped_pretrain_loss(
            &mut tape,
            &enc,
            &dec,
            None,
            LossKind::FeaturePrediction,
            ElementLoss::SquaredError,
            &images,
            Target::Images(&images),
        )
        .unwrap_err();
        assert!(err.to_string().contains("features"), "{err}");
    }

    /// Nudges every parameter off its init value. Zero-init biases put relu
    /// inputs exactly on the kink, where one-sided finite differences and the
    /// analytic convention legitimately disagree; a generic point avoids
    /// testing at that measure-zero configuration.
    fn jitter(model: &mut Model, seed: u64) {
        use rand::Rng;
        let mut r = rng(seed);
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += r.gen_range(0.05..0.15) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
    }

    #[test]
    fn composed_gradients_match_finite_differences() {
        let images = batch_images(20, 2);
        let lossnet = tiny_lossnet(21);
        let features = extract_features(&lossnet, &images).unwrap();

        let mut enc = tiny_image_encoder(22);
        let mut dec = tiny_image_decoder(23);
        jitter(&mut enc, 122);
        jitter(&mut dec, 123);
        let worst = grad_check_pretrain(
            &mut enc,
            &mut dec,
            None,
            LossKind::Pixelwise,
            ElementLoss::SquaredError,
            &images,
            Target::Images(&images),
            1e-3,
        )
        .unwrap();
        assert!(worst < 1e-3, "pixel-wise worst rel err {worst}");

        let mut enc = tiny_image_encoder(24);
        let mut dec = tiny_image_decoder(25);
        jitter(&mut enc, 124);
        jitter(&mut dec, 125);
        let worst = grad_check_pretrain(
            &mut enc,
            &mut dec,
            Some(&lossnet),
            LossKind::PerceptualSimilarity,
            ElementLoss::SquaredError,
            &images,
            Target::Features(&features),
            1e-3,
        )
        .unwrap();
        assert!(worst < 1e-3, "perceptual worst rel err {worst}");

        let mut enc = tiny_image_encoder(26);
        let mut dec = tiny_feature_decoder(27);
        jitter(&mut enc, 126);
        jitter(&mut dec, 127);
        let worst = grad_check_pretrain(
            &mut enc,
            &mut dec,
            None,
            LossKind::FeaturePrediction,
            ElementLoss::BinaryCrossEntropy,
            &images,
            Target::Features(&features),
            1e-3,
        )
        .unwrap();
        assert!(worst < 1e-3, "feature-prediction worst rel err {worst}");
    }

    #[test]
    fn loss_codes_are_stable() {
        assert_eq!(LossKind::Pixelwise.code(), "pw");
        assert_eq!(LossKind::PerceptualSimilarity.code(), "ps");
        assert_eq!(LossKind::FeaturePrediction.code(), "fp");
    }
}
