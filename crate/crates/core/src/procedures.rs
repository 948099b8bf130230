//! The six pretraining procedures and their shared training loop.
//!
//! A procedure names three choices at once: what the encoder consumes
//! (images or loss-network features), what the decoder emits, and which
//! loss drives the pair. Training runs Adam over shuffled minibatches
//! with a held-out validation split, keeps a copy of the best-validation
//! parameters, and can stop early once improvement stalls. Procedures
//! that consume or predict features push the whole dataset through the
//! frozen loss network once up front; that cache spills to a temp file
//! when it would not fit in memory. Only the image-to-image perceptual
//! procedure skips the cache and re-extracts target features every pass,
//! which is exactly the recurring cost the feature-prediction variants
//! avoid.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::Dataset;
use crate::losses::{
    pretrain_loss_value, taped_pretrain_loss, ElementLoss, LossError, LossKind, Target,
};
use crate::nets::{
    build_feature_codec, build_image_decoder, build_image_encoder, extract_features,
    CodecDirection, Model, NetError,
};
use crate::tensor::{optimizer_step, AdamState, Tape, Tensor, TensorError};

/// What the encoder reads as its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderInput {
    Image,
    Feature,
}

/// What the decoder reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderOutput {
    Image,
    Feature,
}

/// One row of the procedure table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcedureSpec {
    pub name: &'static str,
    pub encoder_input: EncoderInput,
    pub decoder_output: DecoderOutput,
    pub loss: LossKind,
}

/// All six procedures, named input-output-loss.
pub const PROCEDURES: [ProcedureSpec; 6] = [
    ProcedureSpec {
        name: "I-I-PW",
        encoder_input: EncoderInput::Image,
        decoder_output: DecoderOutput::Image,
        loss: LossKind::Pixelwise,
    },
    ProcedureSpec {
        name: "I-I-PS",
        encoder_input: EncoderInput::Image,
        decoder_output: DecoderOutput::Image,
        loss: LossKind::PerceptualSimilarity,
    },
    ProcedureSpec {
        name: "F-I-PW",
        encoder_input: EncoderInput::Feature,
        decoder_output: DecoderOutput::Image,
        loss: LossKind::Pixelwise,
    },
    ProcedureSpec {
        name: "F-I-PS",
        encoder_input: EncoderInput::Feature,
        decoder_output: DecoderOutput::Image,
        loss: LossKind::PerceptualSimilarity,
    },
    ProcedureSpec {
        name: "I-F-FP",
        encoder_input: EncoderInput::Image,
        decoder_output: DecoderOutput::Feature,
        loss: LossKind::FeaturePrediction,
    },
    ProcedureSpec {
        name: "F-F-FP",
        encoder_input: EncoderInput::Feature,
        decoder_output: DecoderOutput::Feature,
        loss: LossKind::FeaturePrediction,
    },
];

impl ProcedureSpec {
    /// Every procedure except plain image autoencoding needs the frozen
    /// loss network, either for its inputs or for its targets.
    pub fn needs_loss_network(&self) -> bool {
        self.encoder_input == EncoderInput::Feature || self.loss != LossKind::Pixelwise
    }

    /// True when features of the whole dataset are computed once before
    /// the first epoch. Feature-input procedures need them as inputs and
    /// feature-prediction needs them as fixed targets.
    pub fn caches_features(&self) -> bool {
        self.encoder_input == EncoderInput::Feature || self.loss == LossKind::FeaturePrediction
    }

    /// True when target features are re-extracted from the loss network
    /// on every pass instead of being served from the cache.
    pub fn recomputes_features_each_epoch(&self) -> bool {
        self.loss == LossKind::PerceptualSimilarity && self.encoder_input == EncoderInput::Image
    }
}

/// Looks a procedure up by name, case-insensitively.
pub fn make_procedure(name: &str) -> Result<&'static ProcedureSpec, ProcedureError> {
    PROCEDURES
        .iter()
        .find(|spec| spec.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| ProcedureError::UnknownProcedure {
            name: name.to_string(),
            valid: PROCEDURES
                .iter()
                .map(|spec| spec.name)
                .collect::<Vec<_>>()
                .join(", "),
        })
}

#[derive(Debug, thiserror::Error)]
pub enum ProcedureError {
    #[error("unknown procedure {name:?}; expected one of {valid}")]
    UnknownProcedure { name: String, valid: String },
    #[error("invalid training setup: {0}")]
    InvalidConfig(String),
    #[error("training diverged during epoch {epoch}")]
    Diverged { epoch: usize, history: TrainHistory },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("feature cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// An encoder/decoder pair built for one procedure.
pub struct Procedure {
    pub spec: &'static ProcedureSpec,
    pub encoder: Model,
    pub decoder: Model,
}

/// Instantiates the encoder and decoder a procedure calls for. Image
/// ends use the convolutional builders; feature ends use the dense
/// codec sized to the loss network's tap.
pub fn build_procedure(
    spec: &'static ProcedureSpec,
    image_size: usize,
    channels: usize,
    z: usize,
    lossnet: Option<&Model>,
    rng: &mut ChaCha8Rng,
) -> Result<Procedure, ProcedureError> {
    if z == 0 {
        return Err(ProcedureError::InvalidConfig(
            "embedding width must be at least 1".to_string(),
        ));
    }
    let feature_dim = |lossnet: Option<&Model>| -> Result<usize, ProcedureError> {
        let net = lossnet.ok_or_else(|| {
            ProcedureError::InvalidConfig(format!(
                "procedure {} needs a loss network to size its feature end",
                spec.name
            ))
        })?;
        Ok(net.feature_dim()?)
    };
    let encoder = match spec.encoder_input {
        EncoderInput::Image => build_image_encoder(image_size, channels, z, rng)?,
        EncoderInput::Feature => {
            build_feature_codec(feature_dim(lossnet)?, z, CodecDirection::Encode, rng)?
        }
    };
    let decoder = match spec.decoder_output {
        DecoderOutput::Image => build_image_decoder(image_size, channels, z, rng)?,
        DecoderOutput::Feature => {
            build_feature_codec(feature_dim(lossnet)?, z, CodecDirection::Decode, rng)?
        }
    };
    Ok(Procedure {
        spec,
        encoder,
        decoder,
    })
}

/// Hyperparameters for one pretraining run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
    /// Stop after this many epochs without a validation improvement.
    /// `None` always runs the full epoch budget.
    pub patience: Option<usize>,
    pub seed: u64,
    pub element_loss: ElementLoss,
}

/// Per-sample losses and timing for one epoch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

/// What a pretraining run reports back.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Renders the per-epoch records as CSV. Floats use their shortest
    /// round-trip form so re-parsing them recovers the exact values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,wall_seconds\n");
        for rec in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                rec.epoch, rec.train_loss, rec.val_loss, rec.wall_seconds
            ));
        }
        out
    }
}

/// Deterministically shuffles `0..n` and carves off the validation tail.
pub fn split_train_val(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let split = n - n_val;
    let val = order.split_off(split);
    (order, val)
}

/// Features of a whole dataset, extracted once through the frozen loss
/// network. Held in memory when small enough, otherwise streamed to an
/// unlinked temp file and read back row by row.
pub enum FeatureCache {
    Memory { features: Tensor },
    Disk { file: File, rows: usize, dim: usize },
}

/// Images per forward pass while filling the cache.
const FEATURE_EXTRACT_BATCH: usize = 256;

/// Caches larger than this spill to disk.
pub const FEATURE_CACHE_MEMORY_CAP_BYTES: usize = 256 << 20;

/// Losses at desk scale sit within a few orders of magnitude of 1.
/// Anything beyond this is a blowup, flagged before products of huge
/// activations can overflow to infinity somewhere mid-network.
pub(crate) const DIVERGENCE_LOSS_CAP: f64 = 1e50;

impl FeatureCache {
    pub fn build(
        lossnet: &Model,
        images: &Tensor,
        memory_cap_bytes: usize,
    ) -> Result<FeatureCache, ProcedureError> {
        let n = images.shape()[0];
        if n == 0 {
            return Err(ProcedureError::InvalidConfig(
                "cannot cache features of an empty dataset".to_string(),
            ));
        }
        let mut dim = 0;
        let mut mem: Vec<f64> = Vec::new();
        let mut file: Option<File> = None;
        let mut start = 0;
        while start < n {
            let end = (start + FEATURE_EXTRACT_BATCH).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let batch = images.gather_rows(&idx)?;
            let feats = extract_features(lossnet, &batch)?;
            if start == 0 {
                dim = feats.shape()[1];
                if n * dim * 8 > memory_cap_bytes {
                    file = Some(tempfile::tempfile()?);
                } else {
                    mem.reserve_exact(n * dim);
                }
            }
            match &mut file {
                Some(f) => {
                    let mut bytes = Vec::with_capacity(feats.numel() * 8);
                    for v in feats.data() {
                        bytes.extend_from_slice(&v.to_le_bytes());
                    }
                    f.write_all(&bytes)?;
                }
                None => mem.extend_from_slice(feats.data()),
            }
            start = end;
        }
        Ok(match file {
            Some(file) => FeatureCache::Disk { file, rows: n, dim },
            None => FeatureCache::Memory {
                features: Tensor::from_vec(&[n, dim], mem)?,
            },
        })
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureCache::Memory { features } => features.shape()[0],
            FeatureCache::Disk { rows, .. } => *rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureCache::Memory { features } => features.shape()[1],
            FeatureCache::Disk { dim, .. } => *dim,
        }
    }

    /// Gathers the given rows as an `[indices.len(), dim]` tensor.
    pub fn rows(&self, indices: &[usize]) -> Result<Tensor, ProcedureError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(ProcedureError::InvalidConfig(format!(
                "cache row {bad} out of range for {} rows",
                self.len()
            )));
        }
        match self {
            FeatureCache::Memory { features } => Ok(features.gather_rows(indices)?),
            FeatureCache::Disk { file, dim, .. } => {
                let mut out = Vec::with_capacity(indices.len() * dim);
                let mut buf = vec![0u8; dim * 8];
                let mut handle: &File = file;
                for &i in indices {
                    handle.seek(SeekFrom::Start((i * dim * 8) as u64))?;
                    handle.read_exact(&mut buf)?;
                    for chunk in buf.chunks_exact(8) {
                        out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                    }
                }
                Ok(Tensor::from_vec(&[indices.len(), *dim], out)?)
            }
        }
    }
}

struct StepInputs {
    images: Tensor,
    cached: Option<Tensor>,
    fresh: Option<Tensor>,
}

impl StepInputs {
    fn assemble(
        spec: &ProcedureSpec,
        data: &Dataset,
        batch: &[usize],
        lossnet: Option<&Model>,
        cache: Option<&FeatureCache>,
    ) -> Result<StepInputs, ProcedureError> {
        let images = data.images.gather_rows(batch)?;
        let cached = match cache {
            Some(c) => Some(c.rows(batch)?),
            None => None,
        };
        let fresh = if spec.recomputes_features_each_epoch() {
            let net = lossnet.ok_or_else(|| {
                ProcedureError::InvalidConfig(format!(
                    "procedure {} needs a loss network",
                    spec.name
                ))
            })?;
            Some(extract_features(net, &images)?)
        } else {
            None
        };
        Ok(StepInputs {
            images,
            cached,
            fresh,
        })
    }

    fn encoder_input(&self, spec: &ProcedureSpec) -> Result<&Tensor, ProcedureError> {
        match spec.encoder_input {
            EncoderInput::Image => Ok(&self.images),
            EncoderInput::Feature => self.cached.as_ref().ok_or_else(|| {
                ProcedureError::InvalidConfig(format!(
                    "procedure {} needs a feature cache for its inputs",
                    spec.name
                ))
            }),
        }
    }

    fn target(&self, spec: &ProcedureSpec) -> Result<Target<'_>, ProcedureError> {
        match spec.loss {
            LossKind::Pixelwise => Ok(Target::Images(&self.images)),
            LossKind::FeaturePrediction => {
                self.cached.as_ref().map(Target::Features).ok_or_else(|| {
                    ProcedureError::InvalidConfig(format!(
                        "procedure {} needs a feature cache for its targets",
                        spec.name
                    ))
                })
            }
            LossKind::PerceptualSimilarity => self
                .fresh
                .as_ref()
                .or(self.cached.as_ref())
                .map(Target::Features)
                .ok_or_else(|| {
                    ProcedureError::InvalidConfig(format!(
                        "procedure {} has no target features",
                        spec.name
                    ))
                }),
        }
    }
}

/// Mean per-sample loss of `procedure` over the given dataset rows,
/// computed without touching any gradients. Procedures that read or
/// predict features need `cache` built over the same dataset.
pub fn evaluate_split(
    procedure: &Procedure,
    lossnet: Option<&Model>,
    data: &Dataset,
    indices: &[usize],
    cache: Option<&FeatureCache>,
    element_loss: ElementLoss,
    batch_size: usize,
) -> Result<f64, ProcedureError> {
    if indices.is_empty() {
        return Err(ProcedureError::InvalidConfig(
            "cannot evaluate an empty split".to_string(),
        ));
    }
    let spec = procedure.spec;
    let mut sum = 0.0;
    for batch in indices.chunks(batch_size.max(1)) {
        let inputs = StepInputs::assemble(spec, data, batch, lossnet, cache)?;
        sum += pretrain_loss_value(
            &procedure.encoder,
            &procedure.decoder,
            lossnet,
            spec.loss,
            element_loss,
            inputs.encoder_input(spec)?,
            inputs.target(spec)?,
        )?;
    }
    Ok(sum / indices.len() as f64)
}

fn validate_config(data: &Dataset, config: &TrainConfig) -> Result<(), ProcedureError> {
    let bad = |msg: String| Err(ProcedureError::InvalidConfig(msg));
    if config.epochs == 0 {
        return bad("epoch budget must be at least 1".to_string());
    }
    if config.batch_size == 0 {
        return bad("batch size must be at least 1".to_string());
    }
    if !config.learning_rate.is_finite() || config.learning_rate < 0.0 {
        return bad(format!(
            "learning rate must be finite and non-negative, got {}",
            config.learning_rate
        ));
    }
    if !(config.val_fraction > 0.0 && config.val_fraction < 1.0) {
        return bad(format!(
            "validation fraction must lie strictly between 0 and 1, got {}",
            config.val_fraction
        ));
    }
    if config.patience == Some(0) {
        return bad("patience must be at least 1 epoch".to_string());
    }
    if data.len() < 2 {
        return bad(format!(
            "need at least 2 samples to split, got {}",
            data.len()
        ));
    }
    Ok(())
}

/// Runs the full pretraining loop for one procedure and returns its
/// history. The models are left holding the parameters of the best
/// validation epoch, not the last one. A non-finite loss aborts the run
/// with the history gathered so far.
pub fn pretrain(
    procedure: &mut Procedure,
    lossnet: Option<&Model>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory, ProcedureError> {
    validate_config(data, config)?;
    let spec = procedure.spec;
    if spec.needs_loss_network() && lossnet.is_none() {
        return Err(ProcedureError::InvalidConfig(format!(
            "procedure {} needs a loss network",
            spec.name
        )));
    }

    let (train_idx, val_idx) = split_train_val(data.len(), config.val_fraction, config.seed);
    let cache = if spec.caches_features() {
        Some(FeatureCache::build(
            lossnet.expect("checked above"),
            &data.images,
            FEATURE_CACHE_MEMORY_CAP_BYTES,
        )?)
    } else {
        None
    };

    let mut enc_adam = AdamState::new(procedure.encoder.params());
    let mut dec_adam = AdamState::new(procedure.decoder.params());
    let mut history = TrainHistory::default();
    let mut best_snapshot: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    let mut epochs_since_improvement = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let inputs = StepInputs::assemble(spec, data, batch, lossnet, cache.as_ref())?;
            let mut tape = Tape::new();
            let step = match taped_pretrain_loss(
                &mut tape,
                &procedure.encoder,
                &procedure.decoder,
                lossnet,
                spec.loss,
                config.element_loss,
                inputs.encoder_input(spec)?,
                inputs.target(spec)?,
            ) {
                Ok(step) => step,
                Err(LossError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(ProcedureError::Diverged { epoch, history });
                }
                Err(other) => return Err(other.into()),
            };
            let loss_value = tape.scalar(step.loss);
            if !loss_value.is_finite() || loss_value > DIVERGENCE_LOSS_CAP {
                return Err(ProcedureError::Diverged { epoch, history });
            }
            tape.backward(step.loss)?;
            procedure.encoder.absorb_gradients(&tape, &step.encoder_params);
            procedure.decoder.absorb_gradients(&tape, &step.decoder_params);
            optimizer_step(
                procedure.encoder.params_mut(),
                &mut enc_adam,
                config.learning_rate,
            )?;
            optimizer_step(
                procedure.decoder.params_mut(),
                &mut dec_adam,
                config.learning_rate,
            )?;
            loss_sum += loss_value;
        }
        let train_loss = loss_sum / train_idx.len() as f64;

        let val_loss = evaluate_split(
            procedure,
            lossnet,
            data,
            &val_idx,
            cache.as_ref(),
            config.element_loss,
            config.batch_size,
        )?;
        if !val_loss.is_finite() || val_loss > DIVERGENCE_LOSS_CAP {
            return Err(ProcedureError::Diverged { epoch, history });
        }

        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        });

        let improved = history.best_val_loss.map_or(true, |best| val_loss < best);
        if improved {
            history.best_val_loss = Some(val_loss);
            history.best_epoch = Some(epoch);
            best_snapshot = Some((
                procedure.encoder.snapshot_params(),
                procedure.decoder.snapshot_params(),
            ));
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if let Some(patience) = config.patience {
                if epochs_since_improvement >= patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }

    if let Some((enc, dec)) = &best_snapshot {
        procedure.encoder.restore_params(enc);
        procedure.decoder.restore_params(dec);
    }
    Ok(history)
}
