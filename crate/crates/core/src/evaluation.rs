//! Embedding quality measured the only way that matters downstream:
//! train small predictors on the frozen embeddings and score them on
//! held-out data.
//!
//! A sweep of probe MLPs (from linear up to two wide hidden layers) is
//! trained per embedding set; whichever architecture validates best is
//! scored on the test split, so no procedure is penalized for needing a
//! different readout capacity. Classification reports accuracy,
//! position regression reports mean distance in pixels. The same
//! supervised trainer also fits the loss network and the end-to-end
//! reference CNN, which keeps tie-breaking, early stopping, and
//! divergence handling identical everywhere they appear.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::{Dataset, Targets};
use crate::nets::{
    build_image_encoder, build_predictor_mlp, extract_features, LayerSpec, Model, NetError,
    PROBE_ARCHS,
};
use crate::procedures::{split_train_val, EncoderInput, TrainHistory};
use crate::tensor::{
    argmax_rows, eval_softmax_cross_entropy, eval_sse, optimizer_step, AdamState, Tape, Tensor,
    TensorError,
};
use rand::seq::SliceRandom;

/// Inputs paired with prediction targets. For probes the inputs are
/// embeddings; the same shape serves raw images when scoring the loss
/// network or the supervised reference model.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub inputs: Tensor,
    pub targets: Targets,
    pub image_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// Fraction of correct argmax predictions; higher is better.
    Accuracy,
    /// Mean Euclidean distance to the true position, in pixels; lower
    /// is better.
    PixelDistance,
}

impl MetricKind {
    pub fn code(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::PixelDistance => "pixel_distance",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricKind::Accuracy)
    }
}

/// Outcome of probing one embedding set.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub metric_kind: MetricKind,
    pub value: f64,
    pub best_arch_id: usize,
    /// Best validation loss per probe architecture; `None` marks a
    /// probe that diverged and was excluded from selection.
    pub per_arch_val_losses: Vec<Option<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation setup: {0}")]
    InvalidSetup(String),
    #[error("supervised training diverged during epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters for supervised fitting of probes, the loss network,
/// and the reference CNN.
#[derive(Debug, Clone)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
    pub patience: Option<usize>,
    pub seed: u64,
}

/// What a supervised model is fitted against.
#[derive(Debug, Clone)]
pub enum SupervisedTask<'a> {
    Classification {
        labels: &'a [usize],
        num_classes: usize,
    },
    /// Regression against an `[n, d]` target matrix.
    Regression { targets: &'a Tensor },
}

const EMBED_BATCH: usize = 256;

use crate::procedures::DIVERGENCE_LOSS_CAP;

/// Pushes a dataset through a pretrained encoder, routing through the
/// frozen loss network first when the encoder consumes features.
pub fn embed_dataset(
    encoder: &Model,
    encoder_input: EncoderInput,
    lossnet: Option<&Model>,
    data: &Dataset,
) -> Result<EmbeddingSet, EvalError> {
    let n = data.len();
    if n == 0 {
        return Err(EvalError::InvalidSetup(
            "cannot embed an empty dataset".to_string(),
        ));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut width = 0;
    let mut start = 0;
    while start < n {
        let end = (start + EMBED_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let images = data.images.gather_rows(&idx)?;
        let z = match encoder_input {
            EncoderInput::Image => encoder.forward(&images)?,
            EncoderInput::Feature => {
                let net = lossnet.ok_or_else(|| {
                    EvalError::InvalidSetup(
                        "feature-input encoders need the loss network to embed".to_string(),
                    )
                })?;
                encoder.forward(&extract_features(net, &images)?)?
            }
        };
        width = z.shape()[1];
        rows.extend_from_slice(z.data());
        start = end;
    }
    Ok(EmbeddingSet {
        inputs: Tensor::from_vec(&[n, width], rows)?,
        targets: data.targets.clone(),
        image_size: data.image_size(),
    })
}

fn check_supervised_config(n: usize, config: &SupervisedConfig) -> Result<(), EvalError> {
    let bad = |msg: String| Err(EvalError::InvalidSetup(msg));
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
    if n < 2 {
        return bad(format!("need at least 2 samples to split, got {n}"));
    }
    Ok(())
}

fn task_len(task: &SupervisedTask) -> usize {
    match task {
        SupervisedTask::Classification { labels, .. } => labels.len(),
        SupervisedTask::Regression { targets } => targets.shape()[0],
    }
}

fn split_loss(
    model: &Model,
    inputs: &Tensor,
    task: &SupervisedTask,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    for batch in indices.chunks(batch_size.max(1)) {
        let x = inputs.gather_rows(batch)?;
        let out = model.forward(&x)?;
        sum += match task {
            SupervisedTask::Classification { labels, .. } => {
                let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                eval_softmax_cross_entropy(&out, &batch_labels)?
            }
            SupervisedTask::Regression { targets } => {
                eval_sse(&out, &targets.gather_rows(batch)?)?
            }
        };
    }
    Ok(sum / indices.len() as f64)
}

/// Fits a model against labels or regression targets with Adam,
/// validation checkpointing, and optional early stopping. The model is
/// left at its best validation epoch.
pub fn train_supervised(
    model: &mut Model,
    inputs: &Tensor,
    task: &SupervisedTask,
    config: &SupervisedConfig,
) -> Result<TrainHistory, EvalError> {
    let n = inputs.shape()[0];
    check_supervised_config(n, config)?;
    if task_len(task) != n {
        return Err(EvalError::InvalidSetup(format!(
            "{} inputs but {} targets",
            n,
            task_len(task)
        )));
    }
    if let SupervisedTask::Classification {
        labels,
        num_classes,
    } = task
    {
        if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
            return Err(EvalError::InvalidSetup(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
    }

    let (train_idx, val_idx) = split_train_val(n, config.val_fraction, config.seed);
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut best_snapshot: Option<Vec<Vec<f64>>> = None;
    let mut epochs_since_improvement = 0;

    for epoch in 1..=config.epochs {
        let started = std::time::Instant::now();
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = inputs.gather_rows(batch)?;
            let mut tape = Tape::new();
            let x_id = tape.constant(&x);
            let (out, param_ids) = model.forward_taped(&mut tape, x_id, false)?;
            let loss_id = match task {
                SupervisedTask::Classification { labels, .. } => {
                    let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    tape.softmax_cross_entropy(out, &batch_labels)
                }
                SupervisedTask::Regression { targets } => {
                    let t = targets.gather_rows(batch)?;
                    let t_id = tape.constant(&t);
                    tape.sse(out, t_id)
                }
            };
            let loss_id = match loss_id {
                Ok(id) => id,
                Err(TensorError::NonFinite { .. }) => {
                    return Err(EvalError::Diverged { epoch });
                }
                Err(other) => return Err(other.into()),
            };
            let loss_value = tape.scalar(loss_id);
            if !loss_value.is_finite() || loss_value > DIVERGENCE_LOSS_CAP {
                return Err(EvalError::Diverged { epoch });
            }
            tape.backward(loss_id)?;
            model.absorb_gradients(&tape, &param_ids);
            optimizer_step(model.params_mut(), &mut adam, config.learning_rate)?;
            loss_sum += loss_value;
        }
        let train_loss = loss_sum / train_idx.len() as f64;

        let val_loss = split_loss(model, inputs, task, &val_idx, config.batch_size)?;
        if !val_loss.is_finite() || val_loss > DIVERGENCE_LOSS_CAP {
            return Err(EvalError::Diverged { epoch });
        }

        history.epochs.push(crate::procedures::EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        });

        let improved = history.best_val_loss.map_or(true, |best| val_loss < best);
        if improved {
            history.best_val_loss = Some(val_loss);
            history.best_epoch = Some(epoch);
            best_snapshot = Some(model.snapshot_params());
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

    if let Some(snapshot) = &best_snapshot {
        model.restore_params(snapshot);
    }
    Ok(history)
}

/// Probes trained on one embedding set, one slot per architecture.
#[derive(Debug)]
pub struct ProbeOutcome {
    pub probes: Vec<Option<Model>>,
    pub val_losses: Vec<Option<f64>>,
    pub best_arch_id: usize,
}

fn probe_task<'a>(
    set: &'a EmbeddingSet,
    normalized: &'a Option<Tensor>,
) -> Result<(usize, SupervisedTask<'a>), EvalError> {
    match &set.targets {
        Targets::Classes {
            labels,
            num_classes,
        } => Ok((
            *num_classes,
            SupervisedTask::Classification {
                labels,
                num_classes: *num_classes,
            },
        )),
        Targets::Positions(_) => {
            let targets = normalized
                .as_ref()
                .expect("normalized positions prepared for regression");
            Ok((
                targets.shape()[1],
                SupervisedTask::Regression { targets },
            ))
        }
    }
}

fn normalized_positions(set: &EmbeddingSet) -> Result<Option<Tensor>, EvalError> {
    match &set.targets {
        Targets::Positions(positions) => {
            if set.image_size < 2 {
                return Err(EvalError::InvalidSetup(
                    "position targets need an image size of at least 2".to_string(),
                ));
            }
            let scale = (set.image_size - 1) as f64;
            let data = positions
                .data()
                .iter()
                .map(|v| v / scale - 0.5)
                .collect();
            Ok(Some(Tensor::from_vec(positions.shape(), data)?))
        }
        Targets::Classes { .. } => Ok(None),
    }
}

fn select_best(val_losses: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (arch_id, loss) in val_losses.iter().enumerate() {
        if let Some(loss) = loss {
            if best.map_or(true, |(_, b)| *loss < b) {
                best = Some((arch_id, *loss));
            }
        }
    }
    best.map(|(arch_id, _)| arch_id)
}

/// Trains every probe architecture on the embeddings and records which
/// validates best. Probes that diverge are dropped from the running.
pub fn train_probes(
    train: &EmbeddingSet,
    config: &SupervisedConfig,
) -> Result<ProbeOutcome, EvalError> {
    if train.inputs.shape().len() != 2 {
        return Err(EvalError::InvalidSetup(format!(
            "probe inputs must be [n, z], got {:?}",
            train.inputs.shape()
        )));
    }
    let z = train.inputs.shape()[1];
    let normalized = normalized_positions(train)?;
    let (out_dim, task) = probe_task(train, &normalized)?;

    let mut probes: Vec<Option<Model>> = Vec::with_capacity(PROBE_ARCHS.len());
    let mut val_losses: Vec<Option<f64>> = Vec::with_capacity(PROBE_ARCHS.len());
    for arch_id in 0..PROBE_ARCHS.len() {
        let init_seed = config.seed.wrapping_add(((arch_id as u64) + 1) << 32);
        let mut probe = build_predictor_mlp(
            z,
            out_dim,
            arch_id,
            &mut ChaCha8Rng::seed_from_u64(init_seed),
        )?;
        match train_supervised(&mut probe, &train.inputs, &task, config) {
            Ok(history) => {
                val_losses.push(history.best_val_loss);
                probes.push(Some(probe));
            }
            Err(EvalError::Diverged { .. }) => {
                val_losses.push(None);
                probes.push(None);
            }
            Err(other) => return Err(other),
        }
    }

    let best_arch_id = select_best(&val_losses).ok_or_else(|| {
        EvalError::InvalidSetup("every probe architecture diverged".to_string())
    })?;
    Ok(ProbeOutcome {
        probes,
        val_losses,
        best_arch_id,
    })
}

/// Scores a fitted model on inputs and targets: accuracy for classes,
/// mean pixel distance for positions.
pub fn evaluate_metric(model: &Model, set: &EmbeddingSet) -> Result<(MetricKind, f64), EvalError> {
    let n = set.inputs.shape()[0];
    if n == 0 {
        return Err(EvalError::InvalidSetup(
            "cannot score an empty set".to_string(),
        ));
    }
    let mut preds: Vec<f64> = Vec::new();
    let mut width = 0;
    let mut start = 0;
    while start < n {
        let end = (start + EMBED_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let out = model.forward(&set.inputs.gather_rows(&idx)?)?;
        width = out.shape()[1];
        preds.extend_from_slice(out.data());
        start = end;
    }
    let preds = Tensor::from_vec(&[n, width], preds)?;

    match &set.targets {
        Targets::Classes { labels, .. } => {
            let picks = argmax_rows(&preds)?;
            let correct = picks
                .iter()
                .zip(labels)
                .filter(|(pick, label)| pick == label)
                .count();
            Ok((MetricKind::Accuracy, correct as f64 / n as f64))
        }
        Targets::Positions(positions) => {
            if width != 2 {
                return Err(EvalError::InvalidSetup(format!(
                    "position predictions must have 2 columns, got {width}"
                )));
            }
            let scale = (set.image_size - 1) as f64;
            let mut total = 0.0;
            for i in 0..n {
                let dr = (preds.data()[2 * i] + 0.5) * scale - positions.data()[2 * i];
                let dc = (preds.data()[2 * i + 1] + 0.5) * scale - positions.data()[2 * i + 1];
                total += (dr * dr + dc * dc).sqrt();
            }
            Ok((MetricKind::PixelDistance, total / n as f64))
        }
    }
}

/// Scores the winning probe on a held-out embedding set.
pub fn test_best_probe(
    outcome: &ProbeOutcome,
    test: &EmbeddingSet,
) -> Result<EvalResult, EvalError> {
    let probe = outcome.probes[outcome.best_arch_id]
        .as_ref()
        .expect("best probe exists by construction");
    let (metric_kind, value) = evaluate_metric(probe, test)?;
    Ok(EvalResult {
        metric_kind,
        value,
        best_arch_id: outcome.best_arch_id,
        per_arch_val_losses: outcome.val_losses.clone(),
    })
}

/// Probe sweep plus held-out scoring in one call.
pub fn evaluate_embeddings(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    config: &SupervisedConfig,
) -> Result<EvalResult, EvalError> {
    let outcome = train_probes(train, config)?;
    test_best_probe(&outcome, test)
}

/// The supervised reference model: the encoder trunk with a dense head
/// in place of the embedding, trained end to end on labels.
pub fn build_baseline_cnn(
    image_size: usize,
    channels: usize,
    z: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Model, EvalError> {
    if out_dim == 0 {
        return Err(EvalError::InvalidSetup(
            "the reference model needs at least one output".to_string(),
        ));
    }
    let trunk = build_image_encoder(image_size, channels, z, rng)?;
    let mut spec = trunk.spec().clone();
    spec.layers.push(LayerSpec::Relu);
    spec.layers.push(LayerSpec::Dense { units: out_dim });
    Ok(Model::from_spec(spec, rng)?)
}

/// Mean and uncorrected standard deviation of repeated runs.
pub fn aggregate_runs(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Renders an aggregate as `mean±std` with two decimals each.
pub fn format_aggregate(mean: f64, std: f64) -> String {
    format!("{mean:.2}\u{b1}{std:.2}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_sprite_dataset;
    use crate::nets::build_loss_network;
    use crate::procedures::{build_procedure, make_procedure};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn quick_config(epochs: usize) -> SupervisedConfig {
        SupervisedConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-2,
            val_fraction: 0.25,
            patience: None,
            seed: 9,
        }
    }

    /// Two Gaussian-ish clusters on a diagonal, labeled by which corner
    /// they hug.
    fn clustered_embeddings(n: usize, z: usize, seed: u64) -> EmbeddingSet {
        use rand::Rng;
        let mut r = rng(seed);
        let mut inputs = Vec::with_capacity(n * z);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { -1.0 } else { 1.0 };
            for _ in 0..z {
                inputs.push(center + r.gen_range(-0.3..0.3));
            }
            labels.push(class);
        }
        EmbeddingSet {
            inputs: Tensor::from_vec(&[n, z], inputs).unwrap(),
            targets: Targets::Classes {
                labels,
                num_classes: 2,
            },
            image_size: 12,
        }
    }

    /// Embeddings that linearly encode a position target.
    fn positional_embeddings(n: usize, seed: u64) -> EmbeddingSet {
        use rand::Rng;
        let mut r = rng(seed);
        let size = 16usize;
        let mut inputs = Vec::with_capacity(n * 3);
        let mut positions = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let row = r.gen_range(2.0..14.0);
            let col = r.gen_range(2.0..14.0);
            inputs.push(row / 15.0);
            inputs.push(col / 15.0);
            inputs.push(r.gen_range(-0.05..0.05));
            positions.push(row);
            positions.push(col);
        }
        EmbeddingSet {
            inputs: Tensor::from_vec(&[n, 3], inputs).unwrap(),
            targets: Targets::Positions(Tensor::from_vec(&[n, 2], positions).unwrap()),
            image_size: size,
        }
    }

    #[test]
    fn aggregate_matches_hand_computation() {
        let (mean, std) = aggregate_runs(&[1.0, 2.0, 3.0]);
        assert!((mean - 2.0).abs() < 1e-15);
        assert!((std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(format_aggregate(mean, std), "2.00\u{b1}0.82");
        let (single_mean, single_std) = aggregate_runs(&[5.0]);
        assert_eq!(single_mean, 5.0);
        assert_eq!(single_std, 0.0);
    }

    #[test]
    fn linear_probe_separates_clusters() {
        let train = clustered_embeddings(64, 3, 1);
        let test = clustered_embeddings(32, 3, 2);
        let result = evaluate_embeddings(&train, &test, &quick_config(40)).unwrap();
        assert_eq!(result.metric_kind, MetricKind::Accuracy);
        assert!(result.metric_kind.higher_is_better());
        assert!(
            result.value > 0.9,
            "separable clusters should probe above 0.9, got {}",
            result.value
        );
        assert_eq!(result.per_arch_val_losses.len(), PROBE_ARCHS.len());
        assert!(result.per_arch_val_losses.iter().all(Option::is_some));
    }

    #[test]
    fn regression_probe_recovers_positions() {
        let train = positional_embeddings(96, 3);
        let test = positional_embeddings(48, 4);
        let result = evaluate_embeddings(&train, &test, &quick_config(60)).unwrap();
        assert_eq!(result.metric_kind, MetricKind::PixelDistance);
        assert!(!result.metric_kind.higher_is_better());
        assert!(
            result.value < 1.5,
            "positions are linear in the inputs, expected small error, got {}",
            result.value
        );
    }

    #[test]
    fn best_arch_ties_go_to_the_smaller_probe() {
        assert_eq!(
            select_best(&[None, Some(1.0), Some(0.5), Some(0.5), None]),
            Some(2)
        );
        assert_eq!(select_best(&[None, None]), None);
        assert_eq!(select_best(&[Some(2.0)]), Some(0));
    }

    #[test]
    fn diverged_probes_are_excluded() {
        let train = positional_embeddings(32, 5);
        let mut config = quick_config(3);
        config.learning_rate = 1e40;
        match train_probes(&train, &config) {
            Err(EvalError::InvalidSetup(msg)) => {
                assert!(msg.contains("diverged"), "{msg}");
            }
            other => panic!("expected every probe to diverge, got {other:?}"),
        }
    }

    #[test]
    fn divergence_is_reported_for_regression() {
        let train = positional_embeddings(32, 6);
        let normalized = normalized_positions(&train).unwrap();
        let (out_dim, task) = probe_task(&train, &normalized).unwrap();
        let mut model = build_predictor_mlp(3, out_dim, 1, &mut rng(3)).unwrap();
        let mut config = quick_config(5);
        config.learning_rate = 1e40;
        assert!(matches!(
            train_supervised(&mut model, &train.inputs, &task, &config),
            Err(EvalError::Diverged { .. })
        ));
    }

    #[test]
    fn metric_scores_known_predictions() {
        let mut probe = build_predictor_mlp(2, 2, 0, &mut rng(1)).unwrap();
        let weight = probe.params_mut()[0].data_mut();
        weight.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);

        let inputs = Tensor::from_vec(&[4, 2], vec![
            0.9, 0.1,
            0.2, 0.8,
            0.7, 0.3,
            0.1, 0.9,
        ])
        .unwrap();
        let set = EmbeddingSet {
            inputs: inputs.clone(),
            targets: Targets::Classes {
                labels: vec![0, 1, 0, 1],
                num_classes: 2,
            },
            image_size: 12,
        };
        let (kind, value) = evaluate_metric(&probe, &set).unwrap();
        assert_eq!(kind, MetricKind::Accuracy);
        assert_eq!(value, 1.0);

        let flipped = EmbeddingSet {
            targets: Targets::Classes {
                labels: vec![1, 1, 0, 1],
                num_classes: 2,
            },
            ..set
        };
        let (_, value) = evaluate_metric(&probe, &flipped).unwrap();
        assert_eq!(value, 0.75);

        // The identity probe emits centered predictions: pixel = (pred + 0.5) * 11.
        let positions = EmbeddingSet {
            inputs: Tensor::from_vec(&[4, 2], vec![
                0.4, -0.4,
                -0.3, 0.3,
                0.2, -0.2,
                -0.4, 0.4,
            ])
            .unwrap(),
            targets: Targets::Positions(
                Tensor::from_vec(&[4, 2], vec![
                    9.9, 1.1,
                    2.2, 8.8,
                    7.7, 3.3,
                    1.1, 13.9,
                ])
                .unwrap(),
            ),
            image_size: 12,
        };
        let (kind, value) = evaluate_metric(&probe, &positions).unwrap();
        assert_eq!(kind, MetricKind::PixelDistance);
        assert!((value - 1.0).abs() < 1e-12, "three exact rows and one off by 4 pixels: {value}");
    }

    #[test]
    fn embeddings_route_through_the_right_inputs() {
        let data = gen_sprite_dataset(12, 12, 8).unwrap();
        let lossnet = build_loss_network(12, 3, 4, &mut rng(2)).unwrap();

        let image_spec = make_procedure("I-I-PW").unwrap();
        let image_proc = build_procedure(image_spec, 12, 3, 6, None, &mut rng(3)).unwrap();
        let set = embed_dataset(&image_proc.encoder, EncoderInput::Image, None, &data).unwrap();
        assert_eq!(set.inputs.shape(), &[12, 6]);
        assert_eq!(set.image_size, 12);
        let direct = image_proc.encoder.forward(&data.images).unwrap();
        assert_eq!(set.inputs.data(), direct.data());

        let feature_spec = make_procedure("F-F-FP").unwrap();
        let feature_proc =
            build_procedure(feature_spec, 12, 3, 6, Some(&lossnet), &mut rng(4)).unwrap();
        let set = embed_dataset(
            &feature_proc.encoder,
            EncoderInput::Feature,
            Some(&lossnet),
            &data,
        )
        .unwrap();
        let features = extract_features(&lossnet, &data.images).unwrap();
        let direct = feature_proc.encoder.forward(&features).unwrap();
        assert_eq!(set.inputs.data(), direct.data());

        assert!(matches!(
            embed_dataset(&feature_proc.encoder, EncoderInput::Feature, None, &data),
            Err(EvalError::InvalidSetup(_))
        ));
    }

    #[test]
    fn baseline_cnn_has_the_trunk_plus_head() {
        let (mut a, mut b) = (rng(5), rng(5));
        let trunk = build_image_encoder(12, 3, 8, &mut a).unwrap();
        let baseline = build_baseline_cnn(12, 3, 8, 4, &mut b).unwrap();
        assert_eq!(baseline.input_shape(), &[3, 12, 12]);
        assert_eq!(baseline.output_shape(), &[4]);
        assert_eq!(
            baseline.spec().layers.len(),
            trunk.spec().layers.len() + 2
        );

        let data = gen_sprite_dataset(16, 12, 9).unwrap();
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let mut model = build_baseline_cnn(12, 3, 8, 2, &mut rng(6)).unwrap();
        let task = SupervisedTask::Classification {
            labels: &labels,
            num_classes: 2,
        };
        let history = train_supervised(&mut model, &data.images, &task, &quick_config(2)).unwrap();
        assert_eq!(history.epochs.len(), 2);
        assert!(history.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn supervised_trainer_checks_its_inputs() {
        let set = clustered_embeddings(8, 2, 7);
        let mut probe = build_predictor_mlp(2, 2, 0, &mut rng(8)).unwrap();
        let short_labels = vec![0usize; 4];
        let task = SupervisedTask::Classification {
            labels: &short_labels,
            num_classes: 2,
        };
        assert!(matches!(
            train_supervised(&mut probe, &set.inputs, &task, &quick_config(1)),
            Err(EvalError::InvalidSetup(_))
        ));

        let bad_labels = vec![0usize, 5, 0, 0, 0, 0, 0, 0];
        let task = SupervisedTask::Classification {
            labels: &bad_labels,
            num_classes: 2,
        };
        assert!(matches!(
            train_supervised(&mut probe, &set.inputs, &task, &quick_config(1)),
            Err(EvalError::InvalidSetup(_))
        ));
    }
}
