//! Cost accounting for the six procedures: analytic FLOP counts from
//! the layer specs, measured wall time per epoch, normalized
//! convergence curves, and the CSV/SVG artifacts they land in.
//!
//! Counting convention: a convolution or deconvolution costs
//! 2·K·C·kh·kw per output element of that layer, a dense layer costs
//! 2·I·O per sample, and elementwise work is ignored. The backward
//! pass is charged at twice the taped forward cost. Feature targets
//! served from the one-time cache are reported as setup cost, not as
//! recurring per-epoch cost; the image-to-image perceptual procedure
//! is the one that keeps paying an untaped loss-network forward every
//! epoch.

use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::Dataset;
use crate::losses::{ElementLoss, LossKind};
use crate::nets::{
    build_feature_codec, build_image_decoder, build_image_encoder, build_loss_network,
    shape_after, CodecDirection, LayerSpec, Model, ModelSpec, NetError,
};
use crate::procedures::{
    build_procedure, pretrain, DecoderOutput, EncoderInput, ProcedureError, ProcedureSpec,
    TrainConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchmarkError {
    #[error("invalid benchmark setup: {0}")]
    InvalidSetup(String),
    #[error("convergence curves need a positive first loss, got {0}")]
    BadFirstLoss(f64),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Procedure(#[from] ProcedureError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Analytic per-sample FLOP counts for one procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    /// Taped forward cost per sample per epoch.
    pub forward_flops: u64,
    /// Backward cost, twice the taped forward by the standard
    /// approximation.
    pub backward_flops: u64,
    /// Recurring untaped forward cost per sample per epoch (target
    /// features that are re-extracted instead of cached).
    pub untaped_forward_flops: u64,
    /// One-time cost per sample to fill the feature cache.
    pub setup_flops: u64,
}

impl CostReport {
    /// Recurring cost per sample per epoch; the one-time setup cost is
    /// deliberately excluded.
    pub fn total_flops_per_sample(&self) -> u64 {
        self.forward_flops + self.backward_flops + self.untaped_forward_flops
    }
}

/// The shapes everything is built from when estimating costs.
#[derive(Debug, Clone, Copy)]
pub struct NetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub z: usize,
    pub num_classes: usize,
}

fn layer_flops(layer: &LayerSpec, input: &[usize]) -> Result<u64, NetError> {
    Ok(match layer {
        LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        }
        | LayerSpec::Deconv {
            out_channels,
            kernel,
            ..
        } => {
            let out = shape_after(layer, input)?;
            2 * (*out_channels as u64)
                * (input[0] as u64)
                * (*kernel as u64)
                * (*kernel as u64)
                * (out[1] as u64)
                * (out[2] as u64)
        }
        LayerSpec::Dense { units } => {
            let fan_in: usize = input.iter().product();
            2 * (fan_in as u64) * (*units as u64)
        }
        LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Flatten | LayerSpec::Reshape { .. } => 0,
    })
}

/// Forward cost of one sample through every layer of a model spec.
pub fn spec_forward_flops(spec: &ModelSpec) -> Result<u64, NetError> {
    let mut shape = spec.input_shape.clone();
    let mut total = 0u64;
    for layer in &spec.layers {
        total += layer_flops(layer, &shape)?;
        shape = shape_after(layer, &shape)?;
    }
    Ok(total)
}

/// Forward cost of one sample up to and including the tap layer.
pub fn spec_flops_to_tap(spec: &ModelSpec) -> Result<u64, NetError> {
    let tap = spec.tap.ok_or(NetError::NoTap)?;
    let mut shape = spec.input_shape.clone();
    let mut total = 0u64;
    for layer in &spec.layers[..=tap] {
        total += layer_flops(layer, &shape)?;
        shape = shape_after(layer, &shape)?;
    }
    Ok(total)
}

/// Analytic cost of training one procedure, per sample.
pub fn estimate_flops(
    spec: &ProcedureSpec,
    cfg: &NetConfig,
) -> Result<CostReport, BenchmarkError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lossnet = build_loss_network(cfg.image_size, cfg.channels, cfg.num_classes, &mut rng)?;
    let feature_dim = lossnet.feature_dim()?;
    let lossnet_tap = spec_flops_to_tap(lossnet.spec())?;

    let encoder = match spec.encoder_input {
        EncoderInput::Image => {
            build_image_encoder(cfg.image_size, cfg.channels, cfg.z, &mut rng)?
        }
        EncoderInput::Feature => {
            build_feature_codec(feature_dim, cfg.z, CodecDirection::Encode, &mut rng)?
        }
    };
    let decoder = match spec.decoder_output {
        DecoderOutput::Image => {
            build_image_decoder(cfg.image_size, cfg.channels, cfg.z, &mut rng)?
        }
        DecoderOutput::Feature => {
            build_feature_codec(feature_dim, cfg.z, CodecDirection::Decode, &mut rng)?
        }
    };

    let mut forward = spec_forward_flops(encoder.spec())? + spec_forward_flops(decoder.spec())?;
    if spec.loss == LossKind::PerceptualSimilarity {
        forward += lossnet_tap;
    }
    let untaped = if spec.recomputes_features_each_epoch() {
        lossnet_tap
    } else {
        0
    };
    let setup = if spec.caches_features() { lossnet_tap } else { 0 };

    Ok(CostReport {
        forward_flops: forward,
        backward_flops: 2 * forward,
        untaped_forward_flops: untaped,
        setup_flops: setup,
    })
}

/// Knobs for a timing run; everything else comes from the dataset.
#[derive(Debug, Clone)]
pub struct TimingConfig {
    pub z: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub element_loss: ElementLoss,
    pub seed: u64,
}

static TIMING_LOCK: Mutex<()> = Mutex::new(());

/// Measures wall time per training epoch for one procedure. One extra
/// warm-up epoch runs first and is discarded; timing runs are
/// serialized process-wide so concurrent work cannot pollute them.
pub fn time_epochs(
    spec: &'static ProcedureSpec,
    data: &Dataset,
    lossnet: Option<&Model>,
    cfg: &TimingConfig,
    n_epochs: usize,
) -> Result<Vec<f64>, BenchmarkError> {
    if n_epochs < 3 {
        return Err(BenchmarkError::InvalidSetup(format!(
            "timing needs at least 3 measured epochs, got {n_epochs}"
        )));
    }
    let _guard = TIMING_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut procedure = build_procedure(
        spec,
        data.image_size(),
        data.channels(),
        cfg.z,
        lossnet,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )?;
    let train_cfg = TrainConfig {
        epochs: n_epochs + 1,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        val_fraction: 0.2,
        patience: None,
        seed: cfg.seed,
        element_loss: cfg.element_loss,
    };
    let history = pretrain(&mut procedure, lossnet, data, &train_cfg)?;
    Ok(history
        .epochs
        .iter()
        .skip(1)
        .map(|e| e.wall_seconds)
        .collect())
}

/// A validation-loss trajectory and its copy rescaled to start at 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceCurve {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Divides a loss trajectory through by its first value so curves of
/// different losses share a starting point of exactly 1.
pub fn normalize_convergence(raw: &[f64]) -> Result<ConvergenceCurve, BenchmarkError> {
    let first = *raw.first().ok_or_else(|| {
        BenchmarkError::InvalidSetup("cannot normalize an empty curve".to_string())
    })?;
    if !(first > 0.0) {
        return Err(BenchmarkError::BadFirstLoss(first));
    }
    Ok(ConvergenceCurve {
        raw: raw.to_vec(),
        normalized: raw.iter().map(|v| v / first).collect(),
    })
}

/// One experiment cell: how a procedure at one width and seed scored,
/// and what it cost.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    pub procedure: String,
    pub z: usize,
    pub seed: u64,
    pub metric_kind: String,
    pub metric: f64,
    /// Left empty in deterministic result tables; timing lives in the
    /// run manifest and the benchmark table instead.
    pub seconds_per_epoch: Option<f64>,
    pub flops_per_sample: u64,
    pub best_epoch: usize,
}

pub const RESULTS_CSV_HEADER: &str =
    "procedure,z,seed,metric_kind,metric,seconds_per_epoch,flops_per_sample,best_epoch";

/// Renders records under the fixed header. Floats use their shortest
/// round-trip form, so parsing the output recovers the records exactly.
pub fn render_records_csv(records: &[RunRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(RESULTS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let seconds = r
            .seconds_per_epoch
            .map(|s| s.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.procedure,
            r.z,
            r.seed,
            r.metric_kind,
            r.metric,
            seconds,
            r.flops_per_sample,
            r.best_epoch
        ));
    }
    out
}

pub fn emit_csv(records: &[RunRecord], path: &Path) -> Result<(), BenchmarkError> {
    if records.is_empty() {
        return Err(BenchmarkError::InvalidSetup(
            "no records to write".to_string(),
        ));
    }
    std::fs::write(path, render_records_csv(records))?;
    Ok(())
}

/// Parses text produced by `render_records_csv`.
pub fn parse_records_csv(text: &str) -> Result<Vec<RunRecord>, BenchmarkError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| BenchmarkError::Csv("empty input".to_string()))?;
    if header != RESULTS_CSV_HEADER {
        return Err(BenchmarkError::Csv(format!(
            "unexpected header {header:?}"
        )));
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(BenchmarkError::Csv(format!(
                "row {}: expected 8 fields, got {}",
                idx + 1,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| BenchmarkError::Csv(format!("row {}: bad {what}", idx + 1));
        records.push(RunRecord {
            procedure: fields[0].to_string(),
            z: fields[1].parse().map_err(|_| parse_err("z"))?,
            seed: fields[2].parse().map_err(|_| parse_err("seed"))?,
            metric_kind: fields[3].to_string(),
            metric: fields[4].parse().map_err(|_| parse_err("metric"))?,
            seconds_per_epoch: if fields[5].is_empty() {
                None
            } else {
                Some(fields[5].parse().map_err(|_| parse_err("seconds"))?)
            },
            flops_per_sample: fields[6].parse().map_err(|_| parse_err("flops"))?,
            best_epoch: fields[7].parse().map_err(|_| parse_err("best_epoch"))?,
        });
    }
    Ok(records)
}

const SVG_PALETTE: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 55.0;

/// Renders normalized convergence curves as a self-contained SVG line
/// chart. Identical inputs produce byte-identical output.
pub fn render_convergence_svg(curves: &[(String, ConvergenceCurve)]) -> String {
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let max_len = curves
        .iter()
        .map(|(_, c)| c.normalized.len())
        .max()
        .unwrap_or(0);
    let x_span = (max_len.saturating_sub(1)).max(1) as f64;
    let y_max = curves
        .iter()
        .flat_map(|(_, c)| c.normalized.iter())
        .fold(1.0f64, |acc, &v| if v.is_finite() { acc.max(v) } else { acc })
        * 1.05;

    let x_px = |epoch: usize| MARGIN_L + plot_w * (epoch as f64) / x_span;
    let y_px = |v: f64| MARGIN_T + plot_h * (1.0 - v / y_max);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W:.0} {SVG_H:.0}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{SVG_W:.0}\" height=\"{SVG_H:.0}\" fill=\"#ffffff\"/>\n"
    ));

    for i in 0..=4 {
        let v = y_max * (i as f64) / 4.0;
        let y = y_px(v);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>\n",
            MARGIN_L,
            MARGIN_L + plot_w,
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" fill=\"#333333\">{v:.2}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0,
        ));
    }
    let x_step = (max_len.saturating_sub(1) / 8).max(1);
    let mut epoch = 0;
    while epoch < max_len.max(1) {
        let x = x_px(epoch.min(max_len.saturating_sub(1)));
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\"/>\n",
            MARGIN_T,
            MARGIN_T + plot_h,
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" fill=\"#333333\">{}</text>\n",
            MARGIN_T + plot_h + 18.0,
            epoch + 1,
        ));
        epoch += x_step;
    }

    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#333333\"/>\n",
        MARGIN_L,
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h,
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#333333\"/>\n",
        MARGIN_L,
        MARGIN_T,
        MARGIN_L,
        MARGIN_T + plot_h,
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" fill=\"#333333\">epoch</text>\n",
        MARGIN_L + plot_w / 2.0,
        SVG_H - 12.0,
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" fill=\"#333333\" \
         transform=\"rotate(-90 18 {:.2})\">normalized validation loss</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
    ));

    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = SVG_PALETTE[i % SVG_PALETTE.len()];
        let points: Vec<String> = curve
            .normalized
            .iter()
            .enumerate()
            .map(|(e, &v)| format!("{:.2},{:.2}", x_px(e), y_px(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" "),
        ));
        let ly = MARGIN_T + 16.0 + (i as f64) * 20.0;
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
             stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            SVG_W - MARGIN_R + 10.0,
            SVG_W - MARGIN_R + 34.0,
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#333333\">{name}</text>\n",
            SVG_W - MARGIN_R + 40.0,
            ly + 4.0,
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

pub fn emit_svg(curves: &[(String, ConvergenceCurve)], path: &Path) -> Result<(), BenchmarkError> {
    if curves.is_empty() {
        return Err(BenchmarkError::InvalidSetup(
            "no curves to render".to_string(),
        ));
    }
    std::fs::write(path, render_convergence_svg(curves))?;
    Ok(())
}
