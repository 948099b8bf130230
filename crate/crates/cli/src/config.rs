//! Experiment configuration: a JSON file with desk-scale defaults,
//! command-line overrides on top, and `FPBENCH_SEED` trumping both.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fpbench_core::losses::ElementLoss;
use fpbench_core::procedures::{make_procedure, PROCEDURES};

/// Where the three dataset splits come from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated sprite images with position targets.
    Sprites,
    /// Generated glyph images with class targets.
    Shapes { num_classes: usize },
    /// Pre-exported dataset files.
    Raw {
        pretrain: PathBuf,
        probe_train: PathBuf,
        probe_test: PathBuf,
    },
}

/// How the frozen loss network gets trained and judged.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossnetConfig {
    pub epochs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub num_classes: usize,
    /// Held-out accuracy below this draws a warning in the report.
    pub accuracy_floor: f64,
}

impl Default for LossnetConfig {
    fn default() -> Self {
        LossnetConfig {
            epochs: 40,
            n_train: 1500,
            n_test: 300,
            num_classes: 10,
            accuracy_floor: 0.9,
        }
    }
}

/// Everything the commands need, with desk-scale defaults that keep
/// the full default grid in the tens of minutes on one core.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub image_size: usize,
    pub n_pretrain: usize,
    pub n_probe_train: usize,
    pub n_probe_test: usize,
    pub z_values: Vec<usize>,
    pub procedures: Vec<String>,
    pub repeats: usize,
    pub autoencoder_epochs: usize,
    pub probe_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probes are tiny networks on small embedding tables; they take a
    /// faster learning rate than the autoencoders they evaluate.
    pub probe_learning_rate: f64,
    pub val_fraction: f64,
    /// Early-stopping patience in epochs; `None` disables it.
    pub patience: Option<usize>,
    /// Epoch ceiling for convergence runs, which otherwise stop on
    /// patience alone.
    pub convergence_max_epochs: usize,
    pub element_loss: ElementLoss,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub jobs: usize,
    /// Loss-network weight file; defaults to `lossnet.fpbw` inside
    /// `output_dir`.
    pub lossnet_weights: Option<PathBuf>,
    pub lossnet: LossnetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Sprites,
            image_size: 16,
            n_pretrain: 512,
            n_probe_train: 384,
            n_probe_test: 384,
            z_values: vec![64, 128, 256],
            procedures: PROCEDURES.iter().map(|p| p.name.to_string()).collect(),
            repeats: 4,
            autoencoder_epochs: 20,
            probe_epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            probe_learning_rate: 1e-2,
            val_fraction: 0.2,
            patience: Some(15),
            convergence_max_epochs: 300,
            element_loss: ElementLoss::SquaredError,
            seed: 7,
            output_dir: PathBuf::from("runs"),
            jobs: 1,
            lossnet_weights: None,
            lossnet: LossnetConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.z_values.is_empty() {
            bail!("z_values must not be empty");
        }
        if self.z_values.iter().any(|&z| z == 0) {
            bail!("every z value must be at least 1");
        }
        if self.repeats == 0 {
            bail!("repeats must be at least 1");
        }
        if self.procedures.is_empty() {
            bail!("procedures must not be empty");
        }
        for name in &self.procedures {
            make_procedure(name).with_context(|| format!("procedure {name:?} in config"))?;
        }
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.probe_learning_rate > 0.0) {
            bail!("learning rates must be positive");
        }
        if let DatasetSource::Shapes { num_classes } = self.dataset {
            if num_classes < 2 {
                bail!("shapes dataset needs at least 2 classes");
            }
        }
        Ok(())
    }

    pub fn lossnet_weights_path(&self) -> PathBuf {
        self.lossnet_weights
            .clone()
            .unwrap_or_else(|| self.output_dir.join("lossnet.fpbw"))
    }
}

/// Flags shared by every orchestration command. Anything left unset
/// falls through to the config file, then to the defaults.
#[derive(Debug, Clone, clap::Args)]
pub struct ConfigOverrides {
    /// JSON config file; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Dataset generator: "sprites" or "shapes".
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub n_pretrain: Option<usize>,
    #[arg(long)]
    pub n_probe_train: Option<usize>,
    #[arg(long)]
    pub n_probe_test: Option<usize>,
    /// Comma-separated embedding widths.
    #[arg(long, value_delimiter = ',')]
    pub z_values: Option<Vec<usize>>,
    /// Comma-separated procedure names.
    #[arg(long, value_delimiter = ',')]
    pub procedures: Option<Vec<String>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub autoencoder_epochs: Option<usize>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub probe_learning_rate: Option<f64>,
    /// Early-stopping patience in epochs; 0 disables it.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub lossnet_weights: Option<PathBuf>,
}

/// Builds the effective config: file (or defaults), then flags, then
/// the `FPBENCH_SEED` environment variable.
pub fn resolve(overrides: &ConfigOverrides) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &overrides.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dataset) = &overrides.dataset {
        config.dataset = match dataset.as_str() {
            "sprites" => DatasetSource::Sprites,
            "shapes" => DatasetSource::Shapes {
                num_classes: overrides
                    .num_classes
                    .unwrap_or(LossnetConfig::default().num_classes),
            },
            other => bail!("unknown dataset {other:?}: expected \"sprites\" or \"shapes\""),
        };
    } else if let Some(num_classes) = overrides.num_classes {
        if let DatasetSource::Shapes { num_classes: nc } = &mut config.dataset {
            *nc = num_classes;
        }
    }
    if let Some(v) = overrides.seed {
        config.seed = v;
    }
    if let Some(v) = &overrides.output_dir {
        config.output_dir = v.clone();
    }
    if let Some(v) = overrides.image_size {
        config.image_size = v;
    }
    if let Some(v) = overrides.n_pretrain {
        config.n_pretrain = v;
    }
    if let Some(v) = overrides.n_probe_train {
        config.n_probe_train = v;
    }
    if let Some(v) = overrides.n_probe_test {
        config.n_probe_test = v;
    }
    if let Some(v) = &overrides.z_values {
        config.z_values = v.clone();
    }
    if let Some(v) = &overrides.procedures {
        config.procedures = v.clone();
    }
    if let Some(v) = overrides.repeats {
        config.repeats = v;
    }
    if let Some(v) = overrides.autoencoder_epochs {
        config.autoencoder_epochs = v;
    }
    if let Some(v) = overrides.probe_epochs {
        config.probe_epochs = v;
    }
    if let Some(v) = overrides.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = overrides.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = overrides.probe_learning_rate {
        config.probe_learning_rate = v;
    }
    if let Some(v) = overrides.patience {
        config.patience = if v == 0 { None } else { Some(v) };
    }
    if let Some(v) = overrides.jobs {
        config.jobs = v;
    }
    if let Some(v) = &overrides.lossnet_weights {
        config.lossnet_weights = Some(v.clone());
    }
    if let Ok(raw) = std::env::var("FPBENCH_SEED") {
        config.seed = raw
            .parse()
            .with_context(|| format!("FPBENCH_SEED {raw:?} is not an unsigned integer"))?;
    }
    config.validate()?;
    Ok(config)
}
