//! Trains the loss network on labeled glyph images, reports held-out
//! accuracy, and freezes the weights to disk.

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpbench_core::datasets::Targets;
use fpbench_core::evaluation::{
    evaluate_metric, train_supervised, EmbeddingSet, SupervisedConfig, SupervisedTask,
};
use fpbench_core::nets::build_loss_network;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

use super::{lossnet_datasets, save_weights_atomic, write_atomic};

#[derive(serde::Serialize)]
struct LossnetReport {
    held_out_accuracy: f64,
    accuracy_floor: f64,
    below_floor: bool,
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
}

pub fn run(config: &ExperimentConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&config.output_dir).context("creating output directory")?;
    let (train, test) = lossnet_datasets(config)?;
    let Targets::Classes {
        labels,
        num_classes,
    } = &train.targets
    else {
        bail!("loss-network training data carries no class labels");
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = build_loss_network(config.image_size, train.channels(), *num_classes, &mut rng)?;
    let supervised = SupervisedConfig {
        epochs: config.lossnet.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        val_fraction: config.val_fraction,
        patience: config.patience,
        seed: config.seed,
    };
    println!(
        "training loss network on {} glyph images ({} classes, {} epochs max)",
        train.len(),
        num_classes,
        config.lossnet.epochs
    );
    let history = train_supervised(
        &mut net,
        &train.images,
        &SupervisedTask::Classification {
            labels,
            num_classes: *num_classes,
        },
        &supervised,
    )?;

    let held_out = EmbeddingSet {
        inputs: test.images.clone(),
        targets: test.targets.clone(),
        image_size: config.image_size,
    };
    let (_, accuracy) = evaluate_metric(&net, &held_out)?;

    let weights_path = config.lossnet_weights_path();
    save_weights_atomic(&net, &weights_path)?;

    let report = LossnetReport {
        held_out_accuracy: accuracy,
        accuracy_floor: config.lossnet.accuracy_floor,
        below_floor: accuracy < config.lossnet.accuracy_floor,
        best_epoch: history.best_epoch.unwrap_or(0),
        epochs_run: history.epochs.len(),
        stopped_early: history.stopped_early,
    };
    let report_path = config.output_dir.join("lossnet-report.json");
    let mut report_text = serde_json::to_string_pretty(&report)?;
    report_text.push('\n');
    write_atomic(&report_path, report_text.as_bytes())?;

    let mut manifest = RunManifest::new("train-lossnet", config);
    manifest.add_artifact("lossnet-report.json");
    if let Ok(rel) = weights_path.strip_prefix(&config.output_dir) {
        manifest.add_artifact(rel.to_string_lossy().into_owned());
    } else {
        manifest.add_artifact(weights_path.to_string_lossy().into_owned());
    }
    manifest.notes.push(format!(
        "held-out accuracy {accuracy:.4} over {} images",
        test.len()
    ));
    if report.below_floor {
        manifest.notes.push(format!(
            "warning: held-out accuracy {accuracy:.4} is below the {:.2} floor; \
             perceptual and feature targets will be weak",
            config.lossnet.accuracy_floor
        ));
    }
    manifest.write(&config.output_dir.join("lossnet-manifest.json"))?;

    println!(
        "held-out accuracy {:.4} (floor {:.2}){} -> {}",
        accuracy,
        config.lossnet.accuracy_floor,
        if report.below_floor { " BELOW FLOOR" } else { "" },
        weights_path.display()
    );
    Ok(())
}
