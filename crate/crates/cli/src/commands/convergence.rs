//! Trains every configured procedure at one width under early
//! stopping and charts the normalized validation-loss curves.

use std::time::Instant;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpbench_core::benchmark::{normalize_convergence, render_convergence_svg, ConvergenceCurve};
use fpbench_core::procedures::{build_procedure, make_procedure, pretrain, TrainConfig};

use crate::config::ExperimentConfig;
use crate::manifest::{CellRecord, CellStatus, RunManifest};

use super::{cell_seed, load_datasets, load_lossnet_if_needed, write_atomic};

const DEFAULT_PATIENCE: usize = 15;

pub fn run(config: &ExperimentConfig, z_flag: Option<usize>) -> anyhow::Result<u8> {
    let z = z_flag.unwrap_or_else(|| config.z_values[0]);
    std::fs::create_dir_all(&config.output_dir).context("creating output directory")?;
    let (pre, _, _) = load_datasets(config)?;
    let lossnet = load_lossnet_if_needed(config)?;
    let patience = config.patience.unwrap_or(DEFAULT_PATIENCE);

    let mut manifest = RunManifest::new("convergence", config);
    let mut curves: Vec<(String, ConvergenceCurve)> = Vec::new();
    let mut csv = String::from("procedure,epoch,raw,normalized\n");

    for (index, name) in config.procedures.iter().enumerate() {
        let seed = cell_seed(config.seed, index);
        let started = Instant::now();
        let outcome = (|| -> anyhow::Result<_> {
            let spec = make_procedure(name)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut procedure = build_procedure(
                spec,
                pre.image_size(),
                pre.channels(),
                z,
                lossnet.as_ref(),
                &mut rng,
            )?;
            let history = pretrain(
                &mut procedure,
                lossnet.as_ref(),
                &pre,
                &TrainConfig {
                    epochs: config.convergence_max_epochs,
                    batch_size: config.batch_size,
                    learning_rate: config.learning_rate,
                    val_fraction: config.val_fraction,
                    patience: Some(patience),
                    seed,
                    element_loss: config.element_loss,
                },
            )?;
            Ok(history)
        })();

        match outcome {
            Ok(history) => {
                let raw: Vec<f64> = history.epochs.iter().map(|e| e.val_loss).collect();
                let curve = normalize_convergence(&raw)?;
                for (record, (&r, &norm)) in history
                    .epochs
                    .iter()
                    .zip(raw.iter().zip(curve.normalized.iter()))
                {
                    csv.push_str(&format!("{name},{},{r},{norm}\n", record.epoch));
                }
                println!(
                    "{name}: {} epochs, best at {}{}",
                    history.epochs.len(),
                    history.best_epoch.unwrap_or(0),
                    if history.stopped_early {
                        ""
                    } else {
                        " (epoch ceiling reached before patience)"
                    }
                );
                if !history.stopped_early {
                    manifest.notes.push(format!(
                        "{name}: hit the {}-epoch ceiling before patience-{patience} stopping",
                        config.convergence_max_epochs
                    ));
                }
                manifest.cells.push(CellRecord {
                    procedure: name.clone(),
                    z,
                    repeat: 0,
                    seed,
                    status: CellStatus::Ok,
                    wall_seconds: started.elapsed().as_secs_f64(),
                    metric_kind: None,
                    metric: None,
                    best_epoch: history.best_epoch,
                    seconds_per_epoch: None,
                });
                curves.push((name.clone(), curve));
            }
            Err(error) => {
                let message = format!("{error:#}");
                println!("{name}: FAILED: {message}");
                manifest.cells.push(CellRecord {
                    procedure: name.clone(),
                    z,
                    repeat: 0,
                    seed,
                    status: CellStatus::Failed { error: message },
                    wall_seconds: started.elapsed().as_secs_f64(),
                    metric_kind: None,
                    metric: None,
                    best_epoch: None,
                    seconds_per_epoch: None,
                });
            }
        }
    }

    if !curves.is_empty() {
        write_atomic(&config.output_dir.join("convergence.csv"), csv.as_bytes())?;
        manifest.add_artifact("convergence.csv");
        write_atomic(
            &config.output_dir.join("convergence.svg"),
            render_convergence_svg(&curves).as_bytes(),
        )?;
        manifest.add_artifact("convergence.svg");
    }
    manifest
        .notes
        .push(format!("patience {patience}, z {z}"));
    let failed = manifest.failed_cells();
    manifest.write(&config.output_dir.join("convergence-manifest.json"))?;

    println!(
        "{} curves -> {}",
        curves.len(),
        config.output_dir.join("convergence.svg").display()
    );
    Ok(if failed > 0 { 2 } else { 0 })
}
