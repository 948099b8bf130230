//! The full grid: every configured procedure at every embedding width,
//! repeated, probed, and aggregated.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpbench_core::benchmark::{
    estimate_flops, normalize_convergence, render_convergence_svg, render_records_csv,
    ConvergenceCurve, NetConfig, RunRecord,
};
use fpbench_core::datasets::Dataset;
use fpbench_core::evaluation::{
    aggregate_runs, embed_dataset, evaluate_embeddings, format_aggregate, SupervisedConfig,
};
use fpbench_core::nets::Model;
use fpbench_core::procedures::{
    build_procedure, make_procedure, pretrain, TrainConfig, TrainHistory,
};

use crate::config::ExperimentConfig;
use crate::manifest::{CellRecord, CellStatus, RunManifest};

use super::{cell_seed, load_datasets, load_lossnet_if_needed, save_weights_atomic, write_atomic};

#[derive(Debug, Clone)]
struct CellPlan {
    procedure: String,
    z: usize,
    repeat: usize,
    seed: u64,
}

struct CellSuccess {
    record: RunRecord,
    cell: CellRecord,
    history: TrainHistory,
    artifacts: Vec<String>,
}

enum CellOutcome {
    Done(Box<CellSuccess>),
    Failed(CellRecord),
}

/// Runs the grid and writes results, aggregates, convergence charts,
/// and the manifest. Returns the process exit code: 0 when every cell
/// succeeded, 2 when some cells failed but the manifest was written.
pub fn run(config: &ExperimentConfig) -> anyhow::Result<u8> {
    let out = &config.output_dir;
    std::fs::create_dir_all(out.join("weights")).context("creating output directories")?;
    std::fs::create_dir_all(out.join("histories")).context("creating output directories")?;

    let (pre, probe_train, probe_test) = load_datasets(config)?;
    let lossnet = load_lossnet_if_needed(config)?;

    let mut plans = Vec::new();
    for procedure in &config.procedures {
        for &z in &config.z_values {
            for repeat in 0..config.repeats {
                plans.push(CellPlan {
                    procedure: procedure.clone(),
                    z,
                    repeat,
                    seed: cell_seed(config.seed, plans.len()),
                });
            }
        }
    }

    println!(
        "running {} cells ({} procedures x {} widths x {} repeats, jobs={})",
        plans.len(),
        config.procedures.len(),
        config.z_values.len(),
        config.repeats,
        config.jobs
    );

    let outcomes = run_cells(
        config,
        &plans,
        &pre,
        &probe_train,
        &probe_test,
        lossnet.as_ref(),
    );

    let mut manifest = RunManifest::new("run-experiment", config);
    let mut records = Vec::new();
    for outcome in &outcomes {
        match outcome {
            CellOutcome::Done(success) => {
                records.push(success.record.clone());
                manifest.cells.push(success.cell.clone());
                for artifact in &success.artifacts {
                    manifest.add_artifact(artifact.clone());
                }
            }
            CellOutcome::Failed(cell) => manifest.cells.push(cell.clone()),
        }
    }

    if !records.is_empty() {
        write_atomic(
            &out.join("results.csv"),
            render_records_csv(&records).as_bytes(),
        )?;
        manifest.add_artifact("results.csv");

        let aggregates = render_aggregates_csv(config, &records);
        write_atomic(&out.join("aggregates.csv"), aggregates.as_bytes())?;
        manifest.add_artifact("aggregates.csv");
        print!("{}", summarize_aggregates(&aggregates));
    }

    for &z in &config.z_values {
        let curves = convergence_curves(config, &plans, &outcomes, z);
        if curves.is_empty() {
            continue;
        }
        let rel = format!("convergence-z{z}.svg");
        write_atomic(&out.join(&rel), render_convergence_svg(&curves).as_bytes())?;
        manifest.add_artifact(rel);
    }

    if let Some(_model) = &lossnet {
        manifest.notes.push(format!(
            "loss network loaded from {}",
            config.lossnet_weights_path().display()
        ));
    }
    let failed = manifest.failed_cells();
    if failed > 0 {
        manifest
            .notes
            .push(format!("{failed} of {} cells failed", plans.len()));
    }
    let missing = manifest.missing_artifacts(out);
    if !missing.is_empty() {
        anyhow::bail!("artifacts vanished before the manifest was written: {missing:?}");
    }
    manifest.write(&out.join("manifest.json"))?;

    if failed > 0 {
        println!(
            "{failed} of {} cells failed; details in {}",
            plans.len(),
            out.join("manifest.json").display()
        );
        Ok(2)
    } else {
        println!(
            "all {} cells ok; results in {}",
            plans.len(),
            out.join("results.csv").display()
        );
        Ok(0)
    }
}

fn run_cells(
    config: &ExperimentConfig,
    plans: &[CellPlan],
    pre: &Dataset,
    probe_train: &Dataset,
    probe_test: &Dataset,
    lossnet: Option<&Model>,
) -> Vec<CellOutcome> {
    if config.jobs <= 1 {
        return plans
            .iter()
            .enumerate()
            .map(|(i, plan)| run_cell(config, plan, i, plans.len(), pre, probe_train, probe_test, lossnet))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CellOutcome>>> = plans.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..config.jobs.min(plans.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= plans.len() {
                    break;
                }
                let outcome = run_cell(
                    config,
                    &plans[i],
                    i,
                    plans.len(),
                    pre,
                    probe_train,
                    probe_test,
                    lossnet,
                );
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(outcome);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every planned cell ran")
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    plan: &CellPlan,
    index: usize,
    total: usize,
    pre: &Dataset,
    probe_train: &Dataset,
    probe_test: &Dataset,
    lossnet: Option<&Model>,
) -> CellOutcome {
    let started = Instant::now();
    match cell_inner(config, plan, pre, probe_train, probe_test, lossnet) {
        Ok(mut success) => {
            success.cell.wall_seconds = started.elapsed().as_secs_f64();
            println!(
                "[{}/{total}] {} z={} r={} {}={} ({:.1}s)",
                index + 1,
                plan.procedure,
                plan.z,
                plan.repeat,
                success.record.metric_kind,
                success.record.metric,
                success.cell.wall_seconds
            );
            CellOutcome::Done(Box::new(success))
        }
        Err(error) => {
            let message = format!("{error:#}");
            println!(
                "[{}/{total}] {} z={} r={} FAILED: {message}",
                index + 1,
                plan.procedure,
                plan.z,
                plan.repeat
            );
            CellOutcome::Failed(CellRecord {
                procedure: plan.procedure.clone(),
                z: plan.z,
                repeat: plan.repeat,
                seed: plan.seed,
                status: CellStatus::Failed { error: message },
                wall_seconds: started.elapsed().as_secs_f64(),
                metric_kind: None,
                metric: None,
                best_epoch: None,
                seconds_per_epoch: None,
            })
        }
    }
}

fn cell_inner(
    config: &ExperimentConfig,
    plan: &CellPlan,
    pre: &Dataset,
    probe_train: &Dataset,
    probe_test: &Dataset,
    lossnet: Option<&Model>,
) -> anyhow::Result<CellSuccess> {
    let spec = make_procedure(&plan.procedure)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut procedure = build_procedure(
        spec,
        pre.image_size(),
        pre.channels(),
        plan.z,
        lossnet,
        &mut rng,
    )?;

    let train_config = TrainConfig {
        epochs: config.autoencoder_epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        val_fraction: config.val_fraction,
        patience: config.patience,
        seed: plan.seed,
        element_loss: config.element_loss,
    };
    let history = pretrain(&mut procedure, lossnet, pre, &train_config)?;

    let stem = format!("{}-z{}-r{}", spec.name, plan.z, plan.repeat);
    let weights_rel = format!("weights/{stem}-encoder.fpbw");
    save_weights_atomic(&procedure.encoder, &config.output_dir.join(&weights_rel))?;
    let history_rel = format!("histories/{stem}.csv");
    write_atomic(
        &config.output_dir.join(&history_rel),
        history.to_csv().as_bytes(),
    )?;

    let train_set = embed_dataset(&procedure.encoder, spec.encoder_input, lossnet, probe_train)?;
    let test_set = embed_dataset(&procedure.encoder, spec.encoder_input, lossnet, probe_test)?;
    let probe_config = SupervisedConfig {
        epochs: config.probe_epochs,
        batch_size: config.batch_size,
        learning_rate: config.probe_learning_rate,
        val_fraction: config.val_fraction,
        patience: None,
        seed: plan.seed,
    };
    let eval = evaluate_embeddings(&train_set, &test_set, &probe_config)?;

    let cost = estimate_flops(
        spec,
        &NetConfig {
            image_size: pre.image_size(),
            channels: pre.channels(),
            z: plan.z,
            num_classes: config.lossnet.num_classes,
        },
    )?;

    let best_epoch = history.best_epoch.unwrap_or(0);
    let seconds_per_epoch = if history.epochs.is_empty() {
        None
    } else {
        Some(
            history.epochs.iter().map(|e| e.wall_seconds).sum::<f64>()
                / history.epochs.len() as f64,
        )
    };

    Ok(CellSuccess {
        record: RunRecord {
            procedure: spec.name.to_string(),
            z: plan.z,
            seed: plan.seed,
            metric_kind: eval.metric_kind.code().to_string(),
            metric: eval.value,
            seconds_per_epoch: None,
            flops_per_sample: cost.total_flops_per_sample(),
            best_epoch,
        },
        cell: CellRecord {
            procedure: spec.name.to_string(),
            z: plan.z,
            repeat: plan.repeat,
            seed: plan.seed,
            status: CellStatus::Ok,
            wall_seconds: 0.0,
            metric_kind: Some(eval.metric_kind.code().to_string()),
            metric: Some(eval.value),
            best_epoch: Some(best_epoch),
            seconds_per_epoch,
        },
        history,
        artifacts: vec![weights_rel, history_rel],
    })
}

/// One row per procedure × width with mean, uncorrected std, and the
/// two-decimal summary form.
fn render_aggregates_csv(config: &ExperimentConfig, records: &[RunRecord]) -> String {
    let mut out = String::from("procedure,z,metric_kind,mean,std,summary\n");
    for procedure in &config.procedures {
        for &z in &config.z_values {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| &r.procedure == procedure && r.z == z)
                .map(|r| r.metric)
                .collect();
            if values.is_empty() {
                continue;
            }
            let metric_kind = records
                .iter()
                .find(|r| &r.procedure == procedure && r.z == z)
                .map(|r| r.metric_kind.clone())
                .unwrap_or_default();
            let (mean, std) = aggregate_runs(&values);
            out.push_str(&format!(
                "{procedure},{z},{metric_kind},{mean},{std},{}\n",
                format_aggregate(mean, std)
            ));
        }
    }
    out
}

fn summarize_aggregates(csv: &str) -> String {
    let mut out = String::new();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() == 6 {
            out.push_str(&format!(
                "  {} z={} {}: {}\n",
                fields[0], fields[1], fields[2], fields[5]
            ));
        }
    }
    out
}

/// First-repeat validation curves for every procedure at one width.
fn convergence_curves(
    config: &ExperimentConfig,
    plans: &[CellPlan],
    outcomes: &[CellOutcome],
    z: usize,
) -> Vec<(String, ConvergenceCurve)> {
    let mut curves = Vec::new();
    for procedure in &config.procedures {
        let success = plans.iter().zip(outcomes).find_map(|(plan, outcome)| {
            match outcome {
                CellOutcome::Done(s)
                    if &plan.procedure == procedure && plan.z == z && plan.repeat == 0 =>
                {
                    Some(s)
                }
                _ => None,
            }
        });
        let Some(success) = success else { continue };
        let raw: Vec<f64> = success.history.epochs.iter().map(|e| e.val_loss).collect();
        if let Ok(curve) = normalize_convergence(&raw) {
            curves.push((procedure.clone(), curve));
        }
    }
    curves
}
