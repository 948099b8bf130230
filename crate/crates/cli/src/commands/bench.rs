//! Analytic FLOP counts for every configured cell, plus measured wall
//! time per epoch at selected widths.

use anyhow::Context;

use fpbench_core::benchmark::{estimate_flops, time_epochs, NetConfig, TimingConfig};
use fpbench_core::evaluation::aggregate_runs;
use fpbench_core::procedures::make_procedure;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

use super::{load_datasets, load_lossnet_if_needed, write_atomic};

pub struct BenchOptions {
    /// Widths to actually time; others get FLOP counts only.
    pub time_z: Option<Vec<usize>>,
    pub timed_epochs: usize,
    pub samples: usize,
}

pub fn run(config: &ExperimentConfig, options: &BenchOptions) -> anyhow::Result<u8> {
    std::fs::create_dir_all(&config.output_dir).context("creating output directory")?;
    let (pre, _, _) = load_datasets(config)?;
    let n = options.samples.clamp(16, pre.len());
    let data = pre.slice(0, n);
    let lossnet = load_lossnet_if_needed(config)?;
    let time_z = options
        .time_z
        .clone()
        .unwrap_or_else(|| vec![config.z_values[0]]);

    let mut csv = String::new();
    csv.push_str(&format!(
        "# seconds_per_epoch: mean and uncorrected std over {} timed epochs \
         after one discarded warm-up epoch, {} samples per epoch\n",
        options.timed_epochs, n
    ));
    csv.push_str(
        "procedure,z,forward_flops,backward_flops,untaped_forward_flops,setup_flops,\
         total_flops_per_sample,seconds_per_epoch_mean,seconds_per_epoch_std\n",
    );

    let mut failures = Vec::new();
    for name in &config.procedures {
        let spec = make_procedure(name)?;
        for &z in &config.z_values {
            let cost = estimate_flops(
                spec,
                &NetConfig {
                    image_size: config.image_size,
                    channels: pre.channels(),
                    z,
                    num_classes: config.lossnet.num_classes,
                },
            )?;
            let mut mean_text = String::new();
            let mut std_text = String::new();
            if time_z.contains(&z) {
                let timing = TimingConfig {
                    z,
                    batch_size: config.batch_size,
                    learning_rate: config.learning_rate,
                    element_loss: config.element_loss,
                    seed: config.seed,
                };
                match time_epochs(spec, &data, lossnet.as_ref(), &timing, options.timed_epochs) {
                    Ok(seconds) => {
                        let (mean, std) = aggregate_runs(&seconds);
                        mean_text = format!("{mean}");
                        std_text = format!("{std}");
                        println!(
                            "{name} z={z}: {:.3}s/epoch, {} flops/sample",
                            mean,
                            cost.total_flops_per_sample()
                        );
                    }
                    Err(error) => {
                        failures.push(format!("{name} z={z}: {error:#}"));
                        println!("{name} z={z}: timing FAILED: {error:#}");
                    }
                }
            } else {
                println!(
                    "{name} z={z}: {} flops/sample (not timed)",
                    cost.total_flops_per_sample()
                );
            }
            csv.push_str(&format!(
                "{name},{z},{},{},{},{},{},{mean_text},{std_text}\n",
                cost.forward_flops,
                cost.backward_flops,
                cost.untaped_forward_flops,
                cost.setup_flops,
                cost.total_flops_per_sample(),
            ));
        }
    }

    let csv_path = config.output_dir.join("benchmark.csv");
    write_atomic(&csv_path, csv.as_bytes())?;

    let mut manifest = RunManifest::new("benchmark", config);
    manifest.add_artifact("benchmark.csv");
    manifest.notes.push(format!(
        "timed widths: {time_z:?}; {} samples; {} timed epochs after warm-up",
        n, options.timed_epochs
    ));
    for failure in &failures {
        manifest.notes.push(format!("timing failure: {failure}"));
    }
    manifest.write(&config.output_dir.join("benchmark-manifest.json"))?;

    println!("benchmark table -> {}", csv_path.display());
    Ok(if failures.is_empty() { 0 } else { 2 })
}
