//! The subcommand implementations and the plumbing they share.

pub mod bench;
pub mod convergence;
pub mod experiment;
pub mod gen_data;
pub mod inspect;
pub mod train_lossnet;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fpbench_core::datasets::{gen_shapes_dataset, gen_sprite_dataset, import_raw, Dataset};
use fpbench_core::nets::{load_weights, save_weights, Model};
use fpbench_core::procedures::make_procedure;

use crate::config::{DatasetSource, ExperimentConfig};

/// Seed offsets keeping the independently generated corpora on
/// disjoint randomness streams.
const SEED_PRETRAIN: u64 = 101;
const SEED_PROBE_TRAIN: u64 = 102;
const SEED_PROBE_TEST: u64 = 103;
const SEED_LOSSNET_TRAIN: u64 = 201;
const SEED_LOSSNET_TEST: u64 = 202;

/// Writes through a sibling temp file and renames into place, so a
/// failure partway never leaves a half-written artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = tmp_sibling(path);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Saves a model the same way `write_atomic` writes bytes.
pub fn save_weights_atomic(model: &Model, path: &Path) -> anyhow::Result<()> {
    let tmp = tmp_sibling(path);
    save_weights(model, &tmp).with_context(|| format!("writing weights {}", path.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("moving weights into place at {}", path.display()))?;
    Ok(())
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// The three corpora every experiment works from, in pretrain,
/// probe-train, probe-test order.
pub fn load_datasets(config: &ExperimentConfig) -> anyhow::Result<(Dataset, Dataset, Dataset)> {
    match &config.dataset {
        DatasetSource::Sprites => Ok((
            gen_sprite_dataset(
                config.n_pretrain,
                config.image_size,
                config.seed.wrapping_add(SEED_PRETRAIN),
            )?,
            gen_sprite_dataset(
                config.n_probe_train,
                config.image_size,
                config.seed.wrapping_add(SEED_PROBE_TRAIN),
            )?,
            gen_sprite_dataset(
                config.n_probe_test,
                config.image_size,
                config.seed.wrapping_add(SEED_PROBE_TEST),
            )?,
        )),
        DatasetSource::Shapes { num_classes } => Ok((
            gen_shapes_dataset(
                config.n_pretrain,
                config.image_size,
                *num_classes,
                config.seed.wrapping_add(SEED_PRETRAIN),
            )?,
            gen_shapes_dataset(
                config.n_probe_train,
                config.image_size,
                *num_classes,
                config.seed.wrapping_add(SEED_PROBE_TRAIN),
            )?,
            gen_shapes_dataset(
                config.n_probe_test,
                config.image_size,
                *num_classes,
                config.seed.wrapping_add(SEED_PROBE_TEST),
            )?,
        )),
        DatasetSource::Raw {
            pretrain,
            probe_train,
            probe_test,
        } => {
            let pre = import_raw(pretrain)
                .with_context(|| format!("importing {}", pretrain.display()))?;
            let ptrain = import_raw(probe_train)
                .with_context(|| format!("importing {}", probe_train.display()))?;
            let ptest = import_raw(probe_test)
                .with_context(|| format!("importing {}", probe_test.display()))?;
            for ds in [&pre, &ptrain, &ptest] {
                if ds.image_size() != pre.image_size() || ds.channels() != pre.channels() {
                    bail!("raw dataset splits disagree on image shape");
                }
            }
            Ok((pre, ptrain, ptest))
        }
    }
}

/// The two labeled corpora the loss network trains and tests on.
pub fn lossnet_datasets(config: &ExperimentConfig) -> anyhow::Result<(Dataset, Dataset)> {
    Ok((
        gen_shapes_dataset(
            config.lossnet.n_train,
            config.image_size,
            config.lossnet.num_classes,
            config.seed.wrapping_add(SEED_LOSSNET_TRAIN),
        )?,
        gen_shapes_dataset(
            config.lossnet.n_test,
            config.image_size,
            config.lossnet.num_classes,
            config.seed.wrapping_add(SEED_LOSSNET_TEST),
        )?,
    ))
}

/// Loads the frozen loss network if any configured procedure needs it.
pub fn load_lossnet_if_needed(config: &ExperimentConfig) -> anyhow::Result<Option<Model>> {
    let needed = config
        .procedures
        .iter()
        .any(|name| matches!(make_procedure(name), Ok(s) if s.needs_loss_network()));
    if !needed {
        return Ok(None);
    }
    let path = config.lossnet_weights_path();
    if !path.exists() {
        bail!(
            "loss-network weights not found at {}; run `fpbench train-lossnet` first \
             or point --lossnet-weights at an existing file",
            path.display()
        );
    }
    let model =
        load_weights(&path).with_context(|| format!("loading weights {}", path.display()))?;
    Ok(Some(model))
}

/// Deterministic per-cell seed, derived from the base seed and the
/// cell's position in the grid enumeration.
pub fn cell_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1))
}
