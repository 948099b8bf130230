//! Generates a dataset and exports it as a raw image file.

use std::path::PathBuf;

use anyhow::{bail, Context};
use fpbench_core::datasets::{export_raw, gen_shapes_dataset, gen_sprite_dataset};

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    /// "sprites" (position targets) or "shapes" (class targets).
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    /// Class count for the shapes generator.
    #[arg(long, default_value_t = 10)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &GenDataArgs) -> anyhow::Result<()> {
    let dataset = match args.kind.as_str() {
        "sprites" => gen_sprite_dataset(args.n, args.image_size, args.seed)?,
        "shapes" => gen_shapes_dataset(args.n, args.image_size, args.num_classes, args.seed)?,
        other => bail!("unknown dataset kind {other:?}: expected \"sprites\" or \"shapes\""),
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).context("creating output directory")?;
        }
    }
    export_raw(&dataset, &args.out)?;
    println!(
        "{} {} images at {}px -> {}",
        dataset.len(),
        args.kind,
        args.image_size,
        args.out.display()
    );
    Ok(())
}
