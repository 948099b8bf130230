//! Prints the structure stored in a weight file.

use std::path::Path;

use fpbench_core::nets::{load_weights, shape_after, LayerSpec};

pub fn run(path: &Path) -> anyhow::Result<()> {
    let model = load_weights(path)?;
    println!("file: {}", path.display());
    println!("input shape: {:?}", model.input_shape());
    println!("output shape: {:?}", model.output_shape());
    if model.spec().tap.is_some() {
        println!("tap shape: {:?}", model.tap_shape()?);
    }
    println!("parameters: {}", model.parameter_count());
    println!("layers:");
    let mut shape = model.input_shape().to_vec();
    for (index, layer) in model.spec().layers.iter().enumerate() {
        let params = layer_parameter_count(layer, &shape);
        shape = shape_after(layer, &shape)?;
        let tap_mark = if model.spec().tap == Some(index) {
            "  <- tap"
        } else {
            ""
        };
        println!(
            "  {index:>2} {:<20} -> {:?} ({params} params){tap_mark}",
            describe(layer),
            shape,
        );
    }
    Ok(())
}

fn describe(layer: &LayerSpec) -> String {
    match layer {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
        } => format!("conv {out_channels}ch k{kernel} s{stride}"),
        LayerSpec::Deconv {
            out_channels,
            kernel,
            stride,
        } => format!("deconv {out_channels}ch k{kernel} s{stride}"),
        LayerSpec::Dense { units } => format!("dense {units}"),
        LayerSpec::Relu => "relu".to_string(),
        LayerSpec::Sigmoid => "sigmoid".to_string(),
        LayerSpec::Flatten => "flatten".to_string(),
        LayerSpec::Reshape { shape } => format!("reshape {shape:?}"),
    }
}

fn layer_parameter_count(layer: &LayerSpec, input: &[usize]) -> usize {
    match layer {
        LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        }
        | LayerSpec::Deconv {
            out_channels,
            kernel,
            ..
        } => input[0] * out_channels * kernel * kernel + out_channels,
        LayerSpec::Dense { units } => {
            let fan_in: usize = input.iter().product();
            fan_in * units + units
        }
        _ => 0,
    }
}
