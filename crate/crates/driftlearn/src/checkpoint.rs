//! Model checkpoint format: a directory holding `manifest.json` (tensor
//! shapes, activation tags, iteration and optimizer state) plus
//! `weights.bin`, the concatenation of all tensors in manifest order as
//! little-endian f64, row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, ModelState, OptimizerState};

#[derive(Debug, Serialize, Deserialize)]
struct TensorSpec {
    rows: usize,
    cols: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    iteration: u64,
    layers: Vec<TensorSpec>,
    head: TensorSpec,
    optimizer: OptimizerState,
}

pub fn save_checkpoint(dir: &Path, model: &ModelState, opt: &OptimizerState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        iteration: model.iteration,
        layers: model
            .layers
            .iter()
            .map(|l| TensorSpec {
                rows: l.weights.nrows(),
                cols: l.weights.ncols(),
                activation: Some(l.activation),
            })
            .collect(),
        head: TensorSpec {
            rows: model.head.nrows(),
            cols: model.head.ncols(),
            activation: None,
        },
        optimizer: opt.clone(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut file = fs::File::create(dir.join("weights.bin"))?;
    for layer in &model.layers {
        write_tensor(&mut file, &layer.weights)?;
    }
    write_tensor(&mut file, &model.head)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, OptimizerState)> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut file = fs::File::open(dir.join("weights.bin"))?;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        layers.push(Layer {
            weights: read_tensor(&mut file, spec.rows, spec.cols)?,
            activation: spec.activation.unwrap_or(Activation::Tanh),
        });
    }
    let head = read_tensor(&mut file, manifest.head.rows, manifest.head.cols)?;
    let mut model = ModelState::new(layers, head)?;
    model.iteration = manifest.iteration;
    Ok((model, manifest.optimizer))
}

fn write_tensor<W: Write>(w: &mut W, t: &Array2<f64>) -> Result<()> {
    for &v in t.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Serde(format!("bad tensor shape: {e}")))
}
