use std::borrow::Borrow;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{encode, AdamConfig, AdamState, GeneratorModel};
use crate::challenge::Challenge;
use crate::dataset::Crp;
use crate::error::{Error, Result};
use crate::image::ResponseImage;
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss over the whole training set before the first update.
    pub initial_loss: f64,
    /// Sample-weighted mean of the batch losses of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }

    /// `epoch,loss` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,loss")?;
        for (e, l) in self.epoch_losses.iter().enumerate() {
            writeln!(out, "{},{l:e}", e + 1)?;
        }
        Ok(())
    }
}

/// Gradients of the mean squared error, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Mean over all samples and outputs of the squared residual.
pub fn mse_loss(model: &GeneratorModel, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let out = model.forward(x)?;
    if out.dim() != y.dim() {
        return Err(Error::dim("target width", out.ncols(), y.ncols()));
    }
    Ok((&out - &y).mapv(|r| r * r).mean().unwrap_or(0.0))
}

/// Reverse-mode gradients of [`mse_loss`] for the batch `(x, y)`.
pub fn gradients(model: &GeneratorModel, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(f64, Gradients)> {
    if x.nrows() == 0 {
        return Err(Error::Invalid("gradient batch is empty".into()));
    }
    if x.ncols() != model.input_width() {
        return Err(Error::dim("generator input width", model.input_width(), x.ncols()));
    }
    let (zs, acts) = model.trace(x);
    let out = acts.last().expect("output");
    if out.dim() != y.dim() {
        return Err(Error::dim("target width", out.ncols(), y.ncols()));
    }
    let resid = out - &y;
    let loss = resid.mapv(|r| r * r).mean().unwrap_or(0.0);
    let scale = 2.0 / resid.len() as f64;
    let layers = model.layers();
    let mut delta = resid * scale;
    let mut weights = Vec::with_capacity(layers.len());
    let mut biases = Vec::with_capacity(layers.len());
    for k in (0..layers.len()).rev() {
        let act = layers[k].activation;
        delta.zip_mut_with(&zs[k], |d, z| *d *= act.derivative(*z));
        weights.push(delta.t().dot(&acts[k]));
        biases.push(delta.sum_axis(Axis(0)));
        if k > 0 {
            delta = delta.dot(&layers[k].weights);
        }
    }
    weights.reverse();
    biases.reverse();
    Ok((loss, Gradients { weights, biases }))
}

/// Targets for the generator: each cropped response box-downsampled to
/// `side`×`side` and scaled to unit maximum.
pub fn prepare_targets<C: Borrow<Crp>>(crps: &[C], side: usize) -> Result<Vec<ResponseImage>> {
    crps.iter()
        .map(|c| Ok(c.borrow().cropped.downsample_box(side)?.to_unit_max()))
        .collect()
}

fn stack_targets(targets: &[ResponseImage], width: usize) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((targets.len(), width));
    for (mut row, t) in y.axis_iter_mut(Axis(0)).zip(targets) {
        if t.len() != width {
            return Err(Error::dim("target pixels", width, t.len()));
        }
        row.assign(&ndarray::ArrayView1::from(t.pixels()));
    }
    Ok(y)
}

/// Mini-batch ADAM on the MSE. The sample order is reshuffled every epoch
/// from `config.seed`. Aborts with [`Error::Diverged`] on a non-finite loss.
pub fn train(
    model: &mut GeneratorModel,
    challenges: &[Challenge],
    targets: &[ResponseImage],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if challenges.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if challenges.len() != targets.len() {
        return Err(Error::dim("training targets", challenges.len(), targets.len()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let x = encode(challenges, model.input_width())?;
    let d = model.side() * model.side();
    let y = stack_targets(targets, d)?;
    let sizes: Vec<usize> = model
        .layers()
        .iter()
        .flat_map(|l| [l.weights.len(), l.bias.len()])
        .collect();
    let mut adam = AdamState::new(config.adam, &sizes)?;
    let initial_loss = mse_loss(model, x.view(), y.view())?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }

    let mut order: Vec<usize> = (0..challenges.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, tag::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let bx = x.select(Axis(0), batch);
            let by = y.select(Axis(0), batch);
            let (loss, grads) = gradients(model, bx.view(), by.view())?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1 });
            }
            total += loss * batch.len() as f64;
            adam.begin_step();
            for (k, layer) in model.layers_mut().iter_mut().enumerate() {
                let w = layer.weights.as_slice_mut().expect("standard layout");
                adam.update(2 * k, w, grads.weights[k].as_standard_layout().as_slice().expect("contiguous"));
                let b = layer.bias.as_slice_mut().expect("contiguous");
                adam.update(2 * k + 1, b, grads.biases[k].as_slice().expect("contiguous"));
            }
        }
        let mean = total / challenges.len() as f64;
        if !mean.is_finite() || model.layers().iter().any(|l| l.weights.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { epoch: epoch + 1 });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        initial_loss,
        epoch_losses,
    })
}
