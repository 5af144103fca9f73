//! Fully connected generator mapping challenge bits to downsampled images.

mod adam;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use train::{gradients, mse_loss, prepare_targets, train, Gradients, TrainConfig, TrainReport};

use crate::challenge::Challenge;
use crate::error::{Error, Result};
use crate::formats::{self, GENERATOR_MAGIC};
use crate::image::ResponseImage;
use crate::rng::{self, tag};

pub const LEAKY_SLOPE: f64 = 0.2;
/// `20 · 32 · 32 / 16` followed by a 4096 expansion.
pub const DEFAULT_HIDDEN: [usize; 2] = [1280, 4096];
pub const DEFAULT_SIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu if z <= 0.0 => LEAKY_SLOPE * z,
            _ => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu if z <= 0.0 => LEAKY_SLOPE,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// out × in
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn pre_activation(&self, a: ArrayView2<f64>) -> Array2<f64> {
        a.dot(&self.weights.t()) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    layers: Vec<Layer>,
    side: usize,
    seed: u64,
}

/// Builds `n → hidden… → side²` with LeakyReLU on hidden layers and an
/// identity output. The input layer starts at zero so inputs that never fire
/// during training keep no influence; later layers use He-style normal
/// initialization scaled for the leaky slope. Biases start at zero.
pub fn build_generator(n: usize, hidden: &[usize], side: usize, seed: u64) -> Result<GeneratorModel> {
    if n == 0 {
        return Err(Error::Config("generator input width must be positive".into()));
    }
    if side < 8 {
        return Err(Error::Config(format!("generator output side must be >= 8, got {side}")));
    }
    if hidden.contains(&0) {
        return Err(Error::Config("hidden layer widths must be positive".into()));
    }
    let mut widths = vec![n];
    widths.extend_from_slice(hidden);
    widths.push(side * side);
    let last = widths.len() - 2;
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = if k == 0 && k != last {
                Array2::zeros((fan_out, fan_in))
            } else {
                let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut rng = rng::stream(seed, tag::INIT, k as u64);
                Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng))
            };
            Layer {
                weights,
                bias: Array1::zeros(fan_out),
                activation: if k == last {
                    Activation::Identity
                } else {
                    Activation::LeakyRelu
                },
            }
        })
        .collect();
    Ok(GeneratorModel { layers, side, seed })
}

#[derive(Serialize, Deserialize)]
struct GeneratorHeader {
    format: String,
    version: u32,
    widths: Vec<usize>,
    activations: Vec<Activation>,
    side: usize,
    seed: u64,
}

const GENERATOR_FORMAT: &str = "puf-forge/generator";

impl GeneratorModel {
    pub fn from_layers(layers: Vec<Layer>, side: usize, seed: u64) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Config("generator needs a layer".into()))?;
        let mut width = first.inputs();
        for l in &layers {
            if l.inputs() != width {
                return Err(Error::dim("layer input width", width, l.inputs()));
            }
            if l.bias.len() != l.outputs() {
                return Err(Error::dim("bias length", l.outputs(), l.bias.len()));
            }
            width = l.outputs();
        }
        if width != side * side {
            return Err(Error::dim("generator output width", side * side, width));
        }
        Ok(GeneratorModel { layers, side, seed })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Batch forward pass, one sample per row.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_width() {
            return Err(Error::dim("generator input width", self.input_width(), x.ncols()));
        }
        let mut a = x.to_owned();
        for l in &self.layers {
            let act = l.activation;
            a = l.pre_activation(a.view()).mapv_into(|z| act.apply(z));
        }
        Ok(a)
    }

    /// Pre-activations of every layer plus the activations feeding each.
    pub(crate) fn trace(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut inputs = vec![x.to_owned()];
        let mut zs = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let z = l.pre_activation(inputs.last().expect("nonempty").view());
            let act = l.activation;
            inputs.push(z.mapv(|v| act.apply(v)));
            zs.push(z);
        }
        (zs, inputs)
    }

    /// `side`×`side` prediction with negative intensities clamped to zero.
    pub fn predict_image(&self, challenge: &Challenge) -> Result<ResponseImage> {
        Ok(self.predict_batch(std::slice::from_ref(challenge))?.remove(0))
    }

    pub fn predict_batch(&self, challenges: &[Challenge]) -> Result<Vec<ResponseImage>> {
        let x = encode(challenges, self.input_width())?;
        let out = self.forward(x.view())?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generator forward pass"));
        }
        out.axis_iter(Axis(0))
            .map(|row| ResponseImage::from_clamped(self.side, self.side, row.to_vec()))
            .collect()
    }

    /// Header with widths, activations and seed, then each layer's weights
    /// (row-major, out × in) followed by its bias.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = GeneratorHeader {
            format: GENERATOR_FORMAT.into(),
            version: 1,
            widths: self.widths(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            side: self.side,
            seed: self.seed,
        };
        let mut block = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            block.extend(l.weights.iter());
            block.extend(l.bias.iter());
        }
        formats::write_framed(path, GENERATOR_MAGIC, &header, &block)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, block): (GeneratorHeader, Vec<f64>) = formats::read_framed(path, GENERATOR_MAGIC)?;
        let bad = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        if h.format != GENERATOR_FORMAT || h.widths.len() != h.activations.len() + 1 {
            return Err(bad("inconsistent generator header".into()));
        }
        let expected: usize = h.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        if block.len() != expected {
            return Err(bad(format!("expected {expected} parameters, found {}", block.len())));
        }
        let mut rest = &block[..];
        let mut layers = Vec::new();
        for (w, act) in h.widths.windows(2).zip(h.activations) {
            let (wt, tail) = rest.split_at(w[0] * w[1]);
            let (b, tail) = tail.split_at(w[1]);
            rest = tail;
            layers.push(Layer {
                weights: Array2::from_shape_vec((w[1], w[0]), wt.to_vec()).expect("sized"),
                bias: Array1::from(b.to_vec()),
                activation: act,
            });
        }
        GeneratorModel::from_layers(layers, h.side, h.seed)
    }
}

/// One row of 0/1 inputs per challenge.
pub(crate) fn encode(challenges: &[Challenge], width: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((challenges.len(), width));
    for (mut row, ch) in x.axis_iter_mut(Axis(0)).zip(challenges) {
        if ch.len() != width {
            return Err(Error::dim("challenge bits", width, ch.len()));
        }
        for (v, b) in row.iter_mut().zip(ch.bits()) {
            *v = if *b { 1.0 } else { 0.0 };
        }
    }
    Ok(x)
}
