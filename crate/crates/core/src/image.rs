//! Intensity grids and the geometric helpers shared by every stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Raw,
    UnitMax,
}

/// A nonnegative, row-major intensity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
    normalization: Normalization,
}

impl ResponseImage {
    /// Wraps raw intensities. Every value must be finite and nonnegative.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid("image dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::dim("image pixel count", height * width, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image construction"));
        }
        if let Some(v) = data.iter().find(|v| **v < 0.0) {
            return Err(Error::Invalid(format!("negative intensity {v}")));
        }
        Ok(ResponseImage {
            height,
            width,
            data,
            normalization: Normalization::Raw,
        })
    }

    /// Builds an image from an affine prediction, clamping negatives to zero.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Self::new(height, width, data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ResponseImage {
            height,
            width,
            data: vec![0.0; height * width],
            normalization: Normalization::Raw,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Divides by the maximum; an all-zero image is returned unchanged.
    pub fn to_unit_max(&self) -> ResponseImage {
        let max = self.max();
        let data = if max > 0.0 {
            self.data.iter().map(|v| v / max).collect()
        } else {
            self.data.clone()
        };
        ResponseImage {
            height: self.height,
            width: self.width,
            data,
            normalization: Normalization::UnitMax,
        }
    }

    /// Multiplies every pixel by a nonnegative factor.
    pub fn scaled(&self, factor: f64) -> Result<ResponseImage> {
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(Error::Invalid(format!("scale factor {factor} must be finite and >= 0")));
        }
        Ok(ResponseImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
            normalization: Normalization::Raw,
        })
    }

    /// Averages non-overlapping blocks down to `side`×`side`; requires a square
    /// image whose side is a multiple of `side`.
    pub fn downsample_box(&self, side: usize) -> Result<ResponseImage> {
        if self.height != self.width || side == 0 || !self.height.is_multiple_of(side) {
            return Err(Error::Invalid(format!(
                "cannot box-downsample {}x{} to {side}x{side}",
                self.height, self.width
            )));
        }
        let f = self.height / side;
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; side * side];
        for r in 0..self.height {
            let src = self.row(r);
            let dst = &mut out[(r / f) * side..(r / f + 1) * side];
            for (c, v) in src.iter().enumerate() {
                dst[c / f] += v * norm;
            }
        }
        Ok(ResponseImage {
            height: side,
            width: side,
            data: out,
            normalization: Normalization::Raw,
        })
    }

    /// Nearest-neighbor upsampling of a square image to `side`×`side`, where
    /// `side` is a multiple of the current side.
    pub fn upsample_nearest(&self, side: usize) -> Result<ResponseImage> {
        if self.height != self.width || !side.is_multiple_of(self.height) {
            return Err(Error::Invalid(format!(
                "cannot upsample {}x{} to {side}x{side}",
                self.height, self.width
            )));
        }
        let f = side / self.height;
        let mut out = Vec::with_capacity(side * side);
        for r in 0..side {
            let src = self.row(r / f);
            out.extend((0..side).map(|c| src[c / f]));
        }
        Ok(ResponseImage {
            height: side,
            width: side,
            data: out,
            normalization: self.normalization,
        })
    }
}

/// Cuts the centered `side`×`side` window out of `img`. When the margin is odd
/// the extra row and column fall on the bottom/right.
pub fn crop_center(img: &ResponseImage, side: usize) -> Result<ResponseImage> {
    if side == 0 || side > img.height || side > img.width {
        return Err(Error::Config(format!(
            "crop side {side} does not fit into a {}x{} image",
            img.height, img.width
        )));
    }
    let (r0, c0) = crop_offset(img.height, img.width, side);
    let mut data = Vec::with_capacity(side * side);
    for r in r0..r0 + side {
        data.extend_from_slice(&img.row(r)[c0..c0 + side]);
    }
    Ok(ResponseImage {
        height: side,
        width: side,
        data,
        normalization: img.normalization,
    })
}

/// Top-left corner of the centered crop window.
pub fn crop_offset(height: usize, width: usize, side: usize) -> (usize, usize) {
    ((height - side) / 2, (width - side) / 2)
}
